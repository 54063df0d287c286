"""Overlapping patch partition of a grid, point routing and seam-free stitching."""
import logging
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from ..errors import ConfigError, CoverageError, SchemaError
from .geo import LAND, VARIABLES, GridField, GridSpec

logger = logging.getLogger(__name__)

_TOL = 1e-9


@dataclass(frozen=True)
class PatchSpec:
    patch_id: int
    row: int
    col: int
    lat0: float
    lat1: float
    lon0: float
    lon1: float
    ilat0: float
    ilat1: float
    ilon0: float
    ilon1: float
    grid: GridSpec

    @property
    def lat_margins(self) -> Tuple[float, float]:
        return self.ilat0 - self.lat0, self.lat1 - self.ilat1

    @property
    def lon_margins(self) -> Tuple[float, float]:
        return self.ilon0 - self.lon0, self.lon1 - self.ilon1


def _snap(x: float, origin: float, res: float) -> float:
    """Nearest cell edge of the grid; a bound on a cell center moves to the edge below it"""
    return origin + float(np.ceil((x - origin) / res - 0.5 - 1e-9)) * res


def _axis_starts(lo: float, hi: float, patch: float, stride: float, periodic: bool, axis: str) -> List[float]:
    extent = hi - lo
    if periodic:
        n = extent / stride
        if abs(n - round(n)) > 1e-6:
            raise ConfigError(f'{axis} stride {stride} does not divide the periodic extent {extent}')
        if patch > extent + _TOL:
            raise ConfigError(f'{axis} patch {patch} exceeds the periodic extent {extent}')
        return [lo + k * stride for k in range(int(round(n)))]
    if patch > extent + _TOL:
        raise ConfigError(f'{axis} patch {patch} exceeds the domain extent {extent}')
    n = (extent - patch) / stride
    if abs(n - round(n)) > 1e-6:
        raise ConfigError(f'{axis} patch {patch} with stride {stride} does not tile the extent {extent}')
    return [lo + k * stride for k in range(int(round(n)) + 1)]


def _axis_interiors(starts: List[float], lo: float, hi: float, overlap: float,
                    stride: float, periodic: bool) -> List[Tuple[float, float]]:
    half = overlap / 2.0
    out = []
    for k, s in enumerate(starts):
        a, b = s + half, s + half + stride
        if not periodic:
            if k == 0:
                a = lo
            if k == len(starts) - 1:
                b = hi
        out.append((a, b))
    return out


def partition_domain(spec: GridSpec, patch_deg: Sequence[float],
                     overlap_deg: Sequence[float]) -> List[PatchSpec]:
    """Patches at stride = patch - overlap per axis, lat-major order.

    Patch and interior bounds are laid out in degrees, then snapped to the
    cell edges of `spec`. Interiors (patch minus half the overlap on inner
    sides) tile the domain exactly once.
    """
    (p_lat, p_lon), (o_lat, o_lon) = patch_deg, overlap_deg
    for axis, p, o in (('lat', p_lat, o_lat), ('lon', p_lon, o_lon)):
        if not p > o >= 0:
            raise ConfigError(f'{axis}: need patch > overlap >= 0, got patch {p}, overlap {o}')
    s_lat, s_lon = p_lat - o_lat, p_lon - o_lon
    lat_starts = _axis_starts(spec.lat_min, spec.lat_max, p_lat, s_lat, False, 'lat')
    lon_starts = _axis_starts(spec.lon_min, spec.lon_max, p_lon, s_lon, spec.periodic_lon, 'lon')
    lat_int = _axis_interiors(lat_starts, spec.lat_min, spec.lat_max, o_lat, s_lat, False)
    lon_int = _axis_interiors(lon_starts, spec.lon_min, spec.lon_max, o_lon, s_lon, spec.periodic_lon)

    def lat_edge(x: float) -> float:
        return _snap(x, spec.lat_min, spec.res)

    def lon_edge(x: float) -> float:
        return _snap(x, spec.lon_min, spec.res)

    patches = []
    for r, (la, (ia0, ia1)) in enumerate(zip(lat_starts, lat_int)):
        for c, (lo, (io0, io1)) in enumerate(zip(lon_starts, lon_int)):
            patch = PatchSpec(
                patch_id=len(patches), row=r, col=c,
                lat0=lat_edge(la), lat1=lat_edge(la + p_lat), lon0=lon_edge(lo), lon1=lon_edge(lo + p_lon),
                ilat0=lat_edge(ia0), ilat1=lat_edge(ia1), ilon0=lon_edge(io0), ilon1=lon_edge(io1), grid=spec,
            )
            if patch.lat1 - patch.lat0 < spec.res - _TOL or patch.lon1 - patch.lon0 < spec.res - _TOL:
                raise ConfigError(f'patch {patch_deg} holds no whole cell of grid {spec.header()}')
            patches.append(patch)
    logger.debug(f'partitioned {spec.header()} into {len(lat_starts)} x {len(lon_starts)} patches')
    return patches


def _rel_lon(lons: np.ndarray, lon0: float, grid: GridSpec) -> np.ndarray:
    lons = np.asarray(lons, dtype=np.float64)
    if grid.periodic_lon:
        return np.mod(lons - lon0, 360.0)
    return lons - lon0


def _inside(lats, lons, patch: PatchSpec, a0, a1, o0, o1) -> np.ndarray:
    lats = np.asarray(lats, dtype=np.float64)
    rel = _rel_lon(lons, o0, patch.grid)
    return (lats >= a0) & (lats < a1) & (rel >= 0) & (rel < o1 - o0)


def assign_points(lats, lons, patch: PatchSpec) -> np.ndarray:
    """Indices of points inside the full patch (min edge inclusive, max edge exclusive)"""
    return np.flatnonzero(_inside(lats, lons, patch, patch.lat0, patch.lat1, patch.lon0, patch.lon1))


def assign_interior(lats, lons, patch: PatchSpec) -> np.ndarray:
    return np.flatnonzero(_inside(lats, lons, patch, patch.ilat0, patch.ilat1, patch.ilon0, patch.ilon1))


def patch_cells(patch: PatchSpec, spec: GridSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Row and column indices of the `spec` cells whose centers lie in the patch"""
    lat_c = spec.lat_centers
    rows = np.flatnonzero((lat_c >= patch.lat0) & (lat_c < patch.lat1))
    rel = _rel_lon(spec.lon_centers, patch.lon0, spec)
    inside = (rel >= 0) & (rel < patch.lon1 - patch.lon0)
    cols = np.flatnonzero(inside)
    cols = cols[np.argsort(rel[cols], kind='stable')]
    return rows, cols


def patch_grid(patch: PatchSpec, spec: GridSpec) -> GridSpec:
    """Local non-periodic grid of the patch at the resolution of `spec`"""
    return GridSpec(patch.lat0, patch.lat1, patch.lon0, patch.lon1, spec.res, False)


def extract_patch(field: GridField, patch: PatchSpec) -> GridField:
    """Cells of `field` whose centers lie in the patch, on their own local grid.

    The grid need not align with the patch edges (a coarse background under
    fine-grid patches keeps whole cells).
    """
    spec = field.spec
    rows, cols = patch_cells(patch, spec)
    if not len(rows) or not len(cols):
        raise SchemaError(f'patch {patch.patch_id} contains no cell center of grid {spec.header()}')
    rel0 = _rel_lon(spec.lon_centers[cols[0]], patch.lon0, spec)
    lat_lo = spec.lat_centers[rows[0]] - spec.res / 2.0
    lon_lo = patch.lon0 + float(rel0) - spec.res / 2.0
    local = GridSpec(lat_lo, lat_lo + len(rows) * spec.res, lon_lo, lon_lo + len(cols) * spec.res, spec.res, False)
    sel = np.ix_(rows, cols)
    return GridField(local, field.variables, field.values[sel], field.ocean_mask[sel], field.day)


def _ramp(d: np.ndarray, margin: float) -> np.ndarray:
    if margin <= _TOL:
        return np.ones_like(d)
    return np.minimum(1.0, d / margin)


def blend_weights(patch: PatchSpec, spec: GridSpec) -> np.ndarray:
    """Hat weight per patch cell: 1 in the interior, linear to 0 at inner patch edges"""
    rows, cols = patch_cells(patch, spec)
    lat_c = spec.lat_centers[rows]
    rel = _rel_lon(spec.lon_centers[cols], patch.lon0, spec)
    m_lo, m_hi = patch.lat_margins
    w_lat = np.minimum(_ramp(lat_c - patch.lat0, m_lo), _ramp(patch.lat1 - lat_c, m_hi))
    n_lo, n_hi = patch.lon_margins
    span = patch.lon1 - patch.lon0
    w_lon = np.minimum(_ramp(rel, n_lo), _ramp(span - rel, n_hi))
    return np.outer(w_lat, w_lon)


def stitch(patch_outputs: Iterable[Tuple[PatchSpec, np.ndarray]], spec: GridSpec,
           ocean_mask: Optional[np.ndarray] = None,
           variables: Sequence[str] = VARIABLES, day: int = 0) -> GridField:
    """Blend per-patch (h, w, v) outputs into one field with renormalized hat weights.

    Reduction order is fixed by patch id, so the result does not depend on
    the order in which patch outputs arrive.
    """
    mask = np.ones(spec.shape, dtype=bool) if ocean_mask is None else np.asarray(ocean_mask, dtype=bool)
    v = len(variables)
    num = np.zeros(spec.shape + (v,))
    den = np.zeros(spec.shape)
    for patch, out in sorted(patch_outputs, key=lambda item: item[0].patch_id):
        rows, cols = patch_cells(patch, spec)
        if out.shape != (len(rows), len(cols), v):
            raise SchemaError(f'patch {patch.patch_id} output {out.shape} does not cover its '
                              f'{len(rows)} x {len(cols)} grid with {v} variables')
        sel = np.ix_(rows, cols)
        w = blend_weights(patch, spec)
        vals = np.where(mask[sel][..., None], out, 0.0)
        num[sel] += w[..., None] * vals
        den[sel] += w
    if np.any(den <= 0):
        n = int((den <= 0).sum())
        raise CoverageError(f'{n} grid cells are covered by no patch')
    values = num / den[..., None]
    values[~mask] = LAND
    return GridField(spec, tuple(variables), values, mask.copy(), day)
