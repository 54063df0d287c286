"""Regular lat/lon grids, land masks, latitude weights and coordinate encoding.

Grids are cell-center registered: row i sits at lat_min + (i + 0.5) * res.
Land cells of a GridField hold NaN and are never read by metrics or losses.
"""
import logging
from dataclasses import dataclass, replace
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from ..errors import ConfigError, DomainError, SchemaError

logger = logging.getLogger(__name__)

VARIABLES: Tuple[str, ...] = ('T', 'S', 'U', 'V', 'SSH')
LAND = np.nan
_TOL = 1e-9


@dataclass(frozen=True)
class GridSpec:
    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float
    res: float
    periodic_lon: bool = False

    def __post_init__(self):
        if self.res <= 0:
            raise ConfigError(f'grid resolution must be positive, got {self.res}')
        if not -90.0 <= self.lat_min < self.lat_max <= 90.0:
            raise ConfigError(f'bad latitude extent [{self.lat_min}, {self.lat_max}]')
        if self.lon_max <= self.lon_min:
            raise ConfigError(f'bad longitude extent [{self.lon_min}, {self.lon_max})')
        for name, span in (('lat', self.lat_max - self.lat_min), ('lon', self.lon_max - self.lon_min)):
            n = span / self.res
            if abs(n - round(n)) > 1e-6:
                raise ConfigError(f'{name} extent {span} is not a whole number of {self.res} degree cells')
        if self.periodic_lon and abs(self.lon_max - self.lon_min - 360.0) > 1e-6:
            raise ConfigError('periodic longitude requires a 360 degree extent')

    @property
    def H(self) -> int:
        return int(round((self.lat_max - self.lat_min) / self.res))

    @property
    def W(self) -> int:
        return int(round((self.lon_max - self.lon_min) / self.res))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.H, self.W

    @property
    def lat_centers(self) -> np.ndarray:
        return self.lat_min + (np.arange(self.H) + 0.5) * self.res

    @property
    def lon_centers(self) -> np.ndarray:
        return self.lon_min + (np.arange(self.W) + 0.5) * self.res

    def mesh(self) -> Tuple[np.ndarray, np.ndarray]:
        """(lat, lon) center arrays of shape (H, W)"""
        return np.meshgrid(self.lat_centers, self.lon_centers, indexing='ij')

    def with_res(self, res: float) -> 'GridSpec':
        return replace(self, res=res)

    def ratio_to(self, finer: 'GridSpec') -> int:
        r = self.res / finer.res
        if abs(r - round(r)) > 1e-9 or round(r) < 1:
            raise ConfigError(f'{self.res} is not an integer multiple of {finer.res}')
        return int(round(r))

    def wrap_lon(self, lons: np.ndarray) -> np.ndarray:
        lons = np.asarray(lons, dtype=np.float64)
        if self.periodic_lon:
            return self.lon_min + np.mod(lons - self.lon_min, 360.0)
        return lons

    def cell_index(self, lats, lons) -> Tuple[np.ndarray, np.ndarray]:
        """Row/column of the cell containing each point (clipped to the grid)"""
        lats = np.asarray(lats, dtype=np.float64)
        lons = self.wrap_lon(lons)
        i = np.clip(np.floor((lats - self.lat_min) / self.res).astype(int), 0, self.H - 1)
        j = np.clip(np.floor((lons - self.lon_min) / self.res).astype(int), 0, self.W - 1)
        return i, j

    def header(self) -> str:
        return (f'lat=[{self.lat_min}, {self.lat_max}] lon=[{self.lon_min}, {self.lon_max}) '
                f'res={self.res} H={self.H} W={self.W} periodic_lon={self.periodic_lon}')


@dataclass
class GridField:
    spec: GridSpec
    variables: Tuple[str, ...]
    values: np.ndarray
    ocean_mask: np.ndarray
    day: int = 0

    def __post_init__(self):
        self.variables = tuple(self.variables)
        if self.values.shape != (self.spec.H, self.spec.W, len(self.variables)):
            raise SchemaError(f'values shape {self.values.shape} does not match grid '
                              f'{self.spec.shape} x {len(self.variables)} variables')
        if self.ocean_mask.shape != self.spec.shape:
            raise SchemaError(f'mask shape {self.ocean_mask.shape} does not match grid {self.spec.shape}')
        self.ocean_mask = self.ocean_mask.astype(bool, copy=False)

    def var_index(self, name: str) -> int:
        try:
            return self.variables.index(name)
        except ValueError:
            raise SchemaError(f"variable '{name}' not in field {self.variables}") from None

    def var(self, name: str) -> np.ndarray:
        return self.values[..., self.var_index(name)]

    def with_values(self, values: np.ndarray, variables: Optional[Sequence[str]] = None) -> 'GridField':
        return GridField(self.spec, tuple(variables or self.variables), values, self.ocean_mask, self.day)

    def select(self, variables: Sequence[str]) -> 'GridField':
        idx = [self.var_index(v) for v in variables]
        return self.with_values(self.values[..., idx], variables)

    def masked(self) -> 'GridField':
        """Copy with land cells reset to the sentinel"""
        values = self.values.copy()
        values[~self.ocean_mask] = LAND
        return self.with_values(values)

    def ocean_values(self) -> np.ndarray:
        """(n_ocean, v) values in row-major cell order"""
        return self.values[self.ocean_mask]

    def copy(self) -> 'GridField':
        return GridField(self.spec, self.variables, self.values.copy(), self.ocean_mask.copy(), self.day)


@dataclass(frozen=True)
class EncodedCoord:
    lat_sin: float
    lat_cos: float
    lon_sin: float
    lon_cos: float

    def as_array(self) -> np.ndarray:
        return np.array([self.lat_sin, self.lat_cos, self.lon_sin, self.lon_cos])


def _check_lat(lats: np.ndarray):
    if np.any(~np.isfinite(lats)) or np.any(np.abs(lats) > 90.0 + _TOL):
        raise DomainError('latitude outside [-90, 90]')


def encode_coord(lat_deg: float, lon_deg: float) -> EncodedCoord:
    row = encode_coords(np.array([lat_deg]), np.array([lon_deg]))[0]
    return EncodedCoord(*row)


def encode_coords(lats, lons) -> np.ndarray:
    """(n, 4) array of sin/cos of latitude and longitude in radians"""
    lats = np.asarray(lats, dtype=np.float64)
    lons = np.asarray(lons, dtype=np.float64)
    _check_lat(lats)
    phi = np.deg2rad(lats)
    lam = np.deg2rad(np.mod(lons, 360.0))
    return np.stack([np.sin(phi), np.cos(phi), np.sin(lam), np.cos(lam)], axis=-1)


def lat_weights(spec: GridSpec) -> np.ndarray:
    return np.cos(np.deg2rad(spec.lat_centers))


def _wrapped_delta(lons: np.ndarray, center: float) -> np.ndarray:
    return np.mod(lons - center + 180.0, 360.0) - 180.0


def analytic_land(lats: np.ndarray, lons: np.ndarray, landmasses) -> np.ndarray:
    land = np.zeros(np.broadcast(lats, lons).shape, dtype=bool)
    for shape in landmasses:
        dlat = (lats - shape.lat) / shape.half_lat
        dlon = _wrapped_delta(lons, shape.lon) / shape.half_lon
        if shape.kind == 'ellipse':
            land |= dlat ** 2 + dlon ** 2 <= 1.0
        else:
            land |= (np.abs(dlat) <= 1.0) & (np.abs(dlon) <= 1.0)
    return land


def majority_downsample(ocean_mask: np.ndarray, ratio: int) -> np.ndarray:
    """Coarse ocean iff strictly more than half of the sub-cells are ocean"""
    H, W = ocean_mask.shape
    if H % ratio or W % ratio:
        raise ConfigError(f'mask shape {ocean_mask.shape} is not divisible by {ratio}')
    blocks = ocean_mask.reshape(H // ratio, ratio, W // ratio, ratio)
    return blocks.mean(axis=(1, 3)) > 0.5


def make_land_mask(spec: GridSpec, world_config) -> np.ndarray:
    """Ocean mask (True = ocean) from the configured land shapes.

    Evaluated at the world's fine resolution; coarser grids take the
    majority downsample so masks nest across resolutions.
    """
    if not world_config.landmasses:
        raise ConfigError('world config needs at least one landmass')
    fine_spec = spec.with_res(world_config.fine_res)
    lat, lon = fine_spec.mesh()
    ocean = ~analytic_land(lat, lon, world_config.landmasses)
    if spec.res != fine_spec.res:
        ocean = majority_downsample(ocean, spec.ratio_to(fine_spec))
    fraction = float(ocean.mean())
    if fraction in (0.0, 1.0):
        raise ConfigError(f'land mask is all {"ocean" if fraction else "land"}')
    if not world_config.min_ocean_fraction < fraction < world_config.max_ocean_fraction:
        raise ConfigError(f'ocean fraction {fraction:.3f} outside '
                          f'({world_config.min_ocean_fraction}, {world_config.max_ocean_fraction})')
    return ocean


def _axis_stencil(frac: np.ndarray, n: int, periodic: bool):
    """Lower index, upper index and interpolation weight along one axis"""
    if n == 1:
        zeros = np.zeros(frac.shape, dtype=int)
        return zeros, zeros, np.zeros(frac.shape)
    low = np.floor(frac)
    t = frac - low
    low = low.astype(int)
    if periodic:
        return np.mod(low, n), np.mod(low + 1, n), t
    below = low < 0
    above = low >= n - 1
    t = np.where(below, 0.0, np.where(above, 1.0, t))
    low = np.clip(low, 0, n - 2)
    return low, low + 1, t


def bilinear_sample(field: GridField, lats, lons,
                    variables: Optional[Sequence[str]] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Ocean-aware bilinear interpolation at arbitrary points.

    Returns (values (n, v), valid (n,)). When a corner of the surrounding
    cell-center square is land, inverse-distance weighting over the ocean
    corners is used instead; an all-land neighbourhood gives NaN, valid False.
    """
    spec = field.spec
    lats = np.atleast_1d(np.asarray(lats, dtype=np.float64))
    lons = np.atleast_1d(np.asarray(lons, dtype=np.float64))
    if np.any(lats < spec.lat_min - _TOL) or np.any(lats > spec.lat_max + _TOL):
        raise DomainError(f'query latitude outside [{spec.lat_min}, {spec.lat_max}]')
    lons = spec.wrap_lon(lons)
    if not spec.periodic_lon and (np.any(lons < spec.lon_min - _TOL) or np.any(lons > spec.lon_max + _TOL)):
        raise DomainError(f'query longitude outside [{spec.lon_min}, {spec.lon_max}]')

    idx = list(range(len(field.variables))) if variables is None else [field.var_index(v) for v in variables]
    values = field.values[..., idx]

    i0, i1, ti = _axis_stencil((lats - spec.lat_min) / spec.res - 0.5, spec.H, False)
    j0, j1, tj = _axis_stencil((lons - spec.lon_min) / spec.res - 0.5, spec.W, spec.periodic_lon)

    rows = np.stack([i0, i0, i1, i1], axis=1)
    cols = np.stack([j0, j1, j0, j1], axis=1)
    bil = np.stack([(1 - ti) * (1 - tj), (1 - ti) * tj, ti * (1 - tj), ti * tj], axis=1)
    dist = np.sqrt(np.stack([ti ** 2 + tj ** 2, ti ** 2 + (1 - tj) ** 2,
                             (1 - ti) ** 2 + tj ** 2, (1 - ti) ** 2 + (1 - tj) ** 2], axis=1))

    ocean = field.ocean_mask[rows, cols]
    corner_vals = np.where(ocean[..., None], values[rows, cols], 0.0)

    all_ocean = ocean.all(axis=1)
    any_ocean = ocean.any(axis=1)
    with np.errstate(divide='ignore'):
        idw = np.where(ocean, 1.0 / np.maximum(dist, 1e-300) ** 2, 0.0)
    exact = ocean & (dist < 1e-12)
    idw = np.where(exact.any(axis=1, keepdims=True), exact.astype(float), idw)
    weights = np.where(all_ocean[:, None], bil, idw)
    norm = weights.sum(axis=1, keepdims=True)
    norm = np.where(any_ocean[:, None], norm, 1.0)
    out = np.einsum('nk,nkv->nv', weights / norm, corner_vals)
    out[~any_ocean] = np.nan
    return out, any_ocean


def interpolate_field(field: GridField, target: GridSpec, target_mask: np.ndarray) -> GridField:
    """Bilinear upsampling onto every target ocean center.

    Points whose neighbourhood is all land take the nearest ocean cell of the
    source grid, so the result is defined on every target ocean cell.
    """
    lat, lon = target.mesh()
    qlat, qlon = lat[target_mask], lon[target_mask]
    vals, valid = bilinear_sample(field, qlat, qlon)
    if not valid.all():
        src_lat, src_lon = field.spec.mesh()
        src_ocean = field.ocean_mask
        tree = cKDTree(_unit_vectors(src_lat[src_ocean], src_lon[src_ocean]))
        _, nearest = tree.query(_unit_vectors(qlat[~valid], qlon[~valid]))
        vals[~valid] = field.values[src_ocean][nearest]
        logger.debug(f'{int((~valid).sum())} target cells filled from nearest ocean source cell')
    out = np.full(target.shape + (len(field.variables),), LAND)
    out[target_mask] = vals
    return GridField(target, field.variables, out, target_mask.copy(), field.day)


def _unit_vectors(lats: np.ndarray, lons: np.ndarray) -> np.ndarray:
    phi, lam = np.deg2rad(lats), np.deg2rad(lons)
    return np.stack([np.cos(phi) * np.cos(lam), np.cos(phi) * np.sin(lam), np.sin(phi)], axis=-1)


def area_average(fine: GridField, coarse: GridSpec, coarse_mask: np.ndarray) -> GridField:
    """Mean over the ocean sub-cells of each coarse ocean cell"""
    r = coarse.ratio_to(fine.spec)
    H, W, v = coarse.H, coarse.W, len(fine.variables)
    if fine.spec.shape != (H * r, W * r):
        raise SchemaError(f'fine grid {fine.spec.shape} does not nest in coarse grid {coarse.shape} x {r}')
    ocean = fine.ocean_mask.reshape(H, r, W, r)
    vals = np.where(fine.ocean_mask[..., None], fine.values, 0.0).reshape(H, r, W, r, v)
    counts = ocean.sum(axis=(1, 3))
    sums = vals.sum(axis=(1, 3))
    if np.any(coarse_mask & (counts == 0)):
        raise SchemaError('coarse ocean cell without any fine ocean sub-cell')
    out = np.full((H, W, v), LAND)
    out[coarse_mask] = sums[coarse_mask] / counts[coarse_mask][:, None]
    return GridField(coarse, fine.variables, out, coarse_mask.copy(), fine.day)


def with_speed(field: GridField) -> GridField:
    """Append SPEED = sqrt(U^2 + V^2)"""
    if 'SPEED' in field.variables:
        return field
    speed = np.hypot(field.var('U'), field.var('V'))[..., None]
    return field.with_values(np.concatenate([field.values, speed], axis=-1),
                             field.variables + ('SPEED',))
