"""Observation sources: schemas, simulated coverage, perturbation and thinning."""
import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from ..config import ObsConfig
from ..errors import DomainError, SchemaError
from .geo import GridField, GridSpec, bilinear_sample
from .partition import PatchSpec, assign_points

logger = logging.getLogger(__name__)

COVERAGES = ('wide-swath', 'along-track', 'polar-grid', 'random-points')


@dataclass(frozen=True)
class SourceSchema:
    source_id: str
    channels: Tuple[str, ...]
    coverage: str
    native_res: float
    noise: Tuple[float, ...]
    angular: Tuple[str, ...] = ()
    count: int = 0
    nonnegative: Tuple[str, ...] = ()

    def __post_init__(self):
        if not self.channels:
            raise SchemaError(f'{self.source_id}: a source needs at least one channel')
        if len(self.noise) != len(self.channels):
            raise SchemaError(f'{self.source_id}: one noise std per channel expected')
        if self.coverage not in COVERAGES:
            raise SchemaError(f"{self.source_id}: unknown coverage '{self.coverage}'")
        if self.native_res <= 0 or (self.coverage == 'random-points' and self.count <= 0):
            raise SchemaError(f'{self.source_id}: sampling density must be positive')
        if not set(self.angular) <= set(self.channels):
            raise SchemaError(f'{self.source_id}: angular channels must be schema channels')
        if not set(self.nonnegative) <= set(self.channels) - set(self.angular):
            raise SchemaError(f'{self.source_id}: non-negative channels must be non-angular schema channels')

    @property
    def n_channels(self) -> int:
        return len(self.channels)

    @property
    def encoded_width(self) -> int:
        """Channel width seen by the encoder: angles expand to sin/cos"""
        return self.n_channels + len(self.angular)

    def angular_mask(self) -> np.ndarray:
        return np.array([c in self.angular for c in self.channels])

    def nonnegative_mask(self) -> np.ndarray:
        return np.array([c in self.nonnegative for c in self.channels])

    def constrain(self, values: np.ndarray, touched: Optional[np.ndarray] = None) -> np.ndarray:
        """Re-wrap angular channels and clip non-negative ones after noise was added"""
        touched = np.ones(self.n_channels, dtype=bool) if touched is None else touched
        ang = self.angular_mask() & touched
        if ang.any():
            values[:, ang] = wrap_angle(values[:, ang])
        pos = self.nonnegative_mask() & touched
        if pos.any():
            values[:, pos] = np.maximum(values[:, pos], 0.0)
        return values

    def encode_values(self, values: np.ndarray) -> np.ndarray:
        if not self.angular:
            return values
        cols = []
        for k, name in enumerate(self.channels):
            if name in self.angular:
                cols.extend([np.sin(values[:, k]), np.cos(values[:, k])])
            else:
                cols.append(values[:, k])
        return np.stack(cols, axis=1) if cols else values

    def thinned(self, target_res: float) -> 'SourceSchema':
        return SourceSchema(self.source_id, self.channels, self.coverage,
                            max(self.native_res, target_res), self.noise, self.angular, self.count,
                            self.nonnegative)


def default_schemas(config: ObsConfig) -> Dict[str, SourceSchema]:
    """The six standard sources, in configured order"""
    table = {
        'SST': SourceSchema('SST', ('T',), 'wide-swath', config.sst_res, (config.sst_noise,)),
        'SSS': SourceSchema('SSS', ('S',), 'wide-swath', config.sss_res, (config.sss_noise,)),
        'SSW': SourceSchema('SSW', ('speed', 'direction'), 'wide-swath', config.ssw_res,
                            (config.ssw_speed_noise, config.ssw_dir_noise), angular=('direction',),
                            nonnegative=('speed',)),
        'SIC': SourceSchema('SIC', ('SIC',), 'polar-grid', config.sic_res, (config.sic_noise,)),
        'SLA': SourceSchema('SLA', ('SLA',), 'along-track', config.sla_spacing, (config.sla_noise,)),
        'INSITU': SourceSchema('INSITU', ('T', 'S'), 'random-points', 1.0,
                               (config.insitu_t_noise, config.insitu_s_noise), count=config.insitu_count),
    }
    unknown = [s for s in config.sources if s not in table]
    if unknown:
        raise SchemaError(f'unknown observation sources: {unknown}')
    schemas = {s: table[s] for s in config.sources}
    gridded = [s for s in schemas.values() if s.coverage != 'random-points']
    if 'SST' in schemas and any(s.native_res < schemas['SST'].native_res for s in gridded):
        raise SchemaError('SST must be the densest source')
    return schemas


@dataclass
class ObservationSet:
    schema: SourceSchema
    coords: np.ndarray
    values: np.ndarray
    day: int
    meta: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 2)
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1, self.schema.n_channels)
        if len(self.coords) != len(self.values):
            raise SchemaError(f'{self.schema.source_id}: {len(self.coords)} coords for '
                              f'{len(self.values)} value rows')
        if not np.isfinite(self.values).all():
            raise SchemaError(f'{self.schema.source_id}: non-finite observation values')

    @property
    def n(self) -> int:
        return len(self.coords)

    @property
    def lats(self) -> np.ndarray:
        return self.coords[:, 0]

    @property
    def lons(self) -> np.ndarray:
        return self.coords[:, 1]

    @classmethod
    def empty(cls, schema: SourceSchema, day: int) -> 'ObservationSet':
        return cls(schema, np.zeros((0, 2)), np.zeros((0, schema.n_channels)), day)

    def subset(self, idx: np.ndarray) -> 'ObservationSet':
        return ObservationSet(self.schema, self.coords[idx], self.values[idx], self.day, dict(self.meta))

    def clip(self, patch: PatchSpec) -> 'ObservationSet':
        return self.subset(assign_points(self.lats, self.lons, patch))

    def with_values(self, values: np.ndarray) -> 'ObservationSet':
        return ObservationSet(self.schema, self.coords.copy(), values, self.day, dict(self.meta))

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame(self.values, columns=list(self.schema.channels))
        df.insert(0, 'lon', self.lons)
        df.insert(0, 'lat', self.lats)
        df.insert(0, 'day', self.day)
        return df

    def to_csv(self, path: Path) -> None:
        self.to_frame().to_csv(path, index=False, float_format='%.6f')


def _source_rng(seed: int, day: int, source_id: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, day, zlib.crc32(source_id.encode())]))


def _lattice(spec: GridSpec, res: float) -> Tuple[np.ndarray, np.ndarray]:
    lattice = GridSpec(spec.lat_min, spec.lat_max, spec.lon_min, spec.lon_max, res, spec.periodic_lon)
    lat, lon = lattice.mesh()
    return lat.ravel(), lon.ravel()


def _swath_points(spec: GridSpec, schema: SourceSchema, day: int, config: ObsConfig):
    lat, lon = _lattice(spec, schema.native_res)
    phase = zlib.crc32(schema.source_id.encode()) % 360
    offset = lon - config.swath_slope * (lat - spec.lat_min) - config.swath_shift_deg * day - phase
    keep = np.mod(offset, config.swath_spacing_deg) < config.swath_width_deg
    return lat[keep], lon[keep]


def _track_points(spec: GridSpec, schema: SourceSchema, day: int, config: ObsConfig):
    n_lat = int(round((spec.lat_max - spec.lat_min) / schema.native_res))
    lat = spec.lat_min + (np.arange(n_lat) + 0.5) * schema.native_res
    extent = spec.lon_max - spec.lon_min
    lats, lons = [], []
    for k in range(config.n_tracks):
        base = k * extent / config.n_tracks + config.track_shift_deg * day
        wiggle = config.track_amp_deg * np.sin(2.0 * np.pi * (lat - spec.lat_min) / config.track_wavelength_deg)
        lon = spec.lon_min + np.mod(base + wiggle, extent)
        lats.append(lat)
        lons.append(lon)
    return np.concatenate(lats), np.concatenate(lons)


def _polar_points(spec: GridSpec, schema: SourceSchema, config: ObsConfig):
    lat, lon = _lattice(spec, schema.native_res)
    keep = np.abs(lat) >= config.polar_lat
    return lat[keep], lon[keep]


def _random_points(spec: GridSpec, schema: SourceSchema, mask: np.ndarray, rng: np.random.Generator):
    lats, lons = np.zeros(0), np.zeros(0)
    for _ in range(20):
        m = 2 * schema.count
        lat = rng.uniform(spec.lat_min, spec.lat_max, m)
        lon = rng.uniform(spec.lon_min, spec.lon_max, m)
        i, j = spec.cell_index(lat, lon)
        ok = mask[i, j]
        lats = np.concatenate([lats, lat[ok]])
        lons = np.concatenate([lons, lon[ok]])
        if len(lats) >= schema.count:
            break
    return lats[:schema.count], lons[:schema.count]


def coverage_points(truth: GridField, schema: SourceSchema, day: int, config: ObsConfig,
                    rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Ocean sample locations of one source on one day"""
    spec = truth.spec
    if schema.coverage == 'wide-swath':
        lat, lon = _swath_points(spec, schema, day, config)
    elif schema.coverage == 'along-track':
        lat, lon = _track_points(spec, schema, day, config)
    elif schema.coverage == 'polar-grid':
        lat, lon = _polar_points(spec, schema, config)
    else:
        return _random_points(spec, schema, truth.ocean_mask, rng)
    i, j = spec.cell_index(lat, lon)
    ocean = truth.ocean_mask[i, j]
    return lat[ocean], lon[ocean]


def sea_ice_concentration(lats: np.ndarray, day: int, config: ObsConfig, season_period: float = 360.0) -> np.ndarray:
    edge = config.sic_edge_lat - config.sic_season_amp * np.cos(2.0 * np.pi * day / season_period)
    return 1.0 / (1.0 + np.exp(-(np.abs(lats) - edge) / config.sic_width))


def _sample(truth: GridField, lats, lons, variables: Sequence[str]) -> np.ndarray:
    try:
        vals, _ = bilinear_sample(truth, lats, lons, variables)
    except SchemaError as e:
        raise SchemaError(f'truth field cannot feed channels {list(variables)}: {e}') from e
    return vals


def observe(truth: GridField, schema: SourceSchema, lats: np.ndarray, lons: np.ndarray, day: int,
            config: ObsConfig, sla_ref: Optional[GridField] = None, season_period: float = 360.0) -> np.ndarray:
    """Noise-free channel values of `schema` at the given points"""
    sid = schema.source_id
    if len(lats) == 0:
        return np.zeros((0, schema.n_channels))
    if sid == 'SSW':
        uv = _sample(truth, lats, lons, ('U', 'V'))
        speed = config.wind_gain * np.hypot(uv[:, 0], uv[:, 1])
        return np.stack([speed, np.arctan2(uv[:, 1], uv[:, 0])], axis=1)
    if sid == 'SLA':
        if sla_ref is None:
            raise SchemaError('SLA needs the training-period SSH reference field')
        ssh = _sample(truth, lats, lons, ('SSH',))
        ref = _sample(sla_ref, lats, lons, ('SSH',))
        return ssh - ref
    if sid == 'SIC':
        return sea_ice_concentration(lats, day, config, season_period)[:, None]
    return _sample(truth, lats, lons, schema.channels)


def wrap_angle(x: np.ndarray) -> np.ndarray:
    return np.mod(x + np.pi, 2.0 * np.pi) - np.pi


def simulate_source(truth_fine: GridField, schema: SourceSchema, day: int, seed: int,
                    config: Optional[ObsConfig] = None, sla_ref: Optional[GridField] = None,
                    season_period: float = 360.0) -> ObservationSet:
    """Sample one source from fine truth; deterministic per (seed, day, source)"""
    config = config or ObsConfig()
    rng = _source_rng(seed, day, schema.source_id)
    lats, lons = coverage_points(truth_fine, schema, day, config, rng)
    values = observe(truth_fine, schema, lats, lons, day, config, sla_ref, season_period)
    noise = np.asarray(schema.noise, dtype=np.float64)
    if np.any(noise > 0):
        values = schema.constrain(values + rng.standard_normal(values.shape) * noise)
    coords = np.stack([lats, truth_fine.spec.wrap_lon(lons)], axis=1) if len(lats) else np.zeros((0, 2))
    obs = ObservationSet(schema, coords, values, day)
    logger.debug(f'{schema.source_id} day {day}: {obs.n} points')
    return obs


def perturb_observations(obs: ObservationSet, sigma: Sequence[float], seed) -> ObservationSet:
    """values + N(0, sigma^2), i.i.d. per point and channel; angles re-wrapped, speeds clipped at 0"""
    sigma = np.asarray(sigma, dtype=np.float64).reshape(-1)
    if sigma.shape != (obs.schema.n_channels,):
        raise SchemaError(f'{obs.schema.source_id}: expected {obs.schema.n_channels} sigmas, got {sigma.shape[0]}')
    if np.any(sigma < 0) or not np.isfinite(sigma).all():
        raise DomainError(f'perturbation sigma must be finite and >= 0, got {sigma.tolist()}')
    rng = np.random.default_rng(seed)
    values = obs.values + rng.standard_normal(obs.values.shape) * sigma
    return obs.with_values(obs.schema.constrain(values, sigma > 0))


def thin_observations(obs: ObservationSet, target_res: float) -> ObservationSet:
    """One point per occupied target cell: member centroid and channel means.

    Angular channels use a circular mean; a cell with a single member keeps
    that point unchanged, so thinning twice equals thinning once.
    """
    if target_res <= 0:
        raise DomainError(f'target resolution must be positive, got {target_res}')
    schema = obs.schema.thinned(target_res)
    if obs.n == 0:
        return ObservationSet(schema, obs.coords, obs.values, obs.day, dict(obs.meta))
    if target_res < obs.schema.native_res:
        logger.warning(f'{obs.schema.source_id}: thinning to {target_res} below native spacing '
                       f'{obs.schema.native_res}')

    df = pd.DataFrame({
        'bi': np.floor(obs.lats / target_res).astype(np.int64),
        'bj': np.floor(obs.lons / target_res).astype(np.int64),
        'lat': obs.lats,
        'lon': obs.lons,
    })
    value_cols: List[str] = []
    for k, name in enumerate(obs.schema.channels):
        if name in obs.schema.angular:
            df[f'{name}__sin'] = np.sin(obs.values[:, k])
            df[f'{name}__cos'] = np.cos(obs.values[:, k])
            df[f'{name}__raw'] = obs.values[:, k]
            value_cols += [f'{name}__sin', f'{name}__cos', f'{name}__raw']
        else:
            df[name] = obs.values[:, k]
            value_cols.append(name)

    grouped = df.groupby(['bi', 'bj'], sort=True)
    means = grouped[['lat', 'lon'] + value_cols].mean()
    firsts = grouped[['lat', 'lon'] + value_cols].first()
    single = (grouped.size() == 1).to_numpy()

    coords = np.where(single[:, None], firsts[['lat', 'lon']].to_numpy(), means[['lat', 'lon']].to_numpy())
    cols = []
    for name in obs.schema.channels:
        if name in obs.schema.angular:
            mean = np.arctan2(means[f'{name}__sin'].to_numpy(), means[f'{name}__cos'].to_numpy())
            cols.append(np.where(single, firsts[f'{name}__raw'].to_numpy(), mean))
        else:
            cols.append(np.where(single, firsts[name].to_numpy(), means[name].to_numpy()))
    values = np.stack(cols, axis=1)
    logger.debug(f'{obs.schema.source_id} day {obs.day}: thinned {obs.n} -> {len(values)} points at {target_res} deg')
    return ObservationSet(schema, coords, values, obs.day, dict(obs.meta))
