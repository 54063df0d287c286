import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from sklearn.preprocessing import StandardScaler

from ..config import ForecastConfig, ObsConfig
from ..errors import ArtifactIOError, ConfigError, SchemaError
from .geo import VARIABLES, GridField, GridSpec, interpolate_field
from .observations import ObservationSet, SourceSchema, simulate_source, thin_observations
from .partition import PatchSpec, extract_patch, patch_cells
from .storage import Manifest, read_grid, read_observations
from .world import SyntheticWorld, make_background

logger = logging.getLogger(__name__)


@dataclass
class NormStats:
    """z-score statistics from the training period"""
    var_mean: np.ndarray
    var_std: np.ndarray
    inc_mean: np.ndarray
    inc_std: np.ndarray
    obs_mean: Dict[str, np.ndarray]
    obs_std: Dict[str, np.ndarray]
    train_days: Tuple[int, int] = (0, 0)

    def normalize_background(self, values: np.ndarray) -> np.ndarray:
        return (values - self.var_mean) / self.var_std

    def denormalize_background(self, values: np.ndarray) -> np.ndarray:
        return values * self.var_std + self.var_mean

    # increments are scaled but not centered: a zero model output is a zero increment
    def normalize_increment(self, values: np.ndarray) -> np.ndarray:
        return values / self.inc_std

    def denormalize_increment(self, values: np.ndarray) -> np.ndarray:
        return values * self.inc_std

    def normalize_obs(self, source_id: str, values: np.ndarray) -> np.ndarray:
        if source_id not in self.obs_mean:
            raise SchemaError(f'no normalization statistics for source {source_id}')
        return (values - self.obs_mean[source_id]) / self.obs_std[source_id]

    def denormalize_obs(self, source_id: str, values: np.ndarray) -> np.ndarray:
        return values * self.obs_std[source_id] + self.obs_mean[source_id]

    @classmethod
    def identity(cls, schemas: Sequence[SourceSchema], n_vars: int = len(VARIABLES)) -> 'NormStats':
        zeros, ones = np.zeros(n_vars), np.ones(n_vars)
        return cls(zeros, ones, zeros.copy(), ones.copy(),
                   {s.source_id: np.zeros(s.n_channels) for s in schemas},
                   {s.source_id: np.ones(s.n_channels) for s in schemas})

    def to_dict(self) -> Dict[str, Any]:
        return {
            'var_mean': self.var_mean.tolist(), 'var_std': self.var_std.tolist(),
            'inc_mean': self.inc_mean.tolist(), 'inc_std': self.inc_std.tolist(),
            'obs_mean': {k: v.tolist() for k, v in self.obs_mean.items()},
            'obs_std': {k: v.tolist() for k, v in self.obs_std.items()},
            'train_days': list(self.train_days),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> 'NormStats':
        def arr(v):
            return np.asarray(v, dtype=np.float64)

        return cls(arr(data['var_mean']), arr(data['var_std']), arr(data['inc_mean']), arr(data['inc_std']),
                   {k: arr(v) for k, v in data['obs_mean'].items()},
                   {k: arr(v) for k, v in data['obs_std'].items()},
                   tuple(data.get('train_days', (0, 0))))


class DayCache:
    """In-process LRU cache for per-day artifacts"""

    def __init__(self, max_items: int = 64, on_access: Optional[Callable[[bool], None]] = None):
        self.max_items = max_items
        self.on_access = on_access
        self._items: 'OrderedDict[Tuple, Any]' = OrderedDict()

    def get(self, key: Tuple) -> Optional[Any]:
        """Retrieve data from cache"""
        hit = key in self._items
        if self.on_access:
            self.on_access(hit)
        if not hit:
            return None
        self._items.move_to_end(key)
        return self._items[key]

    def set(self, key: Tuple, value: Any) -> None:
        """Store data in cache"""
        self._items[key] = value
        self._items.move_to_end(key)
        while len(self._items) > self.max_items:
            self._items.popitem(last=False)

    def invalidate(self, key: Tuple) -> None:
        """Remove data from cache"""
        self._items.pop(key, None)

    def get_or_load(self, key: Tuple, loader: Callable[[], Any]) -> Any:
        value = self.get(key)
        if value is None:
            value = loader()
            self.set(key, value)
        return value


class DayStore:
    """Per-day access to truth, background and observations"""

    def __init__(self, fine: GridSpec, fine_mask: np.ndarray, schemas: Mapping[str, SourceSchema],
                 cache: Optional[DayCache] = None,
                 thin_res: Optional[Union[float, Mapping[str, float]]] = None):
        self.fine = fine
        self.fine_mask = fine_mask
        self.schemas = dict(schemas)
        self.cache = cache or DayCache()
        self.thin_res = thin_res

    def thin_res_for(self, source_id: str) -> Optional[float]:
        if isinstance(self.thin_res, Mapping):
            return self.thin_res.get(source_id)
        return self.thin_res

    def _load_truth(self, day: int) -> GridField:
        raise NotImplementedError

    def _load_background(self, day: int) -> GridField:
        raise NotImplementedError

    def _load_observations(self, day: int, source_id: str) -> ObservationSet:
        raise NotImplementedError

    def truth(self, day: int) -> GridField:
        return self.cache.get_or_load(('truth', day), lambda: self._load_truth(day))

    def background(self, day: int) -> GridField:
        return self.cache.get_or_load(('background', day), lambda: self._load_background(day))

    def background_interp(self, day: int) -> GridField:
        return self.cache.get_or_load(
            ('background_interp', day),
            lambda: interpolate_field(self.background(day), self.fine, self.fine_mask))

    def increment(self, day: int) -> np.ndarray:
        """truth - interpolated background on the fine grid (land NaN)"""
        return self.cache.get_or_load(
            ('increment', day),
            lambda: self.truth(day).select(VARIABLES).values - self.background_interp(day).values)

    def observations(self, day: int) -> Dict[str, ObservationSet]:
        def load():
            out = {}
            for sid in self.schemas:
                obs = self._load_observations(day, sid)
                res = self.thin_res_for(sid)
                if res is not None:
                    obs = thin_observations(obs, res)
                out[sid] = obs
            return out
        thin_key = tuple(sorted(self.thin_res.items())) if isinstance(self.thin_res, Mapping) else self.thin_res
        return self.cache.get_or_load(('obs', day, thin_key), load)


class FileDayStore(DayStore):
    """Reads world and observation files through their manifests"""

    def __init__(self, world_manifest: Manifest, obs_manifest: Optional[Manifest], fine: GridSpec,
                 fine_mask: np.ndarray, schemas: Mapping[str, SourceSchema], **kwargs):
        super().__init__(fine, fine_mask, schemas, **kwargs)
        self.world_manifest = world_manifest
        self.obs_manifest = obs_manifest

    def _verified(self, manifest: Manifest, key: str, day: int):
        try:
            return manifest.verify(key)
        except ArtifactIOError as e:
            raise ArtifactIOError(f'day {day}: {e}') from e

    def _load_truth(self, day: int) -> GridField:
        return read_grid(self._verified(self.world_manifest, truth_key(day), day))

    def _load_background(self, day: int) -> GridField:
        return read_grid(self._verified(self.world_manifest, background_key(day), day))

    def _load_observations(self, day: int, source_id: str) -> ObservationSet:
        if self.obs_manifest is None:
            raise ArtifactIOError(f'day {day}: no observation manifest')
        path = self._verified(self.obs_manifest, obs_key(source_id, day), day)
        return read_observations(path, self.schemas)


class SimulatedDayStore(DayStore):
    """Generates every artifact on demand from the synthetic world"""

    def __init__(self, world: SyntheticWorld, forecast: ForecastConfig, obs_config: ObsConfig,
                 schemas: Mapping[str, SourceSchema], seed: int, sla_ref: Optional[GridField] = None, **kwargs):
        super().__init__(world.fine, world.fine_mask, schemas, **kwargs)
        self.world = world
        self.forecast = forecast
        self.obs_config = obs_config
        self.seed = seed
        self.sla_ref = sla_ref

    def _load_truth(self, day: int) -> GridField:
        return self.world.truth_state(day)

    def _load_background(self, day: int) -> GridField:
        return make_background(day, self.forecast.lead, self.world, self.forecast, self.seed)

    def _load_observations(self, day: int, source_id: str) -> ObservationSet:
        return simulate_source(self.truth(day), self.schemas[source_id], day, self.seed, self.obs_config,
                               self.sla_ref, self.world.config.season_period)


def truth_key(day: int) -> str:
    return f'truth/{day:05d}'


def background_key(day: int) -> str:
    return f'background/{day:05d}'


def obs_key(source_id: str, day: int) -> str:
    return f'{source_id}/{day:05d}'


@dataclass
class TrainSample:
    day: int
    patch: PatchSpec
    background: GridField
    observations: Dict[str, ObservationSet]
    query_lats: np.ndarray
    query_lons: np.ndarray
    target: np.ndarray
    ocean_mask: np.ndarray
    meta: Dict[str, Any] = field(default_factory=dict)


class PatchDataset:
    """One sample per (day, patch), enumerated day-major, loaded lazily"""

    def __init__(self, days: Sequence[int], patches: Sequence[PatchSpec], store: DayStore, norm: NormStats):
        self.days = list(days)
        self.patches = list(patches)
        self.store = store
        self.norm = norm

    def __len__(self) -> int:
        return len(self.days) * len(self.patches)

    def index(self, i: int) -> Tuple[int, PatchSpec]:
        if not 0 <= i < len(self):
            raise IndexError(i)
        return self.days[i // len(self.patches)], self.patches[i % len(self.patches)]

    def sample(self, i: int) -> TrainSample:
        day, patch = self.index(i)
        store = self.store
        rows, cols = patch_cells(patch, store.fine)
        sel = np.ix_(rows, cols)
        ocean = store.fine_mask[sel]
        lat, lon = store.fine.mesh()
        increment = store.increment(day)[sel][ocean]
        obs = {sid: o.clip(patch) for sid, o in store.observations(day).items()}
        return TrainSample(
            day=day, patch=patch,
            background=extract_patch(store.background(day), patch),
            observations=obs,
            query_lats=lat[sel][ocean], query_lons=lon[sel][ocean],
            target=self.norm.normalize_increment(increment),
            ocean_mask=ocean,
        )

    def __iter__(self) -> Iterator[TrainSample]:
        for i in range(len(self)):
            yield self.sample(i)


def build_dataset(days: Sequence[int], store: DayStore, patches: Sequence[PatchSpec], norm: NormStats) -> PatchDataset:
    return PatchDataset(days, patches, store, norm)


def _checked_stats(mean: np.ndarray, var: np.ndarray, names: Sequence[str],
                   what: str) -> Tuple[np.ndarray, np.ndarray]:
    zero = [n for n, v in zip(names, var) if v <= 0]
    if zero:
        raise ConfigError(f'{what}: zero variance over the training period for channel(s) {zero}')
    return np.asarray(mean, dtype=np.float64), np.sqrt(np.asarray(var, dtype=np.float64))


def fit_norm_stats(days: Sequence[int], store: DayStore) -> NormStats:
    """Per-variable and per-channel mean/std from whole-domain training-day aggregates"""
    days = list(days)
    if not days:
        raise ConfigError('normalization needs a nonempty training period')
    bg_scaler, inc_scaler = StandardScaler(), StandardScaler()
    obs_scalers = {sid: StandardScaler() for sid in store.schemas}
    for day in days:
        bg = store.background(day)
        bg_scaler.partial_fit(bg.select(VARIABLES).values[bg.ocean_mask])
        inc_scaler.partial_fit(store.increment(day)[store.fine_mask])
        for sid, obs in store.observations(day).items():
            if obs.n:
                obs_scalers[sid].partial_fit(obs.values)

    var_mean, var_std = _checked_stats(bg_scaler.mean_, bg_scaler.var_, VARIABLES, 'background')
    inc_mean, inc_std = _checked_stats(inc_scaler.mean_, inc_scaler.var_, VARIABLES, 'increment')
    obs_mean, obs_std = {}, {}
    for sid, schema in store.schemas.items():
        scaler = obs_scalers[sid]
        if not hasattr(scaler, 'mean_'):
            logger.warning(f'{sid}: no observations in the training period, using mean 0 / std 1')
            obs_mean[sid], obs_std[sid] = np.zeros(schema.n_channels), np.ones(schema.n_channels)
            continue
        linear = [c for c in schema.channels if c not in schema.angular]
        idx = [schema.channels.index(c) for c in linear]
        mean, std = np.zeros(schema.n_channels), np.ones(schema.n_channels)
        if idx:
            mean[idx], std[idx] = _checked_stats(scaler.mean_[idx], scaler.var_[idx],
                                                 [f'{sid}.{c}' for c in linear], 'observations')
        obs_mean[sid], obs_std[sid] = mean, std
    logger.info(f'normalization fitted on {len(days)} training days')
    return NormStats(var_mean, var_std, inc_mean, inc_std, obs_mean, obs_std, (min(days), max(days) + 1))


def usable_days(day_range: Tuple[int, int], lead: int) -> List[int]:
    """Days of a split whose lead-day background exists"""
    lo, hi = day_range
    return [d for d in range(max(lo, lead), hi)]
