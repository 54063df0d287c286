import numpy as np
import pytest

from oceanfuse.config import ForecastConfig
from oceanfuse.errors import ArtifactIOError, ConfigError, SchemaError
from oceanfuse.services.data_pipeline import (
    DayCache,
    FileDayStore,
    NormStats,
    SimulatedDayStore,
    background_key,
    build_dataset,
    fit_norm_stats,
    obs_key,
    truth_key,
    usable_days,
)
from oceanfuse.services.geo import VARIABLES
from oceanfuse.services.partition import partition_domain
from oceanfuse.services.storage import Manifest, write_grid, write_observations


def test_day_cache_evicts_least_recent():
    seen = []
    cache = DayCache(max_items=2, on_access=seen.append)
    cache.set(('a',), 1)
    cache.set(('b',), 2)
    assert cache.get(('a',)) == 1
    cache.set(('c',), 3)
    assert cache.get(('b',)) is None
    assert cache.get(('a',)) == 1
    assert seen == [True, False, True]
    cache.invalidate(('a',))
    assert cache.get_or_load(('a',), lambda: 9) == 9


def test_norm_stats_dict_roundtrip(schemas):
    norm = NormStats.identity(list(schemas.values()))
    norm.inc_std = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
    back = NormStats.from_dict(norm.to_dict())
    np.testing.assert_array_equal(back.inc_std, norm.inc_std)
    assert set(back.obs_std) == set(schemas)
    np.testing.assert_allclose(back.denormalize_increment(back.normalize_increment(np.ones(5))), 1.0)
    # a zero network output is a zero increment
    assert np.all(back.denormalize_increment(np.zeros(5)) == 0)
    with pytest.raises(SchemaError):
        back.normalize_obs('RADAR', np.zeros(1))


def test_increment_is_truth_minus_interpolated_background(store, world):
    inc = store.increment(5)
    truth = store.truth(5).values
    interp = store.background_interp(5).values
    np.testing.assert_allclose(inc[world.fine_mask], (truth - interp)[world.fine_mask])
    assert np.isnan(inc[~world.fine_mask]).all()
    assert store.background(5).spec == world.coarse


def test_store_thinning_per_source(world, obs_config, schemas, sla_ref):
    store = SimulatedDayStore(world, ForecastConfig(lead=2), obs_config, schemas, seed=7, sla_ref=sla_ref,
                              thin_res={'SST': 8.0})
    assert store.thin_res_for('SST') == 8.0
    assert store.thin_res_for('SSS') is None
    obs = store.observations(4)
    full = SimulatedDayStore(world, ForecastConfig(lead=2), obs_config, schemas, seed=7,
                             sla_ref=sla_ref).observations(4)
    assert obs['SST'].n < full['SST'].n
    assert obs['SST'].schema.native_res == 8.0
    assert obs['SSS'].n == full['SSS'].n


def test_fit_norm_stats(store, schemas):
    norm = fit_norm_stats(range(2, 6), store)
    assert norm.train_days == (2, 6)
    assert norm.var_mean.shape == (len(VARIABLES),)
    assert np.all(norm.var_std > 0) and np.all(norm.inc_std > 0)
    # wind direction is left unscaled
    assert norm.obs_mean['SSW'][1] == 0.0 and norm.obs_std['SSW'][1] == 1.0
    assert norm.obs_std['SSW'][0] > 0
    t_idx = VARIABLES.index('T')
    assert 0.0 < norm.var_mean[t_idx] < 30.0
    with pytest.raises(ConfigError):
        fit_norm_stats([], store)


def test_dataset_is_day_major(store, world, schemas):
    patches = partition_domain(world.fine, (10, 20), (5, 5))
    norm = NormStats.identity(list(schemas.values()))
    norm.inc_std = np.full(5, 2.0)
    data = build_dataset([3, 4], store, patches, norm)
    assert len(data) == 2 * len(patches)
    assert data.index(0) == (3, patches[0])
    assert data.index(len(patches)) == (4, patches[0])
    with pytest.raises(IndexError):
        data.index(len(data))

    sample = data.sample(len(patches) + 86)
    assert sample.day == 4 and sample.patch is patches[86]
    assert sample.target.shape == (int(sample.ocean_mask.sum()), 5)
    assert len(sample.query_lats) == sample.target.shape[0]
    # targets are increments divided by their std
    i, j = world.fine.cell_index(sample.query_lats, sample.query_lons)
    np.testing.assert_allclose(sample.target * 2.0, store.increment(4)[i, j])
    for sid, obs in sample.observations.items():
        assert np.all((obs.lats >= patches[86].lat0) & (obs.lats < patches[86].lat1))


def test_usable_days_respect_lead():
    assert usable_days((0, 6), 3) == [3, 4, 5]
    assert usable_days((10, 12), 3) == [10, 11]


@pytest.fixture
def file_store(tmp_path, store, world, schemas):
    world_manifest = Manifest.open(tmp_path / 'world' / 'manifest.json', 'world', 'h')
    obs_manifest = Manifest.open(tmp_path / 'obs' / 'manifest.json', 'obs', 'h')
    for day in (3, 4):
        path = tmp_path / 'world' / 'truth' / f'{day:05d}.ofg'
        world_manifest.add(truth_key(day), path, write_grid(path, store.truth(day)))
        path = tmp_path / 'world' / 'background' / f'{day:05d}.ofg'
        world_manifest.add(background_key(day), path, write_grid(path, store.background(day)))
        for sid, obs in store.observations(day).items():
            path = tmp_path / 'obs' / sid / f'{day:05d}.ofo'
            obs_manifest.add(obs_key(sid, day), path, write_observations(path, obs))
    world_manifest.save()
    obs_manifest.save()
    return FileDayStore(world_manifest, obs_manifest, world.fine, world.fine_mask, schemas)


def test_file_store_matches_simulation(file_store, store, world):
    np.testing.assert_allclose(file_store.truth(3).values[world.fine_mask],
                               store.truth(3).values[world.fine_mask], rtol=1e-6)
    a, b = file_store.observations(4), store.observations(4)
    assert set(a) == set(b)
    for sid in a:
        np.testing.assert_allclose(a[sid].values, b[sid].values, rtol=1e-5, atol=1e-6)


def test_file_store_missing_day(file_store):
    with pytest.raises(ArtifactIOError, match='day 9'):
        file_store.truth(9)
