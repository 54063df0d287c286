import numpy as np
import pytest

from oceanfuse.errors import DomainError, SchemaError
from oceanfuse.services.geo import bilinear_sample
from oceanfuse.services.observations import (
    ObservationSet,
    SourceSchema,
    default_schemas,
    perturb_observations,
    sea_ice_concentration,
    simulate_source,
    thin_observations,
    wrap_angle,
)
from oceanfuse.tests.conftest import tiny_obs_config


def test_default_schemas_order_and_widths(schemas):
    assert list(schemas) == ['SST', 'SSS', 'SSW', 'SIC', 'SLA', 'INSITU']
    assert schemas['SSW'].n_channels == 2
    assert schemas['SSW'].encoded_width == 3
    assert schemas['INSITU'].channels == ('T', 'S')
    assert schemas['INSITU'].count == 40


def test_sst_must_be_densest():
    with pytest.raises(SchemaError):
        default_schemas(tiny_obs_config(sss_res=1.0))
    with pytest.raises(SchemaError):
        default_schemas(tiny_obs_config(sources=['SST', 'RADAR']))


@pytest.mark.parametrize('kwargs', [
    dict(channels=()),
    dict(noise=(0.1, 0.2)),
    dict(coverage='satellite'),
    dict(native_res=0.0),
    dict(angular=('dir',)),
])
def test_schema_validation(kwargs):
    base = dict(source_id='X', channels=('T',), coverage='wide-swath', native_res=1.0, noise=(0.1,))
    base.update(kwargs)
    with pytest.raises(SchemaError):
        SourceSchema(**base)


def test_angular_channels_encode_as_sin_cos(schemas):
    values = np.array([[3.0, 0.0], [1.0, np.pi / 2]])
    enc = schemas['SSW'].encode_values(values)
    np.testing.assert_allclose(enc, [[3.0, 0.0, 1.0], [1.0, 1.0, 0.0]], atol=1e-12)


def test_simulation_is_deterministic_and_on_ocean(world, schemas, obs_config):
    truth = world.truth_state(3)
    a = simulate_source(truth, schemas['SST'], 3, seed=5, config=obs_config)
    b = simulate_source(truth, schemas['SST'], 3, seed=5, config=obs_config)
    np.testing.assert_array_equal(a.values, b.values)
    assert a.n > 0
    i, j = world.fine.cell_index(a.lats, a.lons)
    assert world.fine_mask[i, j].all()
    c = simulate_source(truth, schemas['SST'], 3, seed=6, config=obs_config)
    assert not np.array_equal(a.values, c.values)


def test_swaths_move_day_to_day(world, schemas, obs_config):
    a = simulate_source(world.truth_state(3), schemas['SST'], 3, 5, obs_config)
    b = simulate_source(world.truth_state(4), schemas['SST'], 4, 5, obs_config)
    assert {tuple(c) for c in a.coords} != {tuple(c) for c in b.coords}


def test_sst_noise_matches_schema(world, schemas, obs_config):
    truth = world.truth_state(2)
    obs = simulate_source(truth, schemas['SST'], 2, seed=1, config=obs_config)
    clean, _ = bilinear_sample(truth, obs.lats, obs.lons, ['T'])
    resid = obs.values[:, 0] - clean[:, 0]
    assert resid.std() == pytest.approx(obs_config.sst_noise, rel=0.25)


def test_wind_direction_stays_wrapped(world, schemas, obs_config):
    obs = simulate_source(world.truth_state(2), schemas['SSW'], 2, seed=1, config=obs_config)
    direction = obs.values[:, 1]
    assert np.all((direction >= -np.pi) & (direction < np.pi))
    assert np.all(obs.values[:, 0] >= 0)


def test_sla_needs_reference(world, schemas, obs_config, sla_ref):
    truth = world.truth_state(2)
    with pytest.raises(SchemaError):
        simulate_source(truth, schemas['SLA'], 2, seed=1, config=obs_config)
    obs = simulate_source(truth, schemas['SLA'], 2, seed=1, config=obs_config, sla_ref=sla_ref)
    assert obs.n > 0
    assert np.abs(obs.values).max() < 2.0


def test_insitu_points_count(world, schemas, obs_config):
    obs = simulate_source(world.truth_state(2), schemas['INSITU'], 2, seed=1, config=obs_config)
    assert obs.n == obs_config.insitu_count
    assert obs.values.shape == (obs_config.insitu_count, 2)


def test_sea_ice_rises_poleward(obs_config):
    sic = sea_ice_concentration(np.array([0.0, 60.0, 89.0]), 0, obs_config)
    assert np.all(np.diff(sic) > 0)
    assert np.all((sic >= 0) & (sic <= 1))


def test_wrap_angle_range():
    x = np.array([-np.pi, np.pi, 3 * np.pi + 0.1, -0.5])
    np.testing.assert_allclose(wrap_angle(x), [-np.pi, -np.pi, -np.pi + 0.1, -0.5], atol=1e-12)


def _obs(schema, coords, values, day=0):
    return ObservationSet(schema, np.asarray(coords, float), np.asarray(values, float), day)


def test_perturb_zero_sigma_is_identity(schemas):
    obs = _obs(schemas['SSW'], [[30, 10], [31, 11]], [[2.0, 3.0], [1.0, -1.0]])
    out = perturb_observations(obs, [0.0, 0.0], seed=3)
    np.testing.assert_array_equal(out.values, obs.values)


def test_perturb_statistics_and_validation(schemas, rng):
    n = 4000
    obs = _obs(schemas['SST'], np.column_stack([np.full(n, 30.0), np.linspace(0, 359, n)]), np.zeros((n, 1)))
    out = perturb_observations(obs, [0.5], seed=rng)
    assert out.values.std() == pytest.approx(0.5, rel=0.1)
    np.testing.assert_array_equal(out.coords, obs.coords)
    with pytest.raises(SchemaError):
        perturb_observations(obs, [0.5, 0.5], seed=0)
    with pytest.raises(DomainError):
        perturb_observations(obs, [-0.1], seed=0)


def test_perturbed_angles_are_rewrapped(schemas):
    obs = _obs(schemas['SSW'], [[30, 10]] * 200, [[1.0, 3.1]] * 200)
    out = perturb_observations(obs, [0.0, 0.5], seed=1)
    assert np.all((out.values[:, 1] >= -np.pi) & (out.values[:, 1] < np.pi))

def test_perturbed_speeds_stay_non_negative(schemas):
    obs = _obs(schemas['SSW'], [[30, 10]] * 500, [[0.1, 0.0]] * 500)
    out = perturb_observations(obs, [1.0, 0.0], seed=4)
    assert np.all(out.values[:, 0] >= 0)
    # roughly half the draws fall below zero and are clipped
    assert 0.3 < np.mean(out.values[:, 0] == 0) < 0.7
    np.testing.assert_array_equal(out.values[:, 1], 0.0)


def test_non_negative_channels_must_be_linear():
    with pytest.raises(SchemaError):
        SourceSchema('X', ('speed', 'direction'), 'wide-swath', 1.0, (0.1, 0.1), angular=('direction',),
                     nonnegative=('direction',))



def test_thinning_averages_per_cell(schemas):
    obs = _obs(schemas['SST'], [[30.2, 10.2], [30.8, 10.6], [33.5, 10.5]], [[1.0], [3.0], [7.0]])
    thin = thin_observations(obs, 2.0)
    assert thin.n == 2
    assert thin.schema.native_res == 2.0
    order = np.argsort(thin.lats)
    np.testing.assert_allclose(thin.values[order, 0], [2.0, 7.0])
    np.testing.assert_allclose(thin.coords[order[0]], [30.5, 10.4])
    # single member keeps its point
    np.testing.assert_allclose(thin.coords[order[1]], [33.5, 10.5])


def test_thinning_uses_circular_mean_for_angles(schemas):
    obs = _obs(schemas['SSW'], [[30.2, 10.2], [30.4, 10.4]], [[1.0, np.pi - 0.1], [3.0, -np.pi + 0.1]])
    thin = thin_observations(obs, 2.0)
    assert thin.values[0, 0] == pytest.approx(2.0)
    assert abs(abs(thin.values[0, 1]) - np.pi) < 1e-9


def test_thinning_is_idempotent(world, schemas, obs_config):
    obs = simulate_source(world.truth_state(2), schemas['SST'], 2, seed=1, config=obs_config)
    once = thin_observations(obs, 4.0)
    twice = thin_observations(once, 4.0)
    assert once.n < obs.n
    np.testing.assert_allclose(twice.values, once.values)
    np.testing.assert_allclose(twice.coords, once.coords)


def test_thinning_rejects_bad_resolution(schemas):
    with pytest.raises(DomainError):
        thin_observations(ObservationSet.empty(schemas['SST'], 0), 0.0)


def test_observation_set_frame(schemas, tmp_path):
    obs = _obs(schemas['SSW'], [[30, 10]], [[2.0, 0.5]], day=9)
    df = obs.to_frame()
    assert list(df.columns) == ['day', 'lat', 'lon', 'speed', 'direction']
    obs.to_csv(tmp_path / 'ssw.csv')
    assert (tmp_path / 'ssw.csv').read_text().startswith('day,lat,lon,speed,direction')
    with pytest.raises(SchemaError):
        _obs(schemas['SST'], [[30, 10]], [[np.nan]])
