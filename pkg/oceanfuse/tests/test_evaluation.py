import numpy as np
import pandas as pd
import pytest

from oceanfuse.config import ForecastConfig
from oceanfuse.errors import DegenerateInputError, DomainError, SchemaError
from oceanfuse.services.evaluation import (
    Climatology,
    SkillAccumulator,
    acc_latweighted,
    forecast_rmse_curves,
    forecast_rmse_reduction,
    mae,
    mean_spectrum,
    monthly_table,
    psd_zonal,
    restrict,
    rmse_latweighted,
    skill_ratios,
    spectral_fidelity,
)
from oceanfuse.services.geo import GridField, GridSpec


@pytest.fixture
def grid():
    return GridSpec(0.0, 60.0, 0.0, 40.0, 20.0)


def _field(spec, values, mask=None, variables=('A',), day=0):
    values = np.asarray(values, dtype=float).reshape(spec.shape + (len(variables),))
    mask = np.ones(spec.shape, dtype=bool) if mask is None else mask
    values = values.copy()
    values[~mask] = np.nan
    return GridField(spec, variables, values, mask, day)


def test_rmse_of_constant_offset(grid):
    ref = _field(grid, np.arange(6))
    assert rmse_latweighted(_field(grid, np.arange(6) + 0.3), ref)['A'] == pytest.approx(0.3)


def test_rmse_weights_rows_by_cosine(grid):
    ref = _field(grid, np.zeros(6))
    # error only in the first row (centered at 10N)
    pred = _field(grid, [1.0, 1.0, 0.0, 0.0, 0.0, 0.0])
    w = np.cos(np.deg2rad([10.0, 30.0, 50.0]))
    assert rmse_latweighted(pred, ref)['A'] == pytest.approx(np.sqrt(w[0] / w.sum()))


def test_metrics_ignore_land(grid):
    mask = np.ones(grid.shape, dtype=bool)
    mask[2, 1] = False
    ref = _field(grid, np.zeros(6), mask)
    pred = _field(grid, np.full(6, 2.0), mask)
    means, err_map = mae(pred, ref)
    assert means['A'] == pytest.approx(2.0)
    assert np.isnan(err_map[2, 1, 0])
    with pytest.raises(SchemaError):
        mae(pred, _field(grid, np.zeros(6)))


def test_metrics_reject_mismatched_fields(grid):
    ref = _field(grid, np.zeros(6))
    with pytest.raises(SchemaError):
        rmse_latweighted(_field(grid, np.zeros(6), variables=('B',)), ref)


def _seasonal_fields(spec, days, harmonics=1, period=360.0):
    lat, lon = spec.mesh()
    out = []
    for d in days:
        arg = 2 * np.pi * d / period
        values = 10 + lat / 10 + 2 * np.cos(arg) + (lon / 40) * np.sin(arg)
        if harmonics > 1:
            values = values + 0.5 * np.cos(2 * arg)
        out.append(_field(spec, values, day=d))
    return out


def test_climatology_recovers_harmonic_signal(grid):
    fields = _seasonal_fields(grid, range(0, 360, 15), harmonics=2)
    clim = Climatology.fit(fields, harmonics=2)
    assert clim.harmonics == 2
    assert clim.train_days == (0, 346)
    np.testing.assert_allclose(clim.mean_at(100).values, _seasonal_fields(grid, [100], 2)[0].values, atol=1e-9)
    assert clim.std_of('A') > 0


def test_climatology_degenerate_inputs(grid):
    with pytest.raises(DegenerateInputError):
        Climatology.fit([], harmonics=0)
    with pytest.raises(DegenerateInputError):
        Climatology.fit(_seasonal_fields(grid, [0, 0]), harmonics=1)


def test_acc_bounds(grid):
    fields = _seasonal_fields(grid, range(0, 360, 30))
    clim = Climatology.fit(fields, harmonics=1)
    rng = np.random.default_rng(0)
    anomaly = rng.standard_normal(6)
    ref = _field(grid, clim.mean_at(45).values[..., 0].ravel() + anomaly, day=45)
    assert acc_latweighted(ref, ref, clim)['A'] == pytest.approx(1.0)
    flipped = _field(grid, clim.mean_at(45).values[..., 0].ravel() - anomaly, day=45)
    assert acc_latweighted(flipped, ref, clim)['A'] == pytest.approx(-1.0)
    assert np.isnan(acc_latweighted(clim.mean_at(45), ref, clim)['A'])


def test_accumulator_averages_days(grid):
    acc = SkillAccumulator()
    ref = _field(grid, np.zeros(6))
    acc.add(_field(grid, np.ones(6)), ref, day=0)
    acc.add(_field(grid, np.full(6, 3.0)), ref, day=1)
    report = acc.report()
    assert report.n_days == 2
    assert report.rmse['A'] == pytest.approx(2.0)
    assert report.mae['A'] == pytest.approx(2.0)
    assert np.isnan(report.acc['A'])
    np.testing.assert_allclose(report.mae_map[..., 0], 2.0)
    frame = report.to_frame('full')
    assert list(frame.columns) == ['label', 'variable', 'rmse', 'mae', 'acc', 'n_days']
    with pytest.raises(DegenerateInputError):
        SkillAccumulator().report()


def _report(grid, errors, days=(0,)):
    acc = SkillAccumulator()
    ref = _field(grid, np.zeros(6))
    for d in days:
        acc.add(_field(grid, errors), ref, day=d)
    return acc.report()


def test_skill_ratios(grid):
    analysis = _report(grid, [1.0, 1.0, 1.0, 1.0, 3.0, 3.0])
    background = _report(grid, np.full(6, 2.0))
    row = skill_ratios(analysis, background).iloc[0]
    assert row['rmse_reduction'] == pytest.approx((row['rmse_background'] - row['rmse_analysis'])
                                                  / row['rmse_background'])
    assert row['mae_reduction_fraction'] == pytest.approx(4 / 6)
    # no climatology: ACC improvement is undefined
    assert np.isnan(row['acc_improvement'])


def test_perfect_analysis_reduces_rmse_fully(grid):
    row = skill_ratios(_report(grid, np.zeros(6)), _report(grid, np.ones(6))).iloc[0]
    assert row['rmse_reduction'] == pytest.approx(1.0)
    assert row['mae_reduction_fraction'] == 1.0


def test_monthly_table_groups_days(grid):
    analysis = _report(grid, np.ones(6), days=(0, 1, 30))
    background = _report(grid, np.full(6, 2.0), days=(0, 1, 30))
    table = monthly_table(analysis, background)
    assert table['month'].tolist() == [0, 1]
    np.testing.assert_allclose(table['rmse_reduction'], 0.5)


def test_restrict_region(grid):
    field = _field(grid, np.arange(6))
    sub = restrict(field, (20.0, 60.0, 20.0, 40.0))
    assert sub.spec.shape == (2, 1)
    np.testing.assert_array_equal(sub.values[..., 0].ravel(), [3, 5])
    with pytest.raises(DomainError):
        restrict(field, (70.0, 80.0, 0.0, 40.0))


@pytest.fixture
def band_grid():
    return GridSpec(40.0, 50.0, 0.0, 360.0, 2.0, True)


def _zonal(spec, fn):
    lat, lon = spec.mesh()
    return _field(spec, fn(lon), variables=('SSH',))


def test_psd_of_constant_is_mean_square(band_grid):
    psd = psd_zonal(_zonal(band_grid, lambda lon: np.full_like(lon, 3.0)), (40, 50), 'SSH')
    assert psd['power'].iloc[0] == pytest.approx(9.0)
    assert np.allclose(psd['power'].iloc[1:], 0.0, atol=1e-20)
    assert psd.attrs['rows_used'] == 5


def test_psd_sinusoid_peak(band_grid):
    field = _zonal(band_grid, lambda lon: 2.0 * np.cos(np.deg2rad(5 * lon)))
    psd = psd_zonal(field, (40, 50), 'SSH')
    peak = psd.loc[psd['power'].idxmax()]
    assert peak['wavenumber'] == pytest.approx(5.0)
    assert peak['power'] == pytest.approx(2.0)


def test_psd_parseval(band_grid, rng):
    noise = rng.standard_normal(band_grid.shape)
    field = _field(band_grid, noise, variables=('SSH',))
    psd = psd_zonal(field, (40, 50), 'SSH')
    assert psd['power'].sum() == pytest.approx(np.mean(noise ** 2), rel=1e-10)


def test_psd_regional_rows_are_tapered():
    spec = GridSpec(40.0, 50.0, 0.0, 180.0, 2.0, False)
    psd = psd_zonal(_zonal(spec, lambda lon: np.sin(np.deg2rad(10 * lon)) + 4.0), (40, 50), 'SSH')
    assert psd['power'].iloc[0] < 1e-3 * psd['power'].max()
    assert psd.loc[psd['power'].idxmax(), 'wavenumber'] == pytest.approx(10.0)


def test_psd_skips_land_rows(band_grid):
    mask = np.ones(band_grid.shape, dtype=bool)
    mask[0, 10] = False
    field = _field(band_grid, np.ones(band_grid.shape), mask, variables=('SSH',))
    psd = psd_zonal(field, (40, 50), 'SSH')
    assert psd.attrs == {'rows_used': 4, 'rows_skipped': 1}
    mask[:, 0] = False
    with pytest.raises(DegenerateInputError):
        psd_zonal(_field(band_grid, np.ones(band_grid.shape), mask, variables=('SSH',)), (40, 50), 'SSH')


def test_spectral_fidelity(band_grid, rng):
    fields = [_field(band_grid, rng.standard_normal(band_grid.shape), variables=('SSH',)) for _ in range(2)]
    truth = mean_spectrum(fields, (40, 50), 'SSH')
    assert spectral_fidelity(truth, truth) == pytest.approx(0.0)
    doubled = truth.assign(power=truth['power'] * 2)
    assert spectral_fidelity(truth, doubled) == pytest.approx(np.log(2.0))
    with pytest.raises(SchemaError):
        spectral_fidelity(truth, truth.iloc[:-1])


def test_truth_initial_conditions_have_zero_forecast_error(world):
    ics = {d: world.truth_state(d) for d in (5, 8)}
    curves = forecast_rmse_curves(world, ics, ForecastConfig.identity(), 1, horizon=3)
    assert sorted(curves['lead'].unique()) == [0, 1, 2, 3]
    assert np.allclose(curves['rmse'], 0.0, atol=1e-10)


def test_forecast_reduction_ratio(world):
    fp = ForecastConfig(lead=2)
    truth_ics = {d: world.truth_state(d) for d in (5, 8)}
    from oceanfuse.services.world import make_background
    bg_ics = {d: make_background(d, 2, world, fp, 7) for d in (5, 8)}
    good = forecast_rmse_curves(world, truth_ics, fp, 3, horizon=2)
    base = forecast_rmse_curves(world, bg_ics, fp, 3, horizon=2)
    ratio = forecast_rmse_reduction(good, base)
    assert len(ratio) == len(good)
    lead0 = ratio[ratio['lead'] == 0]
    np.testing.assert_allclose(lead0['ratio'], -1.0, atol=1e-9)
    assert ratio['ratio'].mean() < 0


def test_forecast_horizon_must_fit(world):
    with pytest.raises(DomainError):
        forecast_rmse_curves(world, {38: world.truth_state(38)}, ForecastConfig.identity(), 1, horizon=3)


def test_forecast_reduction_requires_same_leads():
    a = pd.DataFrame({'lead': [0, 1], 'variable': ['T', 'T'], 'rmse': [1.0, 2.0]})
    b = pd.DataFrame({'lead': [0], 'variable': ['T'], 'rmse': [1.0]})
    with pytest.raises(SchemaError):
        forecast_rmse_reduction(a, b)
