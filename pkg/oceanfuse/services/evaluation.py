"""Verification metrics, skill ratios, zonal spectra and forecast verification.

RMSE and ACC are cos(latitude) weighted, MAE is not. All metrics read
ocean cells only.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import fft
from scipy.signal import get_window

from ..config import ForecastConfig
from ..errors import DegenerateInputError, DomainError, SchemaError
from .geo import LAND, GridField, GridSpec, lat_weights
from .world import ForecastState, SyntheticWorld, run_forecast

logger = logging.getLogger(__name__)

MONTH_DAYS = 30


def _check_pair(pred: GridField, ref: GridField):
    if pred.spec != ref.spec:
        raise SchemaError(f'grid mismatch: {pred.spec.header()} vs {ref.spec.header()}')
    if pred.variables != ref.variables:
        raise SchemaError(f'variable mismatch: {pred.variables} vs {ref.variables}')
    if not np.array_equal(pred.ocean_mask, ref.ocean_mask):
        raise SchemaError('ocean masks differ')


def _cell_weights(field_: GridField) -> np.ndarray:
    """cos(lat) per ocean cell, row-major"""
    w = np.broadcast_to(lat_weights(field_.spec)[:, None], field_.spec.shape)
    return w[field_.ocean_mask]


def rmse_latweighted(pred: GridField, ref: GridField) -> Dict[str, float]:
    _check_pair(pred, ref)
    w = _cell_weights(ref)
    diff = pred.ocean_values() - ref.ocean_values()
    mse = (w[:, None] * diff ** 2).sum(axis=0) / w.sum()
    return dict(zip(ref.variables, np.sqrt(mse).tolist()))


def mae(pred: GridField, ref: GridField) -> Tuple[Dict[str, float], np.ndarray]:
    """Unweighted mean |error| per variable and the per-cell |error| map"""
    _check_pair(pred, ref)
    err = np.abs(pred.values - ref.values)
    err[~ref.ocean_mask] = LAND
    means = err[ref.ocean_mask].mean(axis=0)
    return dict(zip(ref.variables, means.tolist())), err


@dataclass
class Climatology:
    """Per-cell annual-harmonic fit over training days, plus per-variable std"""
    spec: GridSpec
    variables: Tuple[str, ...]
    ocean_mask: np.ndarray
    coeffs: np.ndarray
    std: np.ndarray
    period: float = 360.0
    train_days: Tuple[int, int] = (0, 0)

    @property
    def harmonics(self) -> int:
        return (self.coeffs.shape[-1] - 1) // 2

    @staticmethod
    def basis(day: float, harmonics: int, period: float) -> np.ndarray:
        cols = [1.0]
        for k in range(1, harmonics + 1):
            arg = 2.0 * np.pi * k * day / period
            cols += [np.cos(arg), np.sin(arg)]
        return np.array(cols)

    @classmethod
    def fit(cls, fields: Iterable[GridField], harmonics: int = 2, period: float = 360.0) -> 'Climatology':
        p = 1 + 2 * harmonics
        xtx = np.zeros((p, p))
        xty = None
        first = None
        days = []
        total = total_sq = None
        count = 0
        for f in fields:
            if first is None:
                first = f
                n = int(f.ocean_mask.sum())
                xty = np.zeros((p, n * len(f.variables)))
                total = np.zeros(len(f.variables))
                total_sq = np.zeros(len(f.variables))
            else:
                _check_pair(f, first)
            x = cls.basis(f.day, harmonics, period)
            y = f.ocean_values()
            xtx += np.outer(x, x)
            xty += np.outer(x, y.ravel())
            total += y.sum(axis=0)
            total_sq += (y ** 2).sum(axis=0)
            count += y.shape[0]
            days.append(f.day)
        if first is None:
            raise DegenerateInputError('climatology needs at least one day')
        if np.linalg.matrix_rank(xtx) < p:
            raise DegenerateInputError(f'{len(days)} days cannot resolve {harmonics} annual harmonics')
        beta = np.linalg.solve(xtx, xty)
        n_ocean, v = int(first.ocean_mask.sum()), len(first.variables)
        coeffs = np.full(first.spec.shape + (v, p), LAND)
        coeffs[first.ocean_mask] = beta.T.reshape(n_ocean, v, p)
        mean = total / count
        std = np.sqrt(np.maximum(total_sq / count - mean ** 2, 0.0))
        logger.info(f'climatology fitted on {len(days)} days with {harmonics} harmonics')
        return cls(first.spec, first.variables, first.ocean_mask.copy(), coeffs, std, period,
                   (min(days), max(days) + 1))

    def mean_at(self, day: int) -> GridField:
        x = self.basis(day, self.harmonics, self.period)
        values = self.coeffs @ x
        values[~self.ocean_mask] = LAND
        return GridField(self.spec, self.variables, values, self.ocean_mask.copy(), day)

    def std_of(self, variable: str) -> float:
        return float(self.std[self.variables.index(variable)])


def _weighted_corr(a: np.ndarray, b: np.ndarray, w: np.ndarray) -> float:
    saa = float((w * a * a).sum())
    sbb = float((w * b * b).sum())
    if saa <= 0 or sbb <= 0:
        return float('nan')
    return float((w * a * b).sum() / np.sqrt(saa * sbb))


def acc_latweighted(pred: GridField, ref: GridField, clim: Climatology, day: Optional[int] = None) -> Dict[str, float]:
    """cos-weighted correlation of anomalies from the climatology; NaN when undefined"""
    _check_pair(pred, ref)
    day = ref.day if day is None else day
    c = clim.mean_at(day)
    idx = [clim.variables.index(v) for v in ref.variables]
    if c.spec != ref.spec:
        raise SchemaError('climatology grid differs from the evaluated fields')
    c_vals = c.values[..., idx][ref.ocean_mask]
    w = _cell_weights(ref)
    a = pred.ocean_values() - c_vals
    b = ref.ocean_values() - c_vals
    out = {}
    for k, name in enumerate(ref.variables):
        out[name] = _weighted_corr(a[:, k], b[:, k], w)
        if np.isnan(out[name]):
            logger.warning(f'ACC undefined for {name} on day {day}: zero anomaly variance')
    return out


@dataclass
class SkillReport:
    variables: Tuple[str, ...]
    rmse: Dict[str, float]
    mae: Dict[str, float]
    acc: Dict[str, float]
    mae_map: np.ndarray
    ocean_mask: np.ndarray
    n_days: int
    daily: pd.DataFrame = field(default_factory=pd.DataFrame)
    spectra: Dict[str, pd.DataFrame] = field(default_factory=dict)

    def to_frame(self, label: str = '') -> pd.DataFrame:
        df = pd.DataFrame({
            'variable': list(self.variables),
            'rmse': [self.rmse[v] for v in self.variables],
            'mae': [self.mae[v] for v in self.variables],
            'acc': [self.acc[v] for v in self.variables],
        })
        df['n_days'] = self.n_days
        if label:
            df.insert(0, 'label', label)
        return df


class SkillAccumulator:
    """Collects daily metrics and builds a time-averaged SkillReport"""

    def __init__(self, climatology: Optional[Climatology] = None):
        self.climatology = climatology
        self.rows: List[Dict] = []
        self._mae_sum: Optional[np.ndarray] = None
        self._mask: Optional[np.ndarray] = None
        self._variables: Tuple[str, ...] = ()

    def add(self, pred: GridField, ref: GridField, day: Optional[int] = None) -> None:
        day = ref.day if day is None else day
        rmse = rmse_latweighted(pred, ref)
        mae_vals, mae_map = mae(pred, ref)
        acc = (acc_latweighted(pred, ref, self.climatology, day) if self.climatology is not None
               else {v: float('nan') for v in ref.variables})
        for v in ref.variables:
            self.rows.append({'day': day, 'variable': v, 'rmse': rmse[v], 'mae': mae_vals[v], 'acc': acc[v]})
        if self._mae_sum is None:
            self._mae_sum = np.where(ref.ocean_mask[..., None], mae_map, 0.0)
            self._mask = ref.ocean_mask.copy()
            self._variables = ref.variables
        else:
            self._mae_sum += np.where(ref.ocean_mask[..., None], mae_map, 0.0)

    def report(self) -> SkillReport:
        if not self.rows:
            raise DegenerateInputError('no days were evaluated')
        daily = pd.DataFrame(self.rows)
        n_days = daily['day'].nunique()
        means = daily.groupby('variable', sort=False)[['rmse', 'mae', 'acc']].mean()
        mae_map = self._mae_sum / n_days
        mae_map[~self._mask] = LAND
        return SkillReport(
            self._variables,
            {v: float(means.loc[v, 'rmse']) for v in self._variables},
            {v: float(means.loc[v, 'mae']) for v in self._variables},
            {v: float(means.loc[v, 'acc']) for v in self._variables},
            mae_map, self._mask, n_days, daily,
        )


def _ratio(num: float, den: float, what: str) -> float:
    if den == 0 or not np.isfinite(den) or not np.isfinite(num):
        logger.warning(f'{what}: undefined ratio ({num} / {den})')
        return float('nan')
    return num / den


def skill_ratios(analysis: SkillReport, background: SkillReport) -> pd.DataFrame:
    """ACC improvement, RMSE reduction and MAE-reduction cell fraction per variable"""
    if analysis.variables != background.variables or not np.array_equal(analysis.ocean_mask, background.ocean_mask):
        raise SchemaError('reports are not on the same grid and variables')
    diff = analysis.mae_map - background.mae_map
    ocean = analysis.ocean_mask
    rows = []
    for k, v in enumerate(analysis.variables):
        rows.append({
            'variable': v,
            'rmse_background': background.rmse[v],
            'rmse_analysis': analysis.rmse[v],
            'rmse_reduction': _ratio(background.rmse[v] - analysis.rmse[v], background.rmse[v], f'RMSE reduction {v}'),
            'acc_background': background.acc[v],
            'acc_analysis': analysis.acc[v],
            'acc_improvement': _ratio(analysis.acc[v] - background.acc[v], background.acc[v], f'ACC improvement {v}'),
            'mae_background': background.mae[v],
            'mae_analysis': analysis.mae[v],
            'mae_reduction_fraction': float((diff[..., k][ocean] < 0).mean()) if ocean.any() else 0.0,
        })
    return pd.DataFrame(rows)


def mae_difference_map(analysis: SkillReport, background: SkillReport) -> np.ndarray:
    diff = analysis.mae_map - background.mae_map
    diff[~analysis.ocean_mask] = LAND
    return diff


def monthly_table(analysis: SkillReport, background: SkillReport, month_days: int = MONTH_DAYS) -> pd.DataFrame:
    """RMSE/ACC and their ratios aggregated over consecutive month_days-day months"""
    a = analysis.daily.assign(month=analysis.daily['day'] // month_days)
    b = background.daily.assign(month=background.daily['day'] // month_days)
    ga = a.groupby(['month', 'variable'])[['rmse', 'acc']].mean()
    gb = b.groupby(['month', 'variable'])[['rmse', 'acc']].mean()
    out = ga.join(gb, lsuffix='_analysis', rsuffix='_background').reset_index()
    out['rmse_reduction'] = (out['rmse_background'] - out['rmse_analysis']) / out['rmse_background']
    out['acc_improvement'] = (out['acc_analysis'] - out['acc_background']) / out['acc_background']
    return out


def restrict(field_: GridField, region: Sequence[float]) -> GridField:
    """Sub-field of cells whose centers lie in (lat0, lat1, lon0, lon1)"""
    lat0, lat1, lon0, lon1 = region
    spec = field_.spec
    rows = np.flatnonzero((spec.lat_centers >= lat0) & (spec.lat_centers < lat1))
    cols = np.flatnonzero((spec.lon_centers >= lon0) & (spec.lon_centers < lon1))
    if not len(rows) or not len(cols):
        raise DomainError(f'region {tuple(region)} contains no cell of {spec.header()}')
    local = GridSpec(spec.lat_centers[rows[0]] - spec.res / 2, spec.lat_centers[rows[-1]] + spec.res / 2,
                     spec.lon_centers[cols[0]] - spec.res / 2, spec.lon_centers[cols[-1]] + spec.res / 2,
                     spec.res, False)
    sel = np.ix_(rows, cols)
    return GridField(local, field_.variables, field_.values[sel], field_.ocean_mask[sel], field_.day)


# Spectra

def psd_zonal(field_: GridField, lat_band: Sequence[float], variable: str) -> pd.DataFrame:
    """Row-averaged one-sided zonal power spectrum, wavenumber in cycles per 360 degrees.

    Rows containing land are skipped. Periodic rows are transformed as is so
    the total power equals the row mean square; non-periodic rows are
    mean-removed and Hann tapered.
    """
    spec = field_.spec
    lo, hi = lat_band
    rows = np.flatnonzero((spec.lat_centers >= lo) & (spec.lat_centers <= hi))
    full = [r for r in rows if field_.ocean_mask[r].all()]
    skipped = len(rows) - len(full)
    if not full:
        raise DegenerateInputError(f'no fully-ocean rows in latitude band {tuple(lat_band)}')
    if len(full) < 4:
        logger.warning(f'PSD band {tuple(lat_band)} has only {len(full)} usable rows')
    if skipped:
        logger.debug(f'PSD band {tuple(lat_band)}: {skipped} rows with land skipped')
    data = field_.var(variable)[full]
    n = data.shape[1]
    if not spec.periodic_lon:
        data = data - data.mean(axis=1, keepdims=True)
        window = get_window('hann', n)
        data = data * window / np.sqrt(np.mean(window ** 2))
    coef = fft.rfft(data, axis=1) / n
    power = np.abs(coef) ** 2
    power[:, 1:] *= 2.0
    if n % 2 == 0:
        power[:, -1] /= 2.0
    k = np.arange(power.shape[1]) * 360.0 / (n * spec.res)
    out = pd.DataFrame({'wavenumber': k, 'power': power.mean(axis=0)})
    out.attrs.update({'rows_used': len(full), 'rows_skipped': skipped})
    return out


def spectral_fidelity(truth: pd.DataFrame, candidate: pd.DataFrame, top_fraction: float = 1.0 / 3.0) -> float:
    """Mean |log(power ratio)| over the highest `top_fraction` of nonzero wavenumbers"""
    if len(truth) != len(candidate) or not np.allclose(truth['wavenumber'], candidate['wavenumber']):
        raise SchemaError('spectra are on different wavenumber axes')
    k = truth['wavenumber'].to_numpy()
    nonzero = np.flatnonzero(k > 0)
    if not len(nonzero):
        raise DegenerateInputError('spectrum has no nonzero wavenumbers')
    take = nonzero[-max(1, int(np.ceil(top_fraction * len(nonzero)))):]
    tiny = np.finfo(float).tiny
    ratio = (candidate['power'].to_numpy()[take] + tiny) / (truth['power'].to_numpy()[take] + tiny)
    return float(np.mean(np.abs(np.log(ratio))))


def mean_spectrum(fields: Iterable[GridField], lat_band: Sequence[float], variable: str) -> pd.DataFrame:
    curves = [psd_zonal(f, lat_band, variable) for f in fields]
    if not curves:
        raise DegenerateInputError('no fields for spectrum')
    out = curves[0][['wavenumber']].copy()
    out['power'] = np.mean([c['power'].to_numpy() for c in curves], axis=0)
    return out


# Forecast verification

def forecast_rmse_curves(world: SyntheticWorld, ics: Mapping[int, GridField], fp: ForecastConfig,
                         rng_seed: int, horizon: int) -> pd.DataFrame:
    """Time-averaged lat-weighted RMSE vs truth for leads 0..horizon from each start day"""
    last = max(ics) + horizon if ics else 0
    if last >= world.config.n_days:
        raise DomainError(f'forecast to day {last} exceeds the generated truth ({world.config.n_days} days)')
    rows = []
    for start in sorted(ics):
        state = ForecastState.from_field(world, ics[start], start)
        rmse = rmse_latweighted(state.render(), world.truth_state(start))
        rows += [{'start': start, 'lead': 0, 'variable': v, 'rmse': r} for v, r in rmse.items()]
        for lead, state in enumerate(run_forecast(state, fp, rng_seed, horizon), start=1):
            rmse = rmse_latweighted(state.render(), world.truth_state(start + lead))
            rows += [{'start': start, 'lead': lead, 'variable': v, 'rmse': r} for v, r in rmse.items()]
    df = pd.DataFrame(rows)
    return df.groupby(['lead', 'variable'], sort=True)['rmse'].mean().reset_index()


def forecast_rmse_reduction(candidate: pd.DataFrame, baseline: pd.DataFrame) -> pd.DataFrame:
    """(RMSE_IC - RMSE_baseline) / RMSE_baseline per lead and variable; negative is a gain"""
    merged = candidate.merge(baseline, on=['lead', 'variable'], suffixes=('_ic', '_baseline'))
    if len(merged) != len(candidate):
        raise SchemaError('forecast curves cover different leads or variables')
    den = merged['rmse_baseline'].replace(0.0, np.nan)
    merged['ratio'] = (merged['rmse_ic'] - merged['rmse_baseline']) / den
    return merged
