"""Observation-impact protocols: leave-one-out contribution, perturbation
sensitivity and observation-resolution impact."""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from ..config import PartitionConfig
from ..errors import ArtifactIOError, DomainError, SchemaError
from .assim_model import AssimModel, assimilate
from .data_pipeline import DayStore
from .evaluation import Climatology, mae
from .geo import LAND, GridField, GridSpec, with_speed
from .observations import ObservationSet, perturb_observations

logger = logging.getLogger(__name__)

SIGMA_MODES = ('fixed', 'resample')
QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)


@dataclass
class ContributionTable:
    """MAE with every source versus with one source excluded, per variable"""
    frame: pd.DataFrame
    daily: pd.DataFrame
    n_days: int
    out_of_distribution: bool = False
    analyses: Dict[int, GridField] = field(default_factory=dict)

    def to_csv(self, path) -> None:
        out = self.frame.copy()
        out['n_days'] = self.n_days
        out['out_of_distribution'] = self.out_of_distribution
        out.to_csv(path, index=False, float_format='%.10g')


def _check_sources(model: AssimModel, sources: Sequence[str]) -> None:
    unknown = [s for s in sources if s not in model.source_ids]
    if unknown:
        raise SchemaError(f'unknown observation sources {unknown}; model has {model.source_ids}')


def contribution_analysis(model: AssimModel, store: DayStore, days: Sequence[int],
                          sources: Optional[Sequence[str]] = None, partition: Optional[PartitionConfig] = None,
                          n_jobs: int = 1, train_dropout: Optional[float] = None,
                          retrain: Optional[Callable[[str], AssimModel]] = None,
                          keep_analyses: bool = False) -> ContributionTable:
    """Leave-one-source-out MAE contribution over `days`.

    By default the excluded source's presence flag is zeroed at inference;
    `retrain(source_id)` supplies a separately trained model for the
    exclusion scenario instead.
    """
    sources = list(model.source_ids if sources is None else sources)
    _check_sources(model, sources)
    if not days:
        raise DomainError('contribution analysis needs at least one evaluation day')
    ood = train_dropout is not None and train_dropout <= 0 and retrain is None
    if ood:
        logger.warning('model was trained without source dropout: excluded-source scenarios are out of distribution')

    scenarios = {'ALL': (model, ())}
    for sid in sources:
        scenarios[sid] = (retrain(sid), (sid,)) if retrain is not None else (model, (sid,))

    rows: List[Dict] = []
    map_sums: Dict[str, np.ndarray] = {}
    analyses: Dict[int, GridField] = {}
    variables = None
    for day in days:
        truth = with_speed(store.truth(day).select(model.variables))
        background = store.background(day)
        obs = store.observations(day)
        for name, (m, exclude) in scenarios.items():
            known = {k: v for k, v in obs.items() if k in m.source_ids}
            analysis = assimilate(m, background, known, store.fine, store.fine_mask, partition, exclude, n_jobs)
            if name == 'ALL' and keep_analyses:
                analyses[day] = analysis
            means, err = mae(with_speed(analysis), truth)
            variables = truth.variables
            clean = np.where(truth.ocean_mask[..., None], err, 0.0)
            map_sums[name] = map_sums[name] + clean if name in map_sums else clean
            rows += [{'day': day, 'scenario': name, 'variable': v, 'mae': means[v]} for v in variables]
        logger.info(f'contribution day {day}: {len(scenarios)} scenarios assimilated')

    daily = pd.DataFrame(rows)
    mean_mae = daily.groupby(['scenario', 'variable'])['mae'].mean()
    ocean = store.fine_mask
    table = []
    for sid in sources:
        for k, v in enumerate(variables):
            mae_all = float(mean_mae.loc[('ALL', v)])
            mae_without = float(mean_mae.loc[(sid, v)])
            with_src = map_sums['ALL'][..., k][ocean]
            without = map_sums[sid][..., k][ocean]
            table.append({
                'source': sid,
                'variable': v,
                'mae_without': mae_without,
                'mae_all': mae_all,
                'contribution': (mae_without - mae_all) / mae_all if mae_all > 0 else float('nan'),
                'mae_reduction_fraction': float((with_src < without).mean()) if ocean.any() else 0.0,
            })
    return ContributionTable(pd.DataFrame(table), daily, len(days), ood, analyses)


@dataclass
class SensitivityMap:
    """Per-cell ensemble std of the analysis for one perturbed source, in climatological std units"""
    source: str
    spec: GridSpec
    variables: tuple
    maps: np.ndarray
    ocean_mask: np.ndarray
    n_members: int
    sigma: np.ndarray
    day: int

    def field(self) -> GridField:
        return GridField(self.spec, self.variables, self.maps, self.ocean_mask.copy(), self.day)

    def summary(self, quantiles: Sequence[float] = QUANTILES) -> pd.DataFrame:
        rows = []
        for k, v in enumerate(self.variables):
            vals = self.maps[..., k][self.ocean_mask]
            vals = vals[np.isfinite(vals)]
            row = {'source': self.source, 'variable': v, 'n_members': self.n_members,
                   'mean': float(vals.mean()) if vals.size else float('nan')}
            qs = np.quantile(vals, quantiles) if vals.size else [float('nan')] * len(quantiles)
            row.update({f'q{int(round(q * 100)):02d}': float(x) for q, x in zip(quantiles, qs)})
            rows.append(row)
        return pd.DataFrame(rows)


def _member_sigma(base: np.ndarray, mode: str, rng: np.random.Generator) -> np.ndarray:
    if mode == 'fixed':
        return base
    # half-normal with mean equal to the channel std
    return np.abs(rng.standard_normal(base.shape)) * base * np.sqrt(np.pi / 2.0)


def sensitivity_analysis(model: AssimModel, store: DayStore, day: int, source: str, n_members: int = 50,
                         seed: int = 0, climatology: Optional[Climatology] = None, sigma_mode: str = 'fixed',
                         sigma_scale: float = 1.0, partition: Optional[PartitionConfig] = None,
                         n_jobs: int = 1) -> SensitivityMap:
    """Std over `n_members` analyses, each with an independently perturbed copy of `source`"""
    _check_sources(model, [source])
    if n_members < 2:
        raise DomainError(f'sensitivity needs at least 2 members, got {n_members}')
    if sigma_mode not in SIGMA_MODES:
        raise DomainError(f'sigma mode must be one of {SIGMA_MODES}, got {sigma_mode!r}')
    if sigma_scale < 0:
        raise DomainError(f'sigma scale must be >= 0, got {sigma_scale}')

    background = store.background(day)
    obs = store.observations(day)
    base_sigma = np.asarray(model.norm.obs_std[source], dtype=np.float64) * sigma_scale
    children = np.random.SeedSequence([seed, day]).spawn(n_members)

    def member(child: np.random.SeedSequence) -> np.ndarray:
        rng = np.random.default_rng(child)
        sigma = _member_sigma(base_sigma, sigma_mode, rng)
        perturbed: Dict[str, ObservationSet] = dict(obs)
        perturbed[source] = perturb_observations(obs[source], sigma, rng)
        analysis = assimilate(model, background, perturbed, store.fine, store.fine_mask, partition)
        return with_speed(analysis).values

    members = Parallel(n_jobs=n_jobs, backend='threading')(delayed(member)(c) for c in children)
    stack = np.stack(members)
    spread = stack.std(axis=0, ddof=0)

    variables = tuple(model.variables) + ('SPEED',)
    if climatology is not None:
        unscaled = [v for v in variables if v not in climatology.variables]
        if unscaled:
            logger.warning(f'climatology has no std for {unscaled}: their sensitivity maps are NaN')
        scale = np.array([climatology.std_of(v) if v in climatology.variables else np.nan for v in variables])
    else:
        logger.warning('no climatology given: sensitivity maps are in physical units')
        scale = np.ones(len(variables))
    zero = ~(scale > 0)
    if (scale == 0).any():
        logger.warning(f'zero climatological std for {[v for v, s in zip(variables, scale) if s == 0]}')
    with np.errstate(divide='ignore', invalid='ignore'):
        maps = np.where(zero, np.nan, spread / np.where(zero, 1.0, scale))
    maps[~store.fine_mask] = LAND
    logger.info(f'sensitivity to {source} on day {day}: {n_members} members')
    return SensitivityMap(source, store.fine, variables, maps, store.fine_mask.copy(), n_members, base_sigma, day)


def resolution_reduction(rmse_lr: Mapping[str, float], rmse_origin: Mapping[str, float]) -> Dict[str, float]:
    """(RMSE_lr - RMSE_origin) / RMSE_lr per variable; negative when the coarser tier wins"""
    out = {}
    for v, lr in rmse_lr.items():
        out[v] = (lr - rmse_origin[v]) / lr if lr != 0 else float('nan')
    return out


def resolution_impact(tier_rmse: Mapping[int, Optional[Mapping[str, float]]], factors: Sequence[int],
                      origin: int = 1) -> pd.DataFrame:
    """Reduction table of every thinned tier against the original-resolution tier"""
    missing = [f for f in set(factors) | {origin} if tier_rmse.get(f) is None]
    if missing:
        raise ArtifactIOError(f'missing resolution tier(s) {sorted(missing)}')
    rows = []
    for f in factors:
        if f == origin:
            continue
        for v, r in resolution_reduction(tier_rmse[f], tier_rmse[origin]).items():
            rows.append({'factor': f, 'variable': v, 'rmse_lr': tier_rmse[f][v],
                         'rmse_origin': tier_rmse[origin][v], 'reduction': r})
    return pd.DataFrame(rows, columns=['factor', 'variable', 'rmse_lr', 'rmse_origin', 'reduction'])
