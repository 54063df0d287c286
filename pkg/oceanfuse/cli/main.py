"""Command-line orchestration of the twin experiment.

Every verb reads the resolved experiment config, writes a snapshot of it
under <out>/configs/, and records its artifacts in append-only manifests.
"""
import argparse
import logging
import sys
import time
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import pandas as pd
from joblib import Parallel, delayed

from .. import __version__
from ..config import ExperimentConfig, settings
from ..errors import ArtifactIOError, ConfigError, DegenerateInputError, OceanFuseError
from ..services.analysis import contribution_analysis, resolution_impact, sensitivity_analysis
from ..services.assim_model import AssimModel, assimilate, load_model
from ..services.data_pipeline import (DayCache, DayStore, FileDayStore, background_key, obs_key, truth_key,
                                      usable_days)
from ..services.evaluation import (Climatology, SkillAccumulator, forecast_rmse_curves, forecast_rmse_reduction,
                                   mae_difference_map, mean_spectrum, monthly_table, restrict, skill_ratios,
                                   spectral_fidelity)
from ..services.geo import GridField, area_average, interpolate_field, with_speed
from ..services.monitoring import PipelineMonitoring
from ..services.observations import SourceSchema, default_schemas, simulate_source
from ..services.storage import Manifest, RunLock, read_grid, write_grid, write_observations
from ..services.trainer import train_model
from ..services.world import SyntheticWorld, make_background, sla_reference

logger = logging.getLogger(__name__)

MODES = ('full', 'thinned', 'interp')
SLA_KEY = 'sla_ref'
SPECTRUM_VARIABLES = ('SSH', 'SPEED')


@dataclass
class RunContext:
    """Resolved config plus the experiment directory layout"""
    config: ExperimentConfig
    n_jobs: int = 1
    monitoring: PipelineMonitoring = field(default_factory=PipelineMonitoring)

    @property
    def out(self) -> Path:
        return Path(self.config.run.out)

    @property
    def short_hash(self) -> str:
        return self.config.config_hash()[:12]

    def dir(self, name: str) -> Path:
        path = self.out / name
        path.mkdir(parents=True, exist_ok=True)
        return path

    def snapshot(self) -> Path:
        path = self.dir('configs') / f'{self.short_hash}.ini'
        text = f'# oceanfuse {__version__}\n# config_hash = {self.config.config_hash()}\n\n'
        path.write_text(text + self.config.resolved_text())
        return path

    @cached_property
    def world(self) -> SyntheticWorld:
        return SyntheticWorld(self.config.world, self.config.run.seed)

    @cached_property
    def schemas(self) -> Dict[str, SourceSchema]:
        return default_schemas(self.config.obs)

    def world_manifest(self) -> Manifest:
        return Manifest.load(self.out / 'world' / 'manifest.json', self.config.stage_hash('world'))

    def obs_manifest(self) -> Manifest:
        return Manifest.load(self.out / 'obs' / 'manifest.json', self.config.stage_hash('obs'))

    def store(self, thin_res=None, schemas: Optional[Dict[str, SourceSchema]] = None) -> FileDayStore:
        cache = DayCache(on_access=lambda hit: self.monitoring.record_cache_operation('day', hit))
        return FileDayStore(self.world_manifest(), self.obs_manifest(), self.world.fine, self.world.fine_mask,
                            schemas or self.schemas, cache=cache, thin_res=thin_res)

    def coarse_res(self) -> float:
        return self.world.coarse.res

    def tier_thinning(self, tier: str):
        """Per-source thinning resolution of a training tier"""
        if tier in ('full', 'interp'):
            return None
        if tier == 'thinned':
            return self.coarse_res()
        if tier.startswith('res'):
            factor = int(tier[3:])
            return {sid: self.schemas[sid].native_res * factor for sid in self.config.analyze.resolution_sources
                    if sid in self.schemas}
        raise ConfigError(f'unknown tier {tier!r}')

    def checkpoint(self, tier: str) -> Path:
        return self.out / 'ckpt' / tier / 'best.ckpt'

    def load_model(self, tier: str):
        path = self.checkpoint(tier)
        if not path.exists():
            raise ArtifactIOError(f'missing checkpoint for tier {tier}: {path}')
        return load_model(path, self.schemas, self.config.stage_hash('train'))

    def report(self, frame: pd.DataFrame, name: str) -> Path:
        path = self.dir('reports') / f'{self.config.run.experiment_id}_{name}_{self.short_hash}.csv'
        frame.to_csv(path, index=False, float_format='%.10g')
        logger.info(f'report written: {path}')
        return path


def resolution_tier(factor: int) -> str:
    return 'full' if factor == 1 else f'res{factor}'


def parse_days(text: Optional[str], default: Sequence[int]) -> List[int]:
    if not text:
        return list(default)
    try:
        if ':' in text:
            a, b = text.split(':', 1)
            return list(range(int(a), int(b)))
        return [int(d) for d in text.split(',')]
    except ValueError:
        raise ConfigError(f'bad day selection {text!r}; use START:STOP or a comma list') from None


def test_days(ctx: RunContext) -> List[int]:
    return usable_days(ctx.config.world.test_days, ctx.config.forecast.lead)


# world and observations

def cmd_world_gen(ctx: RunContext, args) -> None:
    cfg = ctx.config
    world = ctx.world
    out = ctx.dir('world')
    manifest = Manifest.open(out / 'manifest.json', 'world', cfg.stage_hash('world'))
    lead = cfg.forecast.lead

    def one_day(day: int):
        entries = []
        truth = world.truth_state(day)
        path = out / 'truth' / f'{day:05d}.ofg'
        entries.append((truth_key(day), path, write_grid(path, truth)))
        if day >= lead:
            background = make_background(day, lead, world, cfg.forecast, cfg.run.seed)
            path = out / 'background' / f'{day:05d}.ofg'
            entries.append((background_key(day), path, write_grid(path, background)))
        return entries

    results = Parallel(n_jobs=ctx.n_jobs, backend='threading')(
        delayed(one_day)(day) for day in range(cfg.world.n_days))
    for entries in results:
        for key, path, digest in entries:
            manifest.add(key, path, digest)

    ref = sla_reference(world, range(*cfg.world.train_days))
    sla = GridField(world.fine, ('SSH',), ref[..., None], world.fine_mask, 0)
    path = out / 'sla_ref.ofg'
    manifest.add(SLA_KEY, path, write_grid(path, sla))
    manifest.save()
    logger.info(f'world-gen: {cfg.world.n_days} days on {world.fine.header()} written to {out}')


def cmd_obs_sim(ctx: RunContext, args) -> None:
    cfg = ctx.config
    world_manifest = ctx.world_manifest()
    out = ctx.dir('obs')
    manifest = Manifest.open(out / 'manifest.json', 'obs', cfg.stage_hash('obs'))
    sla_ref = read_grid(world_manifest.verify(SLA_KEY))
    days = parse_days(args.days, range(cfg.world.n_days))

    def one_day(day: int):
        truth = read_grid(world_manifest.verify(truth_key(day)))
        entries = []
        for sid, schema in ctx.schemas.items():
            obs = simulate_source(truth, schema, day, cfg.run.seed, cfg.obs, sla_ref, cfg.world.season_period)
            path = out / sid / f'{day:05d}.ofo'
            entries.append((obs_key(sid, day), path, write_observations(path, obs)))
            if args.csv:
                obs.to_csv(out / sid / f'{day:05d}.csv')
        return entries

    results = Parallel(n_jobs=ctx.n_jobs, backend='threading')(delayed(one_day)(d) for d in days)
    for entries in results:
        for key, path, digest in entries:
            manifest.add(key, path, digest)
    manifest.save()
    logger.info(f'obs-sim: {len(ctx.schemas)} sources x {len(days)} days written to {out}')


# training

def train_tier(ctx: RunContext, tier: str, schemas: Optional[Dict[str, SourceSchema]] = None) -> AssimModel:
    store = ctx.store(ctx.tier_thinning(tier), schemas)
    out = ctx.dir(f'ckpt/{tier}')
    result = train_model(ctx.config, store, out, ctx.n_jobs, ctx.monitoring)
    logger.info(f'train [{tier}]: best epoch {result.best_epoch}, val loss {result.best_val:.6f}'
                f'{" (early stop)" if result.stopped_early else ""}')
    return result.model


def cmd_train(ctx: RunContext, args) -> None:
    if args.mode == 'interp':
        raise ConfigError('interpolation baseline has no model to train')
    tier = resolution_tier(args.resolution_factor) if args.resolution_factor else args.mode
    train_tier(ctx, tier)
    ctx.monitoring.save_snapshot(ctx.config.run.experiment_id, f'train_{tier}')


# assimilation and evaluation

def interp_analysis(ctx: RunContext, store: DayStore, day: int) -> GridField:
    return interpolate_field(store.background(day), ctx.world.fine, ctx.world.fine_mask)


def analysis_manifest(ctx: RunContext, mode: str, create: bool = False) -> Manifest:
    path = ctx.out / 'analysis' / mode / 'manifest.json'
    if create:
        return Manifest.open(path, f'analysis_{mode}', ctx.config.stage_hash('train'))
    return Manifest.load(path, ctx.config.stage_hash('train'))


def fit_climatology(ctx: RunContext, store: DayStore) -> Climatology:
    days = range(*ctx.config.world.train_days)
    return Climatology.fit((with_speed(store.truth(d)) for d in days),
                           ctx.config.eval.climatology_harmonics, ctx.config.world.season_period)


def skill_tables(ctx: RunContext, store: DayStore, days: Iterable[int],
                 analysis_of: Callable[[int], GridField], clim: Climatology, region=None):
    """Analysis and background SkillReports against truth, optionally on a region box"""
    clim = None if region is not None else clim
    acc_a, acc_b = SkillAccumulator(clim), SkillAccumulator(clim)
    for day in days:
        truth = with_speed(store.truth(day))
        analysis = with_speed(analysis_of(day))
        background = with_speed(store.background_interp(day))
        if region is not None:
            truth, analysis, background = (restrict(f, region) for f in (truth, analysis, background))
        acc_a.add(analysis, truth, day)
        acc_b.add(background, truth, day)
    return acc_a.report(), acc_b.report()


def cmd_assimilate(ctx: RunContext, args) -> None:
    mode = args.mode
    days = parse_days(args.days, test_days(ctx))
    store = ctx.store(ctx.tier_thinning(mode))
    model = None if mode == 'interp' else ctx.load_model(mode)[0]
    manifest = analysis_manifest(ctx, mode, create=True)
    out = ctx.dir(f'analysis/{mode}')
    analyses: Dict[int, GridField] = {}
    for day in days:
        with ctx.monitoring.time_assimilation(mode) as timer:
            if model is None:
                analysis = interp_analysis(ctx, store, day)
            else:
                analysis = assimilate(model, store.background(day), store.observations(day), ctx.world.fine,
                                      ctx.world.fine_mask, ctx.config.partition, n_jobs=ctx.n_jobs)
        path = out / f'{day:05d}.ofg'
        manifest.add(f'analysis/{day:05d}', path, write_grid(path, analysis))
        analyses[day] = analysis
        logger.info(f'assimilate [{mode}] day {day} in {timer.duration:.2f}s')
    manifest.save()

    clim = fit_climatology(ctx, store)
    report, background = skill_tables(ctx, store, days, analyses.__getitem__, clim)
    ctx.report(report.to_frame(mode), f'skill_{mode}')
    ctx.report(skill_ratios(report, background), f'ratios_{mode}')
    ctx.monitoring.save_snapshot(ctx.config.run.experiment_id, f'assimilate_{mode}')


def analysis_loader(ctx: RunContext, mode: str) -> Callable[[int], GridField]:
    manifest = analysis_manifest(ctx, mode)

    def load(day: int) -> GridField:
        return read_grid(manifest.verify(f'analysis/{day:05d}'))
    return load


def spectra_tables(ctx: RunContext, store: DayStore, days: Sequence[int], analysis_of: Callable[[int], GridField]):
    """Band-averaged zonal spectra and high-wavenumber fidelity of analysis vs interpolation baselines"""
    world, band = ctx.world, ctx.config.eval.psd_lat_band
    fields = {'truth': [], 'analysis': [], 'interp_analysis': [], 'background': []}
    for day in days:
        analysis = analysis_of(day)
        coarse = area_average(analysis, world.coarse, world.coarse_mask)
        fields['truth'].append(with_speed(store.truth(day)))
        fields['analysis'].append(with_speed(analysis))
        fields['interp_analysis'].append(with_speed(interpolate_field(coarse, world.fine, world.fine_mask)))
        fields['background'].append(with_speed(store.background_interp(day)))
    curves, fidelity = [], []
    for var in SPECTRUM_VARIABLES:
        truth_curve = mean_spectrum(fields['truth'], band, var)
        for name, fs in fields.items():
            curve = truth_curve if name == 'truth' else mean_spectrum(fs, band, var)
            curves.append(curve.assign(variable=var, field=name))
            if name != 'truth':
                fidelity.append({'variable': var, 'field': name,
                                 'log_power_error': spectral_fidelity(truth_curve, curve,
                                                                      ctx.config.eval.psd_top_fraction)})
    return pd.concat(curves, ignore_index=True), pd.DataFrame(fidelity)


def cmd_eval(ctx: RunContext, args) -> None:
    mode = args.mode
    cfg = ctx.config.eval
    days = parse_days(args.days, test_days(ctx))
    store = ctx.store()
    analysis_of = analysis_loader(ctx, mode)
    clim = fit_climatology(ctx, store)

    report, background = skill_tables(ctx, store, days, analysis_of, clim)
    ctx.report(report.to_frame(mode), f'skill_{mode}')
    ctx.report(background.to_frame('background'), 'skill_background')
    ctx.report(skill_ratios(report, background), f'ratios_{mode}')
    ctx.report(report.daily, f'daily_{mode}')
    ctx.report(monthly_table(report, background), f'monthly_{mode}')
    diff_map = mae_difference_map(report, background)
    write_grid(ctx.dir('reports') / f'mae_diff_{mode}_{ctx.short_hash}.ofg',
               GridField(ctx.world.fine, report.variables, diff_map, report.ocean_mask, days[0]))

    region_a, region_b = skill_tables(ctx, store, days, analysis_of, clim, cfg.region)
    ctx.report(skill_ratios(region_a, region_b).assign(region=str(tuple(cfg.region))), f'region_{mode}')

    try:
        curves, fidelity = spectra_tables(ctx, store, days[:cfg.psd_days], analysis_of)
    except DegenerateInputError as e:
        logger.warning(f'spectra skipped: {e}')
    else:
        ctx.report(curves, f'spectra_{mode}')
        ctx.report(fidelity, f'fidelity_{mode}')


def cmd_forecast_verify(ctx: RunContext, args) -> None:
    cfg = ctx.config
    horizon = args.horizon or cfg.eval.forecast_horizon
    days = parse_days(args.days, test_days(ctx)[:cfg.eval.forecast_start_days])
    store = ctx.store()
    analysis_of = analysis_loader(ctx, args.mode)
    ics = {d: analysis_of(d) for d in days}
    baseline = {d: store.background(d) for d in days}
    seed = cfg.run.seed + 1
    curve_ic = forecast_rmse_curves(ctx.world, ics, cfg.forecast, seed, horizon)
    curve_base = forecast_rmse_curves(ctx.world, baseline, cfg.forecast, seed, horizon)
    ctx.report(forecast_rmse_reduction(curve_ic, curve_base), f'forecast_{args.mode}')


# analyses

def cmd_analyze_contribution(ctx: RunContext, args) -> None:
    cfg = ctx.config
    model, meta = ctx.load_model('full')
    days = parse_days(args.days, test_days(ctx)[:cfg.analyze.contribution_days])
    store = ctx.store()
    retrain = None
    if cfg.analyze.retrain_per_exclusion:
        def retrain(source_id: str) -> AssimModel:
            schemas = {k: v for k, v in ctx.schemas.items() if k != source_id}
            return train_tier(ctx, f'without_{source_id}', schemas)
    table = contribution_analysis(model, store, days, args.sources or None, cfg.partition, ctx.n_jobs,
                                  meta.get('dropout'), retrain)
    frame = table.frame.assign(n_days=table.n_days, out_of_distribution=table.out_of_distribution)
    ctx.report(frame, 'contribution')


def cmd_analyze_sensitivity(ctx: RunContext, args) -> None:
    cfg = ctx.config.analyze
    model, _ = ctx.load_model('full')
    store = ctx.store()
    clim = fit_climatology(ctx, store)
    day = args.day if args.day is not None else cfg.sensitivity_day
    members = args.members or cfg.sensitivity_members
    summaries = []
    for source in args.sources or cfg.sensitivity_sources:
        smap = sensitivity_analysis(model, store, day, source, members, ctx.config.run.seed, clim,
                                    cfg.sigma_mode, partition=ctx.config.partition, n_jobs=ctx.n_jobs)
        write_grid(ctx.dir('analysis') / f'sensitivity_{source}_{day:05d}.ofg', smap.field())
        summaries.append(smap.summary())
    ctx.report(pd.concat(summaries, ignore_index=True), 'sensitivity')


def cmd_analyze_resolution(ctx: RunContext, args) -> None:
    cfg = ctx.config.analyze
    factors = tuple(args.factors or cfg.resolution_factors)
    days = parse_days(args.days, test_days(ctx))
    tier_rmse: Dict[int, Optional[Dict[str, float]]] = {}
    skills = []
    for f in sorted(set(factors) | {1}):
        tier = resolution_tier(f)
        if not ctx.checkpoint(tier).exists():
            tier_rmse[f] = None
            continue
        model, _ = ctx.load_model(tier)
        store = ctx.store(ctx.tier_thinning(tier))
        acc = SkillAccumulator()
        for day in days:
            analysis = assimilate(model, store.background(day), store.observations(day), ctx.world.fine,
                                  ctx.world.fine_mask, ctx.config.partition, n_jobs=ctx.n_jobs)
            acc.add(with_speed(analysis), with_speed(store.truth(day)), day)
        report = acc.report()
        tier_rmse[f] = report.rmse
        skills.append(report.to_frame(tier).assign(factor=f))
    table = resolution_impact(tier_rmse, factors)
    ctx.report(pd.concat(skills, ignore_index=True), 'resolution_skill')
    ctx.report(table, 'resolution')


COMMANDS = {
    'world-gen': cmd_world_gen,
    'obs-sim': cmd_obs_sim,
    'train': cmd_train,
    'assimilate': cmd_assimilate,
    'eval': cmd_eval,
    'forecast-verify': cmd_forecast_verify,
    'analyze-contribution': cmd_analyze_contribution,
    'analyze-sensitivity': cmd_analyze_sensitivity,
    'analyze-resolution': cmd_analyze_resolution,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', type=Path, help='experiment config file (sectioned key = value)')
    common.add_argument('--seed', type=int, help='master seed')
    common.add_argument('--threads', type=int, help='worker threads')
    common.add_argument('--sequential', action='store_true', default=None, help='single worker, bit-reproducible')
    common.add_argument('--out', type=str, help='experiment output directory')
    common.add_argument('--set', action='append', default=[], metavar='SECTION.KEY=VALUE',
                        help='override one config value')
    common.add_argument('--days', type=str, help='START:STOP or a comma-separated day list')

    parser = argparse.ArgumentParser(prog='oceanfuse', description='Ocean data assimilation twin experiments')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('world-gen', parents=[common], help='generate truth and background fields')
    p = sub.add_parser('obs-sim', parents=[common], help='simulate observations from the truth')
    p.add_argument('--csv', action='store_true', help='also export each observation set as CSV')
    p = sub.add_parser('train', parents=[common], help='train the assimilation model')
    p.add_argument('--mode', choices=MODES[:2], default='full')
    p.add_argument('--resolution-factor', type=int, help='thin the resolution sources by this factor')
    for name in ('assimilate', 'eval', 'forecast-verify'):
        p = sub.add_parser(name, parents=[common])
        p.add_argument('--mode', choices=MODES, default='full')
        if name == 'forecast-verify':
            p.add_argument('--horizon', type=int)
    p = sub.add_parser('analyze-contribution', parents=[common])
    p.add_argument('--sources', nargs='*')
    p = sub.add_parser('analyze-sensitivity', parents=[common])
    p.add_argument('--sources', nargs='*')
    p.add_argument('--members', type=int)
    p.add_argument('--day', type=int)
    p = sub.add_parser('analyze-resolution', parents=[common])
    p.add_argument('--factors', type=int, nargs='*')
    return parser


def resolve_config(args) -> ExperimentConfig:
    overrides: Dict[str, Dict[str, str]] = {}
    for item in args.set:
        try:
            key, value = item.split('=', 1)
            section, name = key.strip().split('.', 1)
        except ValueError:
            raise ConfigError(f'bad override {item!r}; expected SECTION.KEY=VALUE') from None
        overrides.setdefault(section, {})[name] = value.strip()
    run = overrides.setdefault('run', {})
    for flag in ('seed', 'threads', 'sequential', 'out'):
        value = getattr(args, flag)
        if value is not None:
            run[flag] = str(value)
    return ExperimentConfig.from_file(args.config, overrides)


def worker_count(config: ExperimentConfig) -> int:
    if config.run.sequential or settings.sequential:
        return 1
    return max(1, config.run.threads if config.run.threads > 1 else settings.threads)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    stage = args.command
    monitoring = None
    try:
        config = resolve_config(args)
        ctx = RunContext(config, worker_count(config), PipelineMonitoring(Path(config.run.out) / 'metrics'))
        monitoring = ctx.monitoring
        with RunLock(ctx.out):
            ctx.snapshot()
            start = time.time()
            logger.info(f'{stage}: config {ctx.short_hash}, {ctx.n_jobs} worker(s), out {ctx.out}')
            COMMANDS[stage](ctx, args)
            logger.info(f'{stage} finished in {time.time() - start:.1f}s')
        return 0
    except OceanFuseError as e:
        if monitoring is not None:
            monitoring.record_error(stage, type(e).__name__)
        logger.error(f'{stage} failed: {e}')
        return e.exit_code


if __name__ == '__main__':
    sys.exit(main())
