"""Training loop, validation, checkpoints and loss history."""
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from ..config import ExperimentConfig, TrainConfig
from ..errors import NumericalError
from .assim_model import AssimModel, PatchContext, save_model
from .data_pipeline import DayStore, PatchDataset, TrainSample, build_dataset, fit_norm_stats, usable_days
from .monitoring import PipelineMonitoring
from .ndcore import AdamState, LrSchedule, adam_step, lr_at
from .partition import PatchSpec, partition_domain, patch_cells

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ['epoch', 'lr', 'train_loss', 'val_loss']


@dataclass
class Prepared:
    ctx: PatchContext
    target: np.ndarray
    mask: np.ndarray
    exclude: Set[str]


@dataclass
class TrainResult:
    model: AssimModel
    last_model: AssimModel
    history: pd.DataFrame
    best_epoch: int
    best_val: float
    stopped_early: bool


def _subsample(n: int, limit: int, rng: np.random.Generator) -> np.ndarray:
    if limit <= 0 or n <= limit:
        return np.arange(n)
    return np.sort(rng.choice(n, size=limit, replace=False))


def ocean_patches(patches: Sequence[PatchSpec], store: DayStore) -> List[PatchSpec]:
    """Patches with at least one fine ocean cell"""
    out = []
    for p in patches:
        rows, cols = patch_cells(p, store.fine)
        if store.fine_mask[np.ix_(rows, cols)].any():
            out.append(p)
    return out


class Trainer:
    def __init__(self, model: AssimModel, train_set: PatchDataset, val_set: PatchDataset, config: TrainConfig,
                 seed: int, n_jobs: int = 1, monitoring: Optional[PipelineMonitoring] = None,
                 out_dir: Optional[Path] = None, config_hash: str = '', run_id: str = 'train'):
        self.model = model
        self.train_set = train_set
        self.val_set = val_set
        self.config = config
        self.seed = seed
        self.n_jobs = n_jobs
        self.monitoring = monitoring or PipelineMonitoring()
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.config_hash = config_hash
        self.run_id = run_id
        self.schedule = LrSchedule.proportional(config.base_lr, config.epochs,
                                                config.milestone_fractions, config.gamma)
        val_rng = np.random.default_rng([seed, 11])
        self.val_indices = _subsample(len(val_set), config.val_samples, val_rng)

    def prepare(self, sample: TrainSample, rng: np.random.Generator, training: bool) -> Prepared:
        cfg = self.config
        obs = {}
        for sid in self.model.source_ids:
            o = sample.observations.get(sid)
            if o is not None:
                o = o.subset(_subsample(o.n, cfg.max_points_per_source, rng))
            obs[sid] = o
        q = _subsample(len(sample.query_lats), cfg.queries_per_patch, rng)
        obs = {k: v for k, v in obs.items() if v is not None}
        ctx = self.model.context(sample.background, obs, sample.query_lats[q], sample.query_lons[q])
        exclude: Set[str] = set()
        if training:
            drop = rng.random(len(self.model.source_ids)) < cfg.dropout
            exclude = {sid for sid, d in zip(self.model.source_ids, drop) if d}
        target = sample.target[q]
        return Prepared(ctx, target, np.ones(len(target), dtype=bool), exclude)

    def validation_loss(self, model: AssimModel) -> float:
        if not len(self.val_indices):
            return float('nan')
        losses = []
        for i in self.val_indices:
            rng = np.random.default_rng([self.seed, 13, int(i)])
            p = self.prepare(self.val_set.sample(int(i)), rng, training=False)
            if p.target.shape[0] == 0:
                continue
            loss, _ = model.loss_and_grads(p.ctx, p.target, p.mask)
            losses.append(loss)
        return float(np.mean(losses)) if losses else float('nan')

    def _batch_grads(self, model: AssimModel, batch: List[Prepared]) -> Tuple[float, Dict[str, np.ndarray]]:
        results = Parallel(n_jobs=self.n_jobs, backend='threading')(
            delayed(model.loss_and_grads)(p.ctx, p.target, p.mask, p.exclude) for p in batch
        )
        total: Dict[str, np.ndarray] = {}
        for _, grads in results:
            for name, g in grads.items():
                total[name] = total[name] + g if name in total else g.copy()
        n = len(results)
        return float(np.mean([loss for loss, _ in results])), {k: v / n for k, v in total.items()}

    def _checkpoint(self, model: AssimModel, name: str, extra: Optional[Dict] = None) -> None:
        if self.out_dir is None:
            return
        meta = {'dropout': self.config.dropout}
        meta.update(extra or {})
        save_model(self.out_dir / name, model, self.config_hash, meta)

    def fit(self) -> TrainResult:
        cfg = self.config
        model = self.model
        params = model.tensors()
        state = AdamState.zeros_like(params, cfg.beta1, cfg.beta2, cfg.eps)
        rng = np.random.default_rng([self.seed, 7])

        best_val = self.validation_loss(model)
        best_model, best_epoch = model, 0
        rows = [{'epoch': 0, 'lr': lr_at(self.schedule, 0), 'train_loss': float('nan'), 'val_loss': best_val}]
        logger.info(f'initial validation loss {best_val:.6f}, {model.param_count()} parameters')
        self._checkpoint(model, 'best.ckpt', {'epoch': 0, 'val_loss': best_val})

        stale = 0
        stopped_early = False
        n_train = len(self.train_set)
        for epoch in range(1, cfg.epochs + 1):
            lr = lr_at(self.schedule, epoch - 1)
            order = rng.choice(n_train, size=min(cfg.samples_per_epoch, n_train), replace=False)
            losses = []
            with self.monitoring.time_epoch():
                for start in range(0, len(order), cfg.batch_size):
                    batch = []
                    for i in order[start:start + cfg.batch_size]:
                        p = self.prepare(self.train_set.sample(int(i)), rng, training=True)
                        if p.target.shape[0]:
                            batch.append(p)
                    if not batch:
                        continue
                    loss, grads = self._batch_grads(model, batch)
                    try:
                        if not np.isfinite(loss):
                            raise NumericalError('non-finite training loss',
                                                 diagnostics={'epoch': epoch, 'batch_start': int(start)})
                        params, state = adam_step(state, params, grads, lr)
                    except NumericalError as e:
                        e.diagnostics.setdefault('epoch', epoch)
                        self._checkpoint(model, 'last.ckpt', {'epoch': epoch - 1, 'aborted': True})
                        logger.error(f'training aborted at epoch {epoch}: {e} {e.diagnostics}')
                        raise
                    model = model.with_tensors(params)
                    losses.append(loss)

            train_loss = float(np.mean(losses)) if losses else float('nan')
            val_loss = self.validation_loss(model)
            rows.append({'epoch': epoch, 'lr': lr, 'train_loss': train_loss, 'val_loss': val_loss})
            self.monitoring.record_epoch(train_loss, val_loss)
            logger.info(f'epoch {epoch}/{cfg.epochs} lr={lr:.3g} train={train_loss:.6f} val={val_loss:.6f}')

            if val_loss < best_val or not np.isfinite(best_val):
                best_val, best_model, best_epoch, stale = val_loss, model, epoch, 0
                self._checkpoint(model, 'best.ckpt', {'epoch': epoch, 'val_loss': val_loss})
            else:
                stale += 1
                if cfg.patience and stale >= cfg.patience:
                    logger.info(f'early stop after {epoch} epochs, best epoch {best_epoch}')
                    stopped_early = True
                    break

        history = pd.DataFrame(rows, columns=HISTORY_COLUMNS)
        self._checkpoint(model, 'last.ckpt', {'epoch': int(history['epoch'].iloc[-1])})
        if self.out_dir is not None:
            history.to_csv(self.out_dir / 'history.csv', index=False, float_format='%.8g')
        return TrainResult(best_model, model, history, best_epoch, best_val, stopped_early)


def train_model(config: ExperimentConfig, store: DayStore, out_dir: Optional[Path] = None, n_jobs: int = 1,
                monitoring: Optional[PipelineMonitoring] = None, seed: Optional[int] = None) -> TrainResult:
    """Fit normalization, build the model and train it on the configured splits"""
    seed = config.run.seed if seed is None else seed
    monitoring = monitoring or PipelineMonitoring()
    lead = config.forecast.lead
    train_days = usable_days(config.world.train_days, lead)
    val_days = usable_days(config.world.val_days, lead)

    norm = fit_norm_stats(train_days, store)
    p = config.partition
    patches = ocean_patches(partition_domain(store.fine, (p.patch_lat, p.patch_lon),
                                             (p.overlap_lat, p.overlap_lon)), store)
    model = AssimModel.build(list(store.schemas.values()), config.model, norm, np.random.default_rng([seed, 3]))
    logger.info(f'training on {len(train_days)} days x {len(patches)} patches, '
                f'validating on {len(val_days)} days')

    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    trainer = Trainer(model, build_dataset(train_days, store, patches, norm),
                      build_dataset(val_days, store, patches, norm), config.train, seed, n_jobs,
                      monitoring, out_dir, config.stage_hash('train'))
    start = time.time()
    result = trainer.fit()
    monitoring.record_training_metrics(config.run.experiment_id, time.time() - start,
                                       {k: result.history[k].tolist() for k in ('train_loss', 'val_loss')},
                                       {'n_params': result.model.param_count(),
                                        'latent_dim': config.model.latent_dim,
                                        'epochs': config.train.epochs,
                                        'best_epoch': result.best_epoch})
    return result
