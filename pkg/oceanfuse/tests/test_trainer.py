import json

import numpy as np
import pytest

from oceanfuse.config import TrainConfig
from oceanfuse.errors import NumericalError
from oceanfuse.services.assim_model import AssimModel, load_model
from oceanfuse.services.data_pipeline import PatchDataset, SimulatedDayStore, fit_norm_stats
from oceanfuse.services.geo import GridField
from oceanfuse.services.monitoring import PipelineMonitoring
from oceanfuse.services.observations import default_schemas
from oceanfuse.services.partition import partition_domain
from oceanfuse.services.storage import read_checkpoint
from oceanfuse.services.trainer import HISTORY_COLUMNS, Trainer, ocean_patches, train_model
from oceanfuse.services.world import SyntheticWorld, sla_reference
from oceanfuse.tests.conftest import tiny_experiment, tiny_model_config


@pytest.fixture(scope='module')
def experiment():
    return tiny_experiment(world={'train_days': (0, 8), 'val_days': (20, 24)}, forecast={'lead': 2})


@pytest.fixture(scope='module')
def exp_store(experiment):
    world = SyntheticWorld(experiment.world, experiment.run.seed)
    ref = sla_reference(world, range(*experiment.world.train_days))
    return SimulatedDayStore(world, experiment.forecast, experiment.obs, default_schemas(experiment.obs),
                             experiment.run.seed, GridField(world.fine, ('SSH',), ref[..., None], world.fine_mask))


def test_ocean_patches_drop_all_land(exp_store):
    patches = partition_domain(exp_store.fine, (10, 20), (5, 5))
    kept = ocean_patches(patches, exp_store)
    assert 0 < len(kept) < len(patches)


def test_train_model_writes_artifacts(tmp_path, experiment, exp_store):
    monitoring = PipelineMonitoring(metrics_dir=tmp_path / 'metrics')
    result = train_model(experiment, exp_store, tmp_path / 'ckpt', monitoring=monitoring)

    assert list(result.history.columns) == HISTORY_COLUMNS
    assert result.history['epoch'].tolist() == [0, 1, 2]
    assert np.isnan(result.history['train_loss'].iloc[0])
    assert np.isfinite(result.history['val_loss']).all()
    assert result.best_val == pytest.approx(result.history['val_loss'].min())

    for name in ('best.ckpt', 'last.ckpt', 'history.csv'):
        assert (tmp_path / 'ckpt' / name).exists()
    _, _, meta = read_checkpoint(tmp_path / 'ckpt' / 'best.ckpt', experiment.stage_hash('train'))
    assert meta['epoch'] == result.best_epoch
    assert meta['dropout'] == experiment.train.dropout
    model, _ = load_model(tmp_path / 'ckpt' / 'last.ckpt', exp_store.schemas)
    assert model.param_count() == result.last_model.param_count()

    saved = json.loads((tmp_path / 'metrics' / 'tiny_training_metrics.json').read_text())
    assert saved[0]['parameters']['n_params'] == result.model.param_count()
    assert monitoring.get_summary()['model_parameter_count'] == result.model.param_count()


def test_training_is_reproducible(experiment, exp_store):
    a = train_model(experiment, exp_store)
    b = train_model(experiment, exp_store)
    np.testing.assert_array_equal(a.history['val_loss'].to_numpy(), b.history['val_loss'].to_numpy())
    for name, t in a.model.tensors().items():
        np.testing.assert_array_equal(t, b.model.tensors()[name])


def _single_patch_sets(store, norm):
    patch = partition_domain(store.fine, (10, 20), (5, 5))[134]
    return PatchDataset([4], [patch], store, norm), PatchDataset([4], [patch], store, norm)


def test_overfits_one_patch(exp_store):
    norm = fit_norm_stats([2, 3, 4], exp_store)
    model = AssimModel.build(list(exp_store.schemas.values()), tiny_model_config(), norm,
                             np.random.default_rng(0), dtype=np.float64)
    train_set, val_set = _single_patch_sets(exp_store, norm)
    config = TrainConfig(epochs=150, base_lr=1e-2, batch_size=1, samples_per_epoch=1, queries_per_patch=0,
                         max_points_per_source=0, val_samples=1, dropout=0.0, patience=0,
                         milestone_fractions=(0.9,))
    result = Trainer(model, train_set, val_set, config, seed=1).fit()
    initial = result.history['val_loss'].iloc[0]
    assert result.best_val < 0.8 * initial
    assert not result.stopped_early


class ScriptedTrainer(Trainer):
    """Validation losses read from a list instead of the model"""

    def __init__(self, *args, losses, **kwargs):
        super().__init__(*args, **kwargs)
        self.losses = iter(losses)

    def validation_loss(self, model):
        return next(self.losses)


def test_early_stopping_keeps_best_epoch(exp_store):
    norm = fit_norm_stats([2, 3], exp_store)
    model = AssimModel.build(list(exp_store.schemas.values()), tiny_model_config(), norm,
                             np.random.default_rng(0))
    train_set, val_set = _single_patch_sets(exp_store, norm)
    config = TrainConfig(epochs=20, batch_size=1, samples_per_epoch=1, val_samples=1, dropout=0.0, patience=2)
    trainer = ScriptedTrainer(model, train_set, val_set, config, seed=1, losses=[1.0, 0.5, 0.6, 0.7, 0.1])
    result = trainer.fit()
    assert result.stopped_early
    assert result.history['epoch'].tolist() == [0, 1, 2, 3]
    assert result.best_epoch == 1 and result.best_val == 0.5


def test_non_finite_loss_aborts_with_checkpoint(tmp_path, exp_store):
    norm = fit_norm_stats([2, 3], exp_store)
    model = AssimModel.build(list(exp_store.schemas.values()), tiny_model_config(), norm,
                             np.random.default_rng(0))
    _, val_set = _single_patch_sets(exp_store, norm)
    broken = fit_norm_stats([2, 3], exp_store)
    broken.inc_std = np.full_like(broken.inc_std, np.nan)
    train_set, _ = _single_patch_sets(exp_store, broken)
    config = TrainConfig(epochs=3, batch_size=1, samples_per_epoch=1, val_samples=1, dropout=0.0)
    trainer = Trainer(model, train_set, val_set, config, seed=1, out_dir=tmp_path, config_hash='d' * 64)
    with pytest.raises(NumericalError) as exc:
        trainer.fit()
    assert exc.value.diagnostics['epoch'] == 1
    _, _, meta = read_checkpoint(tmp_path / 'last.ckpt')
    assert meta['aborted'] is True and meta['epoch'] == 0


def test_monitoring_counters():
    monitoring = PipelineMonitoring()
    with monitoring.time_assimilation('full') as timer:
        pass
    assert timer.duration >= 0
    monitoring.record_cache_operation('day', True)
    monitoring.record_cache_operation('day', False)
    monitoring.record_cache_operation('day', True)
    assert monitoring.cache_hit_rate('day') == pytest.approx(2 / 3)
    monitoring.record_error('train', 'NumericalError')
    summary = monitoring.get_summary()
    assert summary['assimilations_total{mode=full}'] == 1.0
    assert summary['pipeline_errors_total{error_type=NumericalError,stage=train}'] == 1.0
