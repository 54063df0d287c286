import json
import logging
import time
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Optional

from prometheus_client import CollectorRegistry, Counter, Gauge, Histogram

logger = logging.getLogger(__name__)


class _Timer:
    def __init__(self, histogram):
        self.histogram = histogram
        self.duration = 0.0

    def __enter__(self):
        self.start = time.time()
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.duration = time.time() - self.start
        self.histogram.observe(self.duration)


class PipelineMonitoring:
    def __init__(self, metrics_dir: Optional[Path] = None, registry: Optional[CollectorRegistry] = None):
        self.registry = registry or CollectorRegistry()

        # Assimilation Metrics
        self.assimilations = Counter(
            'assimilations_total',
            'Total number of assimilated days',
            ['mode'],
            registry=self.registry
        )

        self.errors = Counter(
            'pipeline_errors_total',
            'Total number of pipeline errors',
            ['stage', 'error_type'],
            registry=self.registry
        )

        self.assimilation_latency = Histogram(
            'assimilation_latency_seconds',
            'Time spent assimilating one day',
            ['mode'],
            buckets=(0.1, 0.5, 1.0, 5.0, 30.0, 120.0),
            registry=self.registry
        )

        # Training Metrics
        self.epoch_duration = Histogram(
            'epoch_duration_seconds',
            'Time spent per training epoch',
            buckets=(1, 10, 30, 60, 300, 900),
            registry=self.registry
        )

        self.training_loss = Gauge(
            'training_loss',
            'Masked MSE of normalized increments',
            ['phase'],  # phase: train or val
            registry=self.registry
        )

        self.parameter_count = Gauge(
            'model_parameter_count',
            'Number of trainable parameters',
            registry=self.registry
        )

        # Cache Metrics
        self.cache_hits = Counter(
            'cache_hits_total',
            'Total number of day cache hits',
            ['type'],
            registry=self.registry
        )

        self.cache_misses = Counter(
            'cache_misses_total',
            'Total number of day cache misses',
            ['type'],
            registry=self.registry
        )

        self.metrics_dir = Path(metrics_dir) if metrics_dir is not None else None

    def time_assimilation(self, mode: str) -> _Timer:
        """Context manager timing one assimilated day"""
        self.assimilations.labels(mode=mode).inc()
        return _Timer(self.assimilation_latency.labels(mode=mode))

    def time_epoch(self) -> _Timer:
        return _Timer(self.epoch_duration)

    def record_error(self, stage: str, error_type: str) -> None:
        """Record a pipeline error"""
        self.errors.labels(stage=stage, error_type=error_type).inc()
        logger.error(f"{stage} failed: {error_type}")

    def record_cache_operation(self, cache_type: str, hit: bool) -> None:
        """Record cache hit/miss"""
        if hit:
            self.cache_hits.labels(type=cache_type).inc()
        else:
            self.cache_misses.labels(type=cache_type).inc()

    def record_epoch(self, train_loss: float, val_loss: float) -> None:
        self.training_loss.labels(phase='train').set(train_loss)
        self.training_loss.labels(phase='val').set(val_loss)

    def record_training_metrics(
        self,
        run_id: str,
        duration: float,
        history: Dict[str, Any],
        parameters: Dict[str, Any]
    ) -> None:
        """Record training metrics"""
        if 'n_params' in parameters:
            self.parameter_count.set(parameters['n_params'])
        metrics = {
            'timestamp': datetime.now().isoformat(),
            'run_id': run_id,
            'duration': duration,
            'history': {k: [float(v) for v in vals] for k, vals in history.items()},
            'parameters': parameters,
        }
        self._save_metrics(run_id, 'training_metrics', metrics)

    def cache_hit_rate(self, cache_type: str) -> float:
        hits = self.registry.get_sample_value('cache_hits_total', {'type': cache_type}) or 0.0
        misses = self.registry.get_sample_value('cache_misses_total', {'type': cache_type}) or 0.0
        return float(hits / max(1, hits + misses))

    def get_summary(self) -> Dict[str, Any]:
        """Current value of every sample in the registry"""
        summary = {}
        for metric in self.registry.collect():
            for sample in metric.samples:
                labels = ','.join(f'{k}={v}' for k, v in sorted(sample.labels.items()))
                key = f'{sample.name}{{{labels}}}' if labels else sample.name
                summary[key] = sample.value
        return summary

    def _save_metrics(self, run_id: str, metric_type: str, data: Dict) -> None:
        """Save detailed metrics to file"""
        if self.metrics_dir is None:
            return
        self.metrics_dir.mkdir(parents=True, exist_ok=True)
        metrics_file = self.metrics_dir / f'{run_id}_{metric_type}.json'

        # Load existing metrics if file exists
        if metrics_file.exists():
            with open(metrics_file, 'r') as f:
                existing_data = json.load(f)
                if isinstance(existing_data, list):
                    existing_data.append(data)
                else:
                    existing_data = [existing_data, data]
        else:
            existing_data = [data]

        # Save updated metrics
        with open(metrics_file, 'w') as f:
            json.dump(existing_data, f, indent=2)

    def save_snapshot(self, run_id: str, stage: str) -> None:
        self._save_metrics(run_id, f'{stage}_snapshot', {
            'timestamp': datetime.now().isoformat(),
            'metrics': self.get_summary(),
        })
