import numpy as np
import pytest

from oceanfuse.config import ExperimentConfig, ForecastConfig, LandShape, ModelConfig, ObsConfig, WorldConfig
from oceanfuse.services.data_pipeline import NormStats, SimulatedDayStore
from oceanfuse.services.geo import LAND, VARIABLES, GridField, GridSpec
from oceanfuse.services.observations import default_schemas
from oceanfuse.services.world import SyntheticWorld, sla_reference

TINY_LAND = [
    LandShape(kind='ellipse', lat=35.0, lon=90.0, half_lat=10.0, half_lon=70.0),
    LandShape(kind='rect', lat=30.0, lon=250.0, half_lat=8.0, half_lon=25.0),
]


def tiny_world_config(**overrides) -> WorldConfig:
    """2 degree truth over 20-60N, 40 days"""
    values = dict(
        lat_min=20.0, lat_max=60.0, fine_res=2.0, ratio=2, n_days=40,
        train_days=(0, 20), val_days=(20, 30), test_days=(30, 40),
        n_eddies=6, eddy_radius_min=3.0, eddy_radius_max=6.0,
        jet_lat=45.0, landmasses=TINY_LAND,
    )
    values.update(overrides)
    return WorldConfig(**values)


def tiny_obs_config(**overrides) -> ObsConfig:
    values = dict(sst_res=2.0, sss_res=2.0, ssw_res=2.0, sic_res=4.0, sla_spacing=2.0, insitu_count=40,
                  polar_lat=50.0)
    values.update(overrides)
    return ObsConfig(**values)


def tiny_model_config() -> ModelConfig:
    return ModelConfig(latent_dim=4, hidden=8, encoder_depth=2, decoder_depth=3)


def tiny_experiment(tmp_path=None, **sections) -> ExperimentConfig:
    data = {
        'world': tiny_world_config().model_dump(),
        'obs': tiny_obs_config().model_dump(),
        'model': tiny_model_config().model_dump(),
        'train': dict(epochs=2, samples_per_epoch=8, batch_size=4, queries_per_patch=16,
                      max_points_per_source=32, val_samples=4, patience=0),
        'eval': dict(psd_lat_band=(46.0, 54.0), psd_days=3, forecast_horizon=3, forecast_start_days=2,
                     region=(40.0, 56.0, 150.0, 200.0), climatology_harmonics=0),
        'analyze': dict(contribution_days=2, sensitivity_members=3, sensitivity_day=32,
                        resolution_factors=(1, 2)),
        'run': dict(experiment_id='tiny', seed=7),
    }
    if tmp_path is not None:
        data['run']['out'] = str(tmp_path / 'run')
    for name, values in sections.items():
        data.setdefault(name, {}).update(values)
    return ExperimentConfig(**data)


@pytest.fixture(scope='session')
def world_config() -> WorldConfig:
    return tiny_world_config()


@pytest.fixture(scope='session')
def world(world_config) -> SyntheticWorld:
    return SyntheticWorld(world_config, seed=7)


@pytest.fixture(scope='session')
def obs_config() -> ObsConfig:
    return tiny_obs_config()


@pytest.fixture(scope='session')
def schemas(obs_config):
    return default_schemas(obs_config)


@pytest.fixture(scope='session')
def sla_ref(world) -> GridField:
    ref = sla_reference(world, range(0, 20))
    return GridField(world.fine, ('SSH',), ref[..., None], world.fine_mask, 0)


@pytest.fixture
def store(world, obs_config, schemas, sla_ref) -> SimulatedDayStore:
    return SimulatedDayStore(world, ForecastConfig(lead=2), obs_config, schemas, seed=7, sla_ref=sla_ref)


@pytest.fixture
def small_grid() -> GridSpec:
    return GridSpec(0.0, 10.0, 0.0, 20.0, 1.0, False)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


def random_field(spec: GridSpec, rng: np.random.Generator, variables=VARIABLES, land_fraction: float = 0.2,
                 day: int = 0) -> GridField:
    mask = rng.random(spec.shape) >= land_fraction
    values = rng.standard_normal(spec.shape + (len(variables),))
    values[~mask] = LAND
    return GridField(spec, tuple(variables), values, mask, day)


def identity_norm(schemas) -> NormStats:
    return NormStats.identity(list(schemas.values()))
