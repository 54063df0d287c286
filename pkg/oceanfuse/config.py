import configparser
import hashlib
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from .errors import ConfigError

SUPPORTED_ACTIVATIONS = ('silu',)


def _split_csv(value):
    if isinstance(value, str):
        return [v.strip() for v in value.split(',') if v.strip()]
    return value


class LandShape(BaseModel):
    model_config = ConfigDict(extra='forbid', frozen=True)

    kind: str  # ellipse | rect
    lat: float
    lon: float
    half_lat: float
    half_lon: float

    @field_validator('kind')
    @classmethod
    def _known_kind(cls, v: str) -> str:
        if v not in ('ellipse', 'rect'):
            raise ValueError(f"unknown land shape '{v}'")
        return v

    @classmethod
    def parse(cls, text: str) -> 'LandShape':
        parts = text.split(':')
        if len(parts) != 5:
            raise ValueError(f"land shape '{text}' must be kind:lat:lon:half_lat:half_lon")
        return cls(kind=parts[0].strip(), lat=parts[1], lon=parts[2],
                   half_lat=parts[3], half_lon=parts[4])

    def render(self) -> str:
        return f"{self.kind}:{self.lat!r}:{self.lon!r}:{self.half_lat!r}:{self.half_lon!r}"


class _Section(BaseModel):
    model_config = ConfigDict(extra='forbid', validate_assignment=True)


class WorldConfig(_Section):
    lat_min: float = 10.0
    lat_max: float = 70.0
    lon_min: float = 0.0
    lon_max: float = 360.0
    periodic_lon: bool = True
    fine_res: float = 0.5
    ratio: int = 4
    n_days: int = 480
    year_length: int = 360
    train_days: Tuple[int, int] = (0, 360)
    val_days: Tuple[int, int] = (360, 420)
    test_days: Tuple[int, int] = (420, 480)

    # Eddy population
    n_eddies: int = 40
    eddy_amp_min: float = 0.05
    eddy_amp_max: float = 0.3
    eddy_radius_min: float = 1.0
    eddy_radius_max: float = 2.5
    drift_min: float = -0.25
    drift_max: float = -0.05
    meander_amp: float = 0.5
    meander_period: float = 60.0

    # Zonal jet
    jet_lat: float = 40.0
    jet_width: float = 3.0
    jet_amp: float = 0.4
    jet_meander_amp: float = 1.5
    jet_meander_wavenumber: int = 3
    jet_meander_speed: float = 0.5

    # Seasonal cycle and coupling
    seasonal_ssh_amp: float = 0.05
    seasonal_t_amp: float = 2.0
    season_period: float = 360.0
    alpha: float = 5.0
    beta: float = 1.0
    g_prime: float = 6.73e4
    eps_f: float = 0.1
    earth_radius: float = 6.371e6
    t_equator: float = 28.0
    t_pole: float = 0.0
    s0: float = 35.0

    landmasses: List[LandShape] = [
        LandShape(kind='ellipse', lat=22.0, lon=100.0, half_lat=10.0, half_lon=25.0),
        LandShape(kind='rect', lat=25.0, lon=265.0, half_lat=10.0, half_lon=20.0),
        LandShape(kind='ellipse', lat=62.0, lon=200.0, half_lat=8.0, half_lon=30.0),
    ]
    min_ocean_fraction: float = 0.5
    max_ocean_fraction: float = 0.95

    @field_validator('train_days', 'val_days', 'test_days', mode='before')
    @classmethod
    def _parse_range(cls, v):
        return _split_csv(v)

    @field_validator('landmasses', mode='before')
    @classmethod
    def _parse_landmasses(cls, v):
        if isinstance(v, str):
            return [LandShape.parse(s) for s in v.split(';') if s.strip()]
        return v

    @model_validator(mode='after')
    def _check(self) -> 'WorldConfig':
        if self.ratio < 2:
            raise ValueError('ratio must be an integer >= 2')
        if self.lat_min < -90 or self.lat_max > 90 or self.lat_min >= self.lat_max:
            raise ValueError('latitude extent must lie inside [-90, 90]')
        if self.periodic_lon and abs((self.lon_max - self.lon_min) - 360.0) > 1e-9:
            raise ValueError('periodic longitude requires a 360 degree extent')
        for name in ('train_days', 'val_days', 'test_days'):
            lo, hi = getattr(self, name)
            if lo < 0 or hi <= lo or hi > self.n_days:
                raise ValueError(f'{name} must be a non-empty range inside [0, n_days]')
        return self

    @property
    def coarse_res(self) -> float:
        return self.fine_res * self.ratio


class ForecastConfig(_Section):
    lead: int = 3
    drift_factor: float = 1.2
    decay: float = 0.97
    error_scale: float = 0.01
    error_corr_deg: float = 3.0
    residual_decay: float = 0.95

    @model_validator(mode='after')
    def _check(self) -> 'ForecastConfig':
        if not 0 < self.decay <= 1:
            raise ValueError('decay must lie in (0, 1]')
        if self.drift_factor <= 0:
            raise ValueError('drift_factor must be positive')
        if self.error_scale < 0 or self.error_corr_deg <= 0:
            raise ValueError('error field scale must be >= 0 and correlation length > 0')
        if self.lead < 0:
            raise ValueError('lead must be >= 0')
        return self

    @classmethod
    def identity(cls) -> 'ForecastConfig':
        return cls(drift_factor=1.0, decay=1.0, error_scale=0.0, residual_decay=1.0)


class ObsConfig(_Section):
    sources: List[str] = ['SST', 'SSS', 'SSW', 'SIC', 'SLA', 'INSITU']
    sst_res: float = 0.5
    sss_res: float = 1.0
    ssw_res: float = 1.0
    sic_res: float = 2.0
    sla_spacing: float = 0.5
    insitu_count: int = 400

    sst_noise: float = 0.2
    sss_noise: float = 0.1
    ssw_speed_noise: float = 0.3
    ssw_dir_noise: float = 0.1
    sic_noise: float = 0.02
    sla_noise: float = 0.02
    insitu_t_noise: float = 0.05
    insitu_s_noise: float = 0.02

    swath_spacing_deg: float = 40.0
    swath_width_deg: float = 14.0
    swath_shift_deg: float = 24.7
    swath_slope: float = 0.6
    n_tracks: int = 12
    track_amp_deg: float = 8.0
    track_wavelength_deg: float = 60.0
    track_shift_deg: float = 13.3
    polar_lat: float = 55.0
    sic_edge_lat: float = 62.0
    sic_season_amp: float = 4.0
    sic_width: float = 2.0
    wind_gain: float = 8.0

    @field_validator('sources', mode='before')
    @classmethod
    def _parse_sources(cls, v):
        return _split_csv(v)


class PartitionConfig(_Section):
    patch_lat: float = 10.0
    patch_lon: float = 20.0
    overlap_lat: float = 5.0
    overlap_lon: float = 5.0


class ModelConfig(_Section):
    latent_dim: int = 128
    hidden: int = 128
    encoder_depth: int = 6
    decoder_depth: int = 8
    activation: str = 'silu'

    @model_validator(mode='after')
    def _check(self) -> 'ModelConfig':
        if self.latent_dim < 1 or self.hidden < 1:
            raise ValueError('latent_dim and hidden must be >= 1')
        if self.encoder_depth < 2 or self.decoder_depth < 2:
            raise ValueError('encoder_depth and decoder_depth must be >= 2')
        if self.activation not in SUPPORTED_ACTIVATIONS:
            raise ValueError(f"activation must be one of {SUPPORTED_ACTIVATIONS}, got '{self.activation}'")
        return self


class TrainConfig(_Section):
    epochs: int = 30
    base_lr: float = 1e-3
    milestone_fractions: Tuple[float, ...] = (0.4, 0.8, 1.0)
    gamma: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8
    samples_per_epoch: int = 512
    queries_per_patch: int = 256
    max_points_per_source: int = 512
    val_samples: int = 128
    dropout: float = 0.2
    patience: int = 10

    @field_validator('milestone_fractions', mode='before')
    @classmethod
    def _parse_fractions(cls, v):
        return _split_csv(v)

    @model_validator(mode='after')
    def _check(self) -> 'TrainConfig':
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError('epochs must be >= 0 and batch_size >= 1')
        if not 0 <= self.dropout < 1:
            raise ValueError('dropout must lie in [0, 1)')
        if self.base_lr <= 0:
            raise ValueError('base_lr must be positive')
        return self


class EvalConfig(_Section):
    psd_lat_band: Tuple[float, float] = (38.0, 50.0)
    psd_days: int = 10
    psd_top_fraction: float = 1.0 / 3.0
    region: Tuple[float, float, float, float] = (25.0, 45.0, 130.0, 160.0)
    climatology_harmonics: int = 2
    forecast_horizon: int = 10
    forecast_start_days: int = 10

    @field_validator('psd_lat_band', 'region', mode='before')
    @classmethod
    def _parse_tuple(cls, v):
        return _split_csv(v)


class AnalyzeConfig(_Section):
    contribution_days: int = 20
    retrain_per_exclusion: bool = False
    sensitivity_sources: List[str] = ['SST', 'SSS', 'SSW', 'SLA']
    sensitivity_members: int = 50
    sensitivity_day: int = 430
    sigma_mode: str = 'fixed'
    resolution_sources: List[str] = ['SST', 'SSS', 'SSW']
    resolution_factors: Tuple[int, ...] = (1, 2, 4)

    @field_validator('sensitivity_sources', 'resolution_sources', 'resolution_factors', mode='before')
    @classmethod
    def _parse_list(cls, v):
        return _split_csv(v)

    @field_validator('sigma_mode')
    @classmethod
    def _known_mode(cls, v: str) -> str:
        if v not in ('fixed', 'resample'):
            raise ValueError("sigma_mode must be 'fixed' or 'resample'")
        return v


class RunConfig(_Section):
    experiment_id: str = 'twin'
    seed: int = 2024
    out: str = 'runs/twin'
    threads: int = 1
    sequential: bool = False


SECTIONS = {
    'world': WorldConfig,
    'forecast': ForecastConfig,
    'obs': ObsConfig,
    'partition': PartitionConfig,
    'model': ModelConfig,
    'train': TrainConfig,
    'eval': EvalConfig,
    'analyze': AnalyzeConfig,
    'run': RunConfig,
}


def _render_value(value) -> str:
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, LandShape):
        return value.render()
    if isinstance(value, (list, tuple)):
        sep = '; ' if value and isinstance(value[0], LandShape) else ','
        return sep.join(_render_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


class ExperimentConfig(BaseModel):
    """Resolved experiment configuration: one pydantic model per file section."""
    model_config = ConfigDict(extra='forbid')

    world: WorldConfig = WorldConfig()
    forecast: ForecastConfig = ForecastConfig()
    obs: ObsConfig = ObsConfig()
    partition: PartitionConfig = PartitionConfig()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    eval: EvalConfig = EvalConfig()
    analyze: AnalyzeConfig = AnalyzeConfig()
    run: RunConfig = RunConfig()

    @model_validator(mode='after')
    def _check_splits(self) -> 'ExperimentConfig':
        ranges = [self.world.train_days, self.world.val_days, self.world.test_days]
        for i in range(3):
            for j in range(i + 1, 3):
                a, b = ranges[i], ranges[j]
                if a[0] < b[1] and b[0] < a[1]:
                    raise ValueError('train/val/test day ranges must be pairwise disjoint')
        return self

    @classmethod
    def from_file(cls, path: Optional[Path] = None, overrides: Optional[Dict[str, Dict[str, str]]] = None) -> 'ExperimentConfig':
        """Parse a sectioned key=value file; missing keys keep their defaults"""
        raw: Dict[str, Dict[str, str]] = {}
        if path is not None:
            path = Path(path)
            if not path.exists():
                raise ConfigError(f"Config file not found: {path}")
            parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=('#',))
            parser.optionxform = str
            try:
                parser.read(path)
            except configparser.Error as e:
                raise ConfigError(f"Cannot parse config {path}: {e}") from e
            for section in parser.sections():
                if section not in SECTIONS:
                    raise ConfigError(f"Unknown config section [{section}] in {path}")
                raw[section] = dict(parser.items(section))
        for section, values in (overrides or {}).items():
            raw.setdefault(section, {}).update(values)
        try:
            return cls(**raw)
        except ValidationError as e:
            raise ConfigError(f"Invalid configuration: {e}") from e

    def with_overrides(self, section: str, **values) -> 'ExperimentConfig':
        data = self.model_dump()
        data[section].update(values)
        try:
            return ExperimentConfig(**data)
        except ValidationError as e:
            raise ConfigError(f"Invalid configuration override: {e}") from e

    def resolved_text(self) -> str:
        lines: List[str] = []
        for name in SECTIONS:
            section = getattr(self, name)
            lines.append(f'[{name}]')
            for key in type(section).model_fields:
                lines.append(f'{key} = {_render_value(getattr(section, key))}')
            lines.append('')
        return '\n'.join(lines)

    def section_text(self, *names: str) -> str:
        return '\n'.join(
            line for line in self.resolved_text().split('\n\n')
            if line.split('\n', 1)[0].strip('[]') in names
        )

    def config_hash(self) -> str:
        return hashlib.sha256(self.resolved_text().encode('utf-8')).hexdigest()

    def stage_hash(self, stage: str) -> str:
        """Hash of the sections a pipeline stage depends on"""
        chain = {
            'world': ('world', 'forecast'),
            'obs': ('world', 'forecast', 'obs'),
            'train': ('world', 'forecast', 'obs', 'partition', 'model', 'train'),
        }[stage]
        text = self.section_text(*chain) + f'\nseed = {self.run.seed}'
        return hashlib.sha256(text.encode('utf-8')).hexdigest()


class ServiceSettings(BaseSettings):
    """Process-level settings read from OCEANFUSE_* environment variables"""
    model_config = SettingsConfigDict(env_prefix='OCEANFUSE_', extra='ignore')

    env: str = 'development'
    log_level: str = 'INFO'
    log_dir: Path = Path('logs')
    max_log_size: int = 10485760
    log_backup_count: int = 5
    json_logs: bool = False
    threads: int = 1
    sequential: bool = False

    def setup_directories(self):
        """Create necessary directories if they don't exist"""
        self.log_dir.mkdir(parents=True, exist_ok=True)

    def get_log_path(self) -> Path:
        """Get the path for the log file"""
        return self.log_dir / 'oceanfuse.log'

    @property
    def is_development(self) -> bool:
        """Check if running in development mode"""
        return self.env.lower() == 'development'


# Create global settings instance
settings = ServiceSettings()
