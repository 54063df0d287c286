"""Synthetic ocean truth, the toy forecast operator and background generation.

SSH is a sum of drifting Gaussian eddies, a meandering zonal jet and a
seasonal harmonic. U/V follow from analytic SSH derivatives through a
regularized geostrophic balance, T and S are coupled to SSH.
"""
import logging
from dataclasses import dataclass, replace
from typing import Iterable, Optional, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from ..config import ForecastConfig, WorldConfig
from ..errors import DomainError, SchemaError
from .geo import LAND, VARIABLES, GridField, GridSpec, area_average, interpolate_field, make_land_mask

logger = logging.getLogger(__name__)

_DEG = np.pi / 180.0
_POPULATION_STREAM = 0xE0D1


@dataclass(frozen=True)
class EddyPopulation:
    lat0: np.ndarray
    lon0: np.ndarray
    amp: np.ndarray
    radius: np.ndarray
    drift: np.ndarray
    phase: np.ndarray

    @property
    def count(self) -> int:
        return len(self.amp)

    @classmethod
    def draw(cls, config: WorldConfig, seed: int) -> 'EddyPopulation':
        rng = np.random.default_rng([seed, _POPULATION_STREAM])
        n = config.n_eddies
        margin = min(5.0, (config.lat_max - config.lat_min) / 4.0)
        sign = np.where(rng.random(n) < 0.5, -1.0, 1.0)
        return cls(
            lat0=rng.uniform(config.lat_min + margin, config.lat_max - margin, n),
            lon0=rng.uniform(config.lon_min, config.lon_max, n),
            amp=sign * rng.uniform(config.eddy_amp_min, config.eddy_amp_max, n),
            radius=rng.uniform(config.eddy_radius_min, config.eddy_radius_max, n),
            drift=rng.uniform(config.drift_min, config.drift_max, n),
            phase=rng.uniform(0.0, 2.0 * np.pi, n),
        )

    @classmethod
    def single(cls, lat: float, lon: float, amp: float, radius: float, drift: float = 0.0) -> 'EddyPopulation':
        """One eddy with no meander phase, for constructed cases"""
        def one(v):
            return np.array([float(v)])

        return cls(one(lat), one(lon), one(amp), one(radius), one(drift), np.zeros(1))


@dataclass
class SshComponents:
    eta: np.ndarray
    deta_dlat: np.ndarray
    deta_dlon: np.ndarray


class SyntheticWorld:
    """Deterministic world for one (config, seed)"""

    def __init__(self, config: WorldConfig, seed: int, eddies: Optional[EddyPopulation] = None):
        self.config = config
        self.seed = seed
        self.fine = GridSpec(config.lat_min, config.lat_max, config.lon_min, config.lon_max,
                             config.fine_res, config.periodic_lon)
        self.coarse = self.fine.with_res(config.coarse_res)
        self.fine_mask = make_land_mask(self.fine, config)
        self.coarse_mask = make_land_mask(self.coarse, config)
        self.eddies = eddies if eddies is not None else EddyPopulation.draw(config, seed)
        self._lat, self._lon = self.fine.mesh()

    def _dlon(self, lon_center: float) -> np.ndarray:
        d = self._lon - lon_center
        if self.fine.periodic_lon:
            d = np.mod(d + 180.0, 360.0) - 180.0
        return d

    def eddy_centers(self, day: int, lon_offsets: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
        c, e = self.config, self.eddies
        offsets = np.zeros(e.count) if lon_offsets is None else lon_offsets
        lon = e.lon0 + e.drift * day + offsets
        lat = e.lat0
        if c.meander_amp and c.meander_period > 0:
            lat = lat + c.meander_amp * np.sin(2.0 * np.pi * day / c.meander_period + e.phase)
        if self.fine.periodic_lon:
            lon = self.fine.lon_min + np.mod(lon - self.fine.lon_min, 360.0)
        return lat, lon

    def ssh_components(self, day: int, amp_scale: Optional[np.ndarray] = None,
                       lon_offsets: Optional[np.ndarray] = None, jet_offset: float = 0.0) -> SshComponents:
        """SSH and its analytic derivatives (m per degree) on the fine mesh"""
        c, e = self.config, self.eddies
        lat, lon = self._lat, self._lon
        eta = np.zeros(self.fine.shape)
        d_lat = np.zeros(self.fine.shape)
        d_lon = np.zeros(self.fine.shape)

        scale = np.ones(e.count) if amp_scale is None else amp_scale
        clat, clon = self.eddy_centers(day, lon_offsets)
        for k in range(e.count):
            cos_k = np.cos(clat[k] * _DEG)
            dy = lat - clat[k]
            dx = self._dlon(clon[k])
            r2 = e.radius[k] ** 2
            g = scale[k] * e.amp[k] * np.exp(-(dy ** 2 + (dx * cos_k) ** 2) / r2)
            eta += g
            d_lat += -2.0 * g * dy / r2
            d_lon += -2.0 * g * dx * cos_k ** 2 / r2

        if c.jet_amp:
            n, speed = c.jet_meander_wavenumber, c.jet_meander_speed
            arg = n * (lon - speed * day - jet_offset) * _DEG
            axis = c.jet_lat + c.jet_meander_amp * np.sin(arg)
            s = (lat - axis) / c.jet_width
            sech2 = 1.0 / np.cosh(s) ** 2
            eta += c.jet_amp * np.tanh(s)
            d_lat += c.jet_amp * sech2 / c.jet_width
            d_lon += -c.jet_amp * sech2 / c.jet_width * c.jet_meander_amp * n * _DEG * np.cos(arg)

        if c.seasonal_ssh_amp:
            season = np.cos(2.0 * np.pi * day / c.season_period)
            eta += c.seasonal_ssh_amp * np.sin(lat * _DEG) * season
            d_lat += c.seasonal_ssh_amp * np.cos(lat * _DEG) * _DEG * season
        return SshComponents(eta, d_lat, d_lon)

    def _inv_f(self) -> np.ndarray:
        s = np.sin(self._lat * _DEG)
        return s / (s ** 2 + self.config.eps_f ** 2)

    def geostrophic(self, d_lat: np.ndarray, d_lon: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """U, V from SSH gradients given per degree of latitude and longitude"""
        c = self.config
        m_per_deg = c.earth_radius * _DEG
        cos_lat = np.maximum(np.cos(self._lat * _DEG), 1e-6)
        deta_dy = d_lat / m_per_deg
        deta_dx = d_lon / (m_per_deg * cos_lat)
        inv_f = self._inv_f()
        return -c.g_prime * inv_f * deta_dy, c.g_prime * inv_f * deta_dx

    def coupled_values(self, eta: np.ndarray, u: np.ndarray, v: np.ndarray, day: int) -> np.ndarray:
        c = self.config
        phi = self._lat * _DEG
        t = c.t_pole + (c.t_equator - c.t_pole) * np.cos(phi) ** 2 + c.alpha * eta
        if c.seasonal_t_amp:
            t = t + c.seasonal_t_amp * np.sin(phi) * np.cos(2.0 * np.pi * day / c.season_period)
        s = c.s0 - c.beta * eta
        return np.stack([t, s, u, v, eta], axis=-1)

    def analytic_values(self, day: int, amp_scale=None, lon_offsets=None, jet_offset: float = 0.0) -> np.ndarray:
        comp = self.ssh_components(day, amp_scale, lon_offsets, jet_offset)
        u, v = self.geostrophic(comp.deta_dlat, comp.deta_dlon)
        return self.coupled_values(comp.eta, u, v, day)

    def field(self, values: np.ndarray, day: int) -> GridField:
        values = values.copy()
        values[~self.fine_mask] = LAND
        return GridField(self.fine, VARIABLES, values, self.fine_mask.copy(), day)

    def truth_state(self, day: int) -> GridField:
        if day < 0:
            raise DomainError(f'day must be >= 0, got {day}')
        return ForecastState.from_truth(self, day).render()

    def model_error(self, rng: np.random.Generator, fp: ForecastConfig) -> np.ndarray:
        """Smooth SSH-like error mapped onto all five variables"""
        res = self.fine.res
        mode = ('nearest', 'wrap' if self.fine.periodic_lon else 'nearest')
        e = gaussian_filter(rng.standard_normal(self.fine.shape), sigma=fp.error_corr_deg / res, mode=mode)
        std = e.std()
        e = fp.error_scale * e / std if std > 0 else np.zeros_like(e)
        d_lat = np.gradient(e, res, axis=0)
        if self.fine.periodic_lon:
            d_lon = (np.roll(e, -1, axis=1) - np.roll(e, 1, axis=1)) / (2.0 * res)
        else:
            d_lon = np.gradient(e, res, axis=1)
        u, v = self.geostrophic(d_lat, d_lon)
        c = self.config
        out = np.stack([c.alpha * e, -c.beta * e, u, v, e], axis=-1)
        out[~self.fine_mask] = 0.0
        return out


@dataclass
class ForecastState:
    """What the toy forecast model advances.

    The analytic part is carried as per-eddy amplitude scales and longitude
    offsets plus a jet phase offset; departures of the initial condition from
    the analytic state live in `residual`, accumulated model error in `error`.
    """
    world: SyntheticWorld
    day: int
    amp_scale: np.ndarray
    lon_offsets: np.ndarray
    jet_offset: float
    residual: np.ndarray
    error: np.ndarray

    @classmethod
    def from_truth(cls, world: SyntheticWorld, day: int) -> 'ForecastState':
        n = world.eddies.count
        zeros = np.zeros(world.fine.shape + (len(VARIABLES),))
        return cls(world, day, np.ones(n), np.zeros(n), 0.0, zeros, zeros.copy())

    @classmethod
    def from_field(cls, world: SyntheticWorld, ic: GridField, day: Optional[int] = None) -> 'ForecastState':
        """Start a forecast from any field (truth, background or analysis)"""
        day = ic.day if day is None else day
        if tuple(ic.variables) != VARIABLES:
            ic = ic.select(VARIABLES)
        if ic.spec != world.fine:
            ic = interpolate_field(ic, world.fine, world.fine_mask)
        state = cls.from_truth(world, day)
        residual = ic.values - world.analytic_values(day)
        residual[~world.fine_mask] = 0.0
        if not np.isfinite(residual).all():
            raise SchemaError('initial condition has non-finite ocean values')
        state.residual = residual
        return state

    def render(self) -> GridField:
        values = self.world.analytic_values(self.day, self.amp_scale, self.lon_offsets, self.jet_offset)
        return self.world.field(values + self.residual + self.error, self.day)


def forecast_step(state: ForecastState, fp: ForecastConfig, rng_seed: int) -> ForecastState:
    """Advance one day with perturbed drift, amplitude decay and added model error"""
    world = state.world
    extra = fp.drift_factor - 1.0
    error = state.error
    if fp.error_scale > 0:
        rng = np.random.default_rng(np.random.SeedSequence([rng_seed, state.day]))
        error = error + world.model_error(rng, fp)
    return replace(
        state,
        day=state.day + 1,
        amp_scale=state.amp_scale * fp.decay,
        lon_offsets=state.lon_offsets + extra * world.eddies.drift,
        jet_offset=state.jet_offset + extra * world.config.jet_meander_speed,
        residual=state.residual * fp.residual_decay,
        error=error,
    )


def run_forecast(state: ForecastState, fp: ForecastConfig, rng_seed: int, steps: int) -> Iterable[ForecastState]:
    """Yield the states after 1..steps forecast days"""
    for _ in range(steps):
        state = forecast_step(state, fp, rng_seed)
        yield state


def make_background(day: int, lead: int, world: SyntheticWorld, fp: ForecastConfig, rng_seed: int) -> GridField:
    """Coarse area-average of a `lead`-day forecast started from truth at day - lead"""
    if day < lead:
        raise DomainError(f'background for day {day} needs day >= lead ({lead})')
    state = ForecastState.from_truth(world, day - lead)
    for state in run_forecast(state, fp, rng_seed, lead):
        pass
    return area_average(state.render(), world.coarse, world.coarse_mask)


def truth_state(day: int, config: WorldConfig, seed: int) -> GridField:
    return SyntheticWorld(config, seed).truth_state(day)


def sla_reference(world: SyntheticWorld, days: Iterable[int]) -> np.ndarray:
    """Mean truth SSH over `days` on the fine grid (land NaN)"""
    total = np.zeros(world.fine.shape)
    n = 0
    for day in days:
        total += world.ssh_components(day).eta
        n += 1
    if n == 0:
        raise DomainError('SLA reference needs at least one day')
    ref = total / n
    ref[~world.fine_mask] = LAND
    return ref
