"""Synthetic geometric multipath channel generator.

Sum-of-paths construction over a half-wavelength UPA: per path a complex gain,
an excess delay, a Doppler shift, and departure angles. Temporal correlation
comes only from Doppler phases and space-frequency correlation only from
angle/delay structure, so the ensemble autocorrelation separates into a
temporal factor times a spectro-spatial factor by construction.

Sample generation is keyed by (seed, sample id) through a counter-based
Philox stream, so datasets are reproducible under any parallel split.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0


@dataclass(frozen=True)
class ScenarioConfig:
    T: int = 14
    n_h: int = 8
    n_v: int = 4
    F: int = 32
    subcarrier_spacing_hz: float = 30e3
    cp_overhead: float = 288.0 / 4096.0  # normal cyclic prefix
    carrier_hz: float = 3.5e9
    speed_range_mps: tuple[float, float] = (8.0, 30.0)
    path_count_range: tuple[int, int] = (4, 10)
    los_prob: float = 0.45
    rician_k_db_range: tuple[float, float] = (6.0, 12.0)
    shadowing_sigma_db: float = 6.0
    pathloss_exponent: float = 3.0
    distance_range_m: tuple[float, float] = (25.0, 400.0)
    delay_spread_s: float = 200e-9
    min_excess_delay_s: float = 50e-9
    cluster_count_range: tuple[int, int] = (2, 4)
    cluster_angle_spread_deg: float = 6.0
    azimuth_range_deg: tuple[float, float] = (-60.0, 60.0)
    elevation_range_deg: tuple[float, float] = (-20.0, 20.0)
    seed: int = 0

    @property
    def S(self) -> int:
        return self.n_h * self.n_v

    @property
    def symbol_duration_s(self) -> float:
        return (1.0 + self.cp_overhead) / self.subcarrier_spacing_hz

    @property
    def cp_duration_s(self) -> float:
        return self.cp_overhead / self.subcarrier_spacing_hz

    def validate(self):
        if self.T < 1 or self.F < 1 or self.n_h < 1 or self.n_v < 1:
            raise ValueError("grid dims must be positive")
        if self.path_count_range[0] < 1:
            raise ValueError("path count range must allow at least one path")
        if not 0.0 <= self.los_prob <= 1.0:
            raise ValueError("los_prob out of [0,1]")


@dataclass
class PathSet:
    """Per-path parameters of one link; gains are unit total power."""

    gains: np.ndarray          # complex (P,)
    delays_s: np.ndarray       # float (P,), excess delays, within the CP
    dopplers_hz: np.ndarray    # float (P,), at sampling carrier
    azimuths_rad: np.ndarray   # float (P,)
    elevations_rad: np.ndarray  # float (P,)
    los: bool
    speed_mps: float
    distance_m: float
    shadow_db: float
    carrier_hz: float

    def __post_init__(self):
        if len(self.gains) == 0:
            raise ValueError("empty path set")


@dataclass
class ChannelSample:
    H: np.ndarray              # complex64 (T, S, F)
    los: bool
    speed_mps: float
    carrier_hz: float
    large_scale_db: float
    sample_id: int


def sample_rng(seed: int, sample_id: int, *extra: int) -> np.random.Generator:
    """Counter-based per-sample stream: (seed, id[, extras]) fixes the draws."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(
        (seed, sample_id) + extra)))


def sample_scene(cfg: ScenarioConfig, rng: np.random.Generator) -> PathSet:
    """Draw one link's geometry: LoS links get a dominant zero-excess-delay
    direct path with Rician power split; NLoS links draw clustered scatter only.
    """
    cfg.validate()
    los = bool(rng.random() < cfg.los_prob)
    d_lo, d_hi = cfg.distance_range_m
    span = d_hi - d_lo
    # closer links are more likely LoS; ranges overlap so distance alone
    # does not separate the classes
    if los:
        distance = d_lo + 0.5 * span * rng.random()
    else:
        distance = d_lo + 0.25 * span + 0.75 * span * rng.random()
    speed = rng.uniform(*cfg.speed_range_mps)
    nu_max = speed * cfg.carrier_hz / SPEED_OF_LIGHT
    shadow = rng.normal(0.0, cfg.shadowing_sigma_db)

    n_scatter = int(rng.integers(cfg.path_count_range[0], cfg.path_count_range[1] + 1))
    az_lo, az_hi = np.deg2rad(cfg.azimuth_range_deg)
    el_lo, el_hi = np.deg2rad(cfg.elevation_range_deg)
    spread = math.radians(cfg.cluster_angle_spread_deg)

    n_clusters = int(rng.integers(cfg.cluster_count_range[0], cfg.cluster_count_range[1] + 1))
    cl_az = rng.uniform(az_lo, az_hi, n_clusters)
    cl_el = rng.uniform(el_lo, el_hi, n_clusters)
    cl_delay = cfg.min_excess_delay_s + rng.exponential(cfg.delay_spread_s, n_clusters)
    assign = rng.integers(0, n_clusters, n_scatter)
    az = np.clip(cl_az[assign] + rng.normal(0.0, spread, n_scatter), az_lo, az_hi)
    el = np.clip(cl_el[assign] + rng.normal(0.0, spread, n_scatter), el_lo, el_hi)
    delays = np.minimum(cl_delay[assign] + rng.exponential(0.2 * cfg.delay_spread_s,
                                                           n_scatter),
                        cfg.cp_duration_s)
    dopplers = nu_max * np.cos(rng.uniform(0.0, 2.0 * math.pi, n_scatter))
    # Rayleigh fading amplitudes shaped by an exponential power-delay profile
    pdp = np.exp(-delays / cfg.delay_spread_s)
    amps = rng.rayleigh(1.0, n_scatter) * np.sqrt(pdp)
    phases = rng.uniform(0.0, 2.0 * math.pi, n_scatter)
    gains = amps * np.exp(1j * phases)
    gains /= np.linalg.norm(gains)

    if los:
        k_db = rng.uniform(*cfg.rician_k_db_range)
        k_lin = 10.0 ** (k_db / 10.0)
        direct_frac = k_lin / (k_lin + 1.0)
        g0 = math.sqrt(direct_frac) * np.exp(1j * rng.uniform(0.0, 2.0 * math.pi))
        gains = np.concatenate(([g0], gains * math.sqrt(1.0 - direct_frac)))
        delays = np.concatenate(([0.0], delays))
        dopplers = np.concatenate(([nu_max * math.cos(rng.uniform(0.0, 2.0 * math.pi))],
                                   dopplers))
        az = np.concatenate(([rng.uniform(az_lo, az_hi)], az))
        el = np.concatenate(([rng.uniform(el_lo, el_hi)], el))

    return PathSet(gains=gains, delays_s=delays, dopplers_hz=dopplers,
                   azimuths_rad=az, elevations_rad=el, los=los, speed_mps=speed,
                   distance_m=distance, shadow_db=shadow, carrier_hz=cfg.carrier_hz)


def steering_matrix(az: np.ndarray, el: np.ndarray, n_h: int, n_v: int) -> np.ndarray:
    """Half-wavelength UPA steering vectors, one row per path, (P, n_h*n_v).

    Flat antenna index s = i_v * n_h + i_h, matching the vertical (x) horizontal
    Kronecker order of the beam codebook; per-element phase pi*(i_h d_h + i_v d_v)
    with directional cosines d_h = sin(az)cos(el), d_v = sin(el).
    """
    d_h = np.sin(az) * np.cos(el)
    d_v = np.sin(el)
    ih = np.arange(n_h)
    iv = np.arange(n_v)
    ph = np.exp(1j * math.pi * np.outer(d_h, ih))  # (P, n_h)
    pv = np.exp(1j * math.pi * np.outer(d_v, iv))  # (P, n_v)
    return (pv[:, :, None] * ph[:, None, :]).reshape(len(az), n_h * n_v)


def pathloss_db(distance_m: float, carrier_hz: float, exponent: float) -> float:
    """Log-distance path loss with a 1 m free-space reference intercept."""
    ref = 20.0 * math.log10(4.0 * math.pi * carrier_hz / SPEED_OF_LIGHT)
    return ref + 10.0 * exponent * math.log10(max(distance_m, 1.0))


def synthesize_channel(paths: PathSet, cfg: ScenarioConfig,
                       sample_id: int = 0,
                       carrier_hz: float | None = None) -> ChannelSample:
    """Render a PathSet to the full channel tensor H in C^{T x S x F}.

    Passing a different carrier re-synthesizes the same geometry at that band:
    Doppler shifts and the path-loss intercept rescale, angles and delays hold.
    """
    carrier = carrier_hz if carrier_hz is not None else paths.carrier_hz
    doppler_scale = carrier / paths.carrier_hz
    pl = pathloss_db(paths.distance_m, carrier, cfg.pathloss_exponent) + paths.shadow_db
    large_scale_db = -pl
    amp = 10.0 ** (large_scale_db / 20.0)

    t = np.arange(cfg.T) * cfg.symbol_duration_s
    f = np.arange(cfg.F) * cfg.subcarrier_spacing_hz
    ph_t = np.exp(2j * math.pi * np.outer(paths.dopplers_hz * doppler_scale, t))
    ph_f = np.exp(-2j * math.pi * np.outer(paths.delays_s, f))
    steer = steering_matrix(paths.azimuths_rad, paths.elevations_rad, cfg.n_h, cfg.n_v)
    H = np.einsum("p,pt,ps,pf->tsf", paths.gains * amp, ph_t, steer, ph_f,
                  optimize=True)
    H = H.astype(np.complex64)
    if not np.all(np.isfinite(H.view(np.float32))):
        raise FloatingPointError("non-finite channel synthesized")
    return ChannelSample(H=H, los=paths.los, speed_mps=paths.speed_mps,
                         carrier_hz=carrier, large_scale_db=large_scale_db,
                         sample_id=sample_id)


def generate_samples(cfg: ScenarioConfig, count: int, start_id: int = 0,
                     carrier_hz: float | None = None) -> list[ChannelSample]:
    """Generate `count` labeled samples; (cfg.seed, sample id) fixes each one."""
    out = []
    for i in range(count):
        sid = start_id + i
        rng = sample_rng(cfg.seed, sid)
        paths = sample_scene(cfg, rng)
        out.append(synthesize_channel(paths, cfg, sample_id=sid, carrier_hz=carrier_hz))
    return out
