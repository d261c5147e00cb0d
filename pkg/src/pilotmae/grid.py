"""Everything between a channel tensor and model tokens.

Reference-power normalization, 3D patchification with real/imag splitting,
axial sinusoidal positional embeddings, structured random masks and pilot
patterns (one rectangular keep-set family for both), AWGN injection on visible
elements, and per-patch statistics for targets.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

EPS_R = 1e-6  # stability constant inside the target normalization
EPS_S = 1e-6  # stability constant inside the log-variance scale target

PILOT_T = (2, 11)
PILOT_F = (0, 1, 2, 3, 8, 9, 10, 11, 16, 17, 18, 19, 24, 25, 26, 27)


@dataclass(frozen=True)
class PatchConfig:
    T: int = 14
    S: int = 32
    F: int = 32
    p_t: int = 1
    p_s: int = 4
    p_f: int = 4

    def __post_init__(self):
        for name, grid, patch in (("time", self.T, self.p_t),
                                  ("space", self.S, self.p_s),
                                  ("frequency", self.F, self.p_f)):
            if patch < 1 or grid % patch:
                raise ValueError(
                    f"patch extent {patch} does not divide the {name} axis ({grid})")

    @property
    def n_t(self) -> int:
        return self.T // self.p_t

    @property
    def n_s(self) -> int:
        return self.S // self.p_s

    @property
    def n_f(self) -> int:
        return self.F // self.p_f

    @property
    def P(self) -> int:
        return self.n_t * self.n_s * self.n_f

    @property
    def N_sf(self) -> int:
        return self.n_s * self.n_f

    @property
    def D_p(self) -> int:
        return 2 * self.p_t * self.p_s * self.p_f

    def flat_index(self, i_t: int, i_s: int, i_f: int) -> int:
        return (i_t * self.n_s + i_s) * self.n_f + i_f

    def decode_flat(self, p) -> tuple:
        i_f = p % self.n_f
        rest = p // self.n_f
        return rest // self.n_s, rest % self.n_s, i_f


@dataclass(frozen=True)
class MaskSpec:
    """Rectangular keep set: temporal patches x common spectro-spatial positions."""

    kept_t: tuple[int, ...]
    kept_sf: tuple[int, ...]
    provenance: str  # "random" | "pilot"

    def __post_init__(self):
        for name, idx in (("kept_t", self.kept_t), ("kept_sf", self.kept_sf)):
            if len(idx) == 0:
                raise ValueError(f"{name} is empty")
            if any(b <= a for a, b in zip(idx, idx[1:])):
                raise ValueError(f"{name} must be strictly increasing")

    @property
    def n_k(self) -> int:
        return len(self.kept_t)

    @property
    def n_sf_kept(self) -> int:
        return len(self.kept_sf)

    def visible_fraction(self, cfg: PatchConfig) -> float:
        return (self.n_k / cfg.n_t) * (self.n_sf_kept / cfg.N_sf)

    def mask_ratio(self, cfg: PatchConfig) -> float:
        return 1.0 - self.visible_fraction(cfg)

    def flat_visible(self, cfg: PatchConfig) -> np.ndarray:
        """Flat patch indices of the keep set, temporal-major."""
        t = np.asarray(self.kept_t)[:, None] * cfg.N_sf
        return (t + np.asarray(self.kept_sf)[None, :]).reshape(-1)

    def flat_masked(self, cfg: PatchConfig) -> np.ndarray:
        keep = np.zeros(cfg.P, dtype=bool)
        keep[self.flat_visible(cfg)] = True
        return np.nonzero(~keep)[0]


def compute_pref(samples: Iterable[np.ndarray]) -> float:
    """Dataset-level reference power: mean over samples of mean |H|^2 per element."""
    powers = [float(np.mean(np.abs(H) ** 2)) for H in samples]
    if not powers:
        raise ValueError("compute_pref requires a nonempty split")
    pref = float(np.mean(powers))
    if pref == 0.0:
        raise ValueError("zero reference power")
    return pref


def patchify(H: np.ndarray, cfg: PatchConfig, dtype=np.float32) -> np.ndarray:
    """Complex (T,S,F) -> (P, D_p) real patches: real block then imaginary block."""
    if H.shape != (cfg.T, cfg.S, cfg.F):
        raise ValueError(f"channel shape {H.shape} does not match {cfg}")
    blocks = (H.reshape(cfg.n_t, cfg.p_t, cfg.n_s, cfg.p_s, cfg.n_f, cfg.p_f)
              .transpose(0, 2, 4, 1, 3, 5)
              .reshape(cfg.P, cfg.p_t * cfg.p_s * cfg.p_f))
    return np.concatenate([blocks.real, blocks.imag], axis=1).astype(dtype)


def unpatchify(tokens: np.ndarray, cfg: PatchConfig) -> np.ndarray:
    """(P, D_p) real patches back to the complex (T,S,F) grid; inverse of patchify."""
    half = cfg.D_p // 2
    blocks = tokens[:, :half] + 1j * tokens[:, half:]
    return (blocks.reshape(cfg.n_t, cfg.n_s, cfg.n_f, cfg.p_t, cfg.p_s, cfg.p_f)
            .transpose(0, 3, 1, 4, 2, 5)
            .reshape(cfg.T, cfg.S, cfg.F))


def _axis_table(n: int, d: int) -> np.ndarray:
    tab = np.zeros((n, d), dtype=np.float64)
    pos = np.arange(n, dtype=np.float64)[:, None]
    j = np.arange((d + 1) // 2, dtype=np.float64)
    ang = pos * (10_000.0 ** (-2.0 * j / d))[None, :]
    tab[:, 0::2] = np.sin(ang)
    tab[:, 1::2] = np.cos(ang[:, : d // 2])
    return tab


def axial_pos_embed(cfg: PatchConfig, d: int) -> np.ndarray:
    """(P, d) table of concatenated per-axis sinusoids, row p = (i_t, i_s, i_f)."""
    if d < 3:
        raise ValueError("model dim must be >= 3 for three axis blocks")
    d_t = d_s = d // 3
    d_f = d - 2 * (d // 3)
    tt = _axis_table(cfg.n_t, d_t)
    ts = _axis_table(cfg.n_s, d_s)
    tf = _axis_table(cfg.n_f, d_f)
    out = np.empty((cfg.P, d), dtype=np.float64)
    it, is_, if_ = np.meshgrid(np.arange(cfg.n_t), np.arange(cfg.n_s),
                               np.arange(cfg.n_f), indexing="ij")
    out[:, :d_t] = tt[it.reshape(-1)]
    out[:, d_t:d_t + d_s] = ts[is_.reshape(-1)]
    out[:, d_t + d_s:] = tf[if_.reshape(-1)]
    return out


def n_sf_from_ratio(cfg: PatchConfig, rho_k: float) -> int:
    """Deterministic rounding of the kept spectro-spatial count: max(1, floor)."""
    return max(1, math.floor(rho_k * cfg.N_sf))


def build_random_mask(cfg: PatchConfig, n_k: int, rho_k: float,
                      rng: np.random.Generator) -> MaskSpec:
    """Structured random keep set: n_k temporal patches, a common set of
    floor(rho_k * N_sf) spectro-spatial positions kept in each of them."""
    if not 1 <= n_k <= cfg.n_t:
        raise ValueError(f"n_k={n_k} outside [1, {cfg.n_t}]")
    if not 0.0 < rho_k <= 1.0:
        raise ValueError(f"rho_k={rho_k} outside (0, 1]")
    kept_t = np.sort(rng.choice(cfg.n_t, size=n_k, replace=False))
    kept_sf = np.sort(rng.choice(cfg.N_sf, size=n_sf_from_ratio(cfg, rho_k),
                                 replace=False))
    return MaskSpec(tuple(int(i) for i in kept_t), tuple(int(i) for i in kept_sf),
                    "random")


def build_pilot_mask(cfg: PatchConfig, pilot_t: Sequence[int] = PILOT_T,
                     pilot_f: Sequence[int] = PILOT_F) -> MaskSpec:
    """Keep set induced by a pilot pattern; every kept patch must be fully
    observed, so pilot indices must tile whole patches on each axis."""
    t_set, f_set = set(pilot_t), set(pilot_f)
    if not t_set or not f_set:
        raise ValueError("pilot pattern must keep at least one symbol and subcarrier")
    if max(t_set) >= cfg.T or min(t_set) < 0:
        raise ValueError("pilot symbol index out of range")
    if max(f_set) >= cfg.F or min(f_set) < 0:
        raise ValueError("pilot subcarrier index out of range")
    kept_tp = sorted({t // cfg.p_t for t in t_set})
    for tp in kept_tp:
        if not all(tp * cfg.p_t + o in t_set for o in range(cfg.p_t)):
            raise ValueError(
                f"pilot symbols do not cover temporal patch {tp} fully")
    kept_fp = sorted({f // cfg.p_f for f in f_set})
    for fp in kept_fp:
        if not all(fp * cfg.p_f + o in f_set for o in range(cfg.p_f)):
            raise ValueError(
                f"pilot subcarriers do not cover frequency patch {fp} fully")
    kept_sf = tuple(i_s * cfg.n_f + i_f
                    for i_s in range(cfg.n_s) for i_f in kept_fp)
    return MaskSpec(tuple(kept_tp), tuple(sorted(kept_sf)), "pilot")


def build_unstructured_keep(cfg: PatchConfig, mask_ratio: float,
                            rng: np.random.Generator) -> np.ndarray:
    """Plain random token keep set (no rectangular structure); used by the
    joint-attention baseline. Returns sorted flat patch indices."""
    n_vis = max(1, math.floor((1.0 - mask_ratio) * cfg.P))
    return np.sort(rng.choice(cfg.P, size=n_vis, replace=False))


def kept_patch_power(visible_tokens: np.ndarray) -> float:
    """Mean |h|^2 per complex element over the kept patches.

    Tokens hold D_p reals per patch (D_p/2 complex elements), so the per-element
    complex power is twice the mean square over the real scalars."""
    return 2.0 * float(np.mean(visible_tokens.astype(np.float64) ** 2))


def inject_awgn(visible_tokens: np.ndarray, kept_power: float,
                snr_db: float | None, rng: np.random.Generator) -> np.ndarray:
    """Add circular complex Gaussian noise to the visible elements only.

    Noise variance per complex element is kept_power / linear SNR, i.e. half of
    that per real scalar. snr_db=None (or +inf) disables noise.
    """
    if snr_db is None or math.isinf(snr_db):
        return visible_tokens.copy()
    if not math.isfinite(snr_db):
        raise ValueError("snr_db must be finite or +inf")
    if kept_power <= 0.0:
        raise ValueError("kept-patch power must be positive to set a noise level")
    sigma2 = kept_power / (10.0 ** (snr_db / 10.0))
    noise = rng.normal(0.0, math.sqrt(sigma2 / 2.0), size=visible_tokens.shape)
    return (visible_tokens + noise.astype(visible_tokens.dtype)).astype(
        visible_tokens.dtype)


class PatchStats(NamedTuple):
    mu: np.ndarray       # (..., )
    var: np.ndarray      # (..., )
    z: np.ndarray        # (..., D_p) normalized targets
    scale: np.ndarray    # (..., 2) scale targets (mu, log(var + eps_s))


def patch_stats(patches: np.ndarray, eps_r: float = EPS_R,
                eps_s: float = EPS_S) -> PatchStats:
    """Per-patch mean/variance over the D_p reals, the normalized reconstruction
    target, and the (mu, log-variance) scale target. Targets must always come
    from the clean channel."""
    if patches.shape[-1] < 2:
        raise ValueError("patch dimension must be at least 2")
    mu = patches.mean(axis=-1)
    var = patches.var(axis=-1)
    z = (patches - mu[..., None]) / np.sqrt(var[..., None] + eps_r)
    scale = np.stack([mu, np.log(var + eps_s)], axis=-1)
    return PatchStats(mu.astype(patches.dtype), var.astype(patches.dtype),
                      z.astype(patches.dtype), scale.astype(patches.dtype))


@dataclass
class TokenGrid:
    """One sample's tokenized view: noisy visible patches plus clean targets."""

    visible: np.ndarray       # (n_vis, D_p) noisy visible raw patches
    vis_idx: np.ndarray       # (n_vis,) flat patch indices, temporal-major
    masked_idx: np.ndarray    # (P - n_vis,)
    stats: PatchStats         # full-grid stats from the clean channel
    clean: np.ndarray         # (P, D_p) clean patches
    pref: float


def tokenize(H: np.ndarray, pref: float, cfg: PatchConfig, mask: MaskSpec,
             snr_db: float | None, rng: np.random.Generator,
             dtype=np.float32) -> TokenGrid:
    """Normalize by the reference power, patchify, select the keep set, and
    add pilot-level noise; targets are computed from the clean grid."""
    clean = patchify(H / math.sqrt(pref), cfg, dtype=dtype)
    stats = patch_stats(clean)
    vis_idx = mask.flat_visible(cfg)
    visible_clean = clean[vis_idx]
    noisy = inject_awgn(visible_clean, kept_patch_power(visible_clean), snr_db, rng)
    return TokenGrid(visible=noisy, vis_idx=vis_idx,
                     masked_idx=mask.flat_masked(cfg), stats=stats, clean=clean,
                     pref=pref)
