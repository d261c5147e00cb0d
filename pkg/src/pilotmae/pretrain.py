"""Losses, SNR curriculum, and the two-phase pretraining drivers.

Phase 1 trains encoder and decoder jointly on patch-normalized reconstruction
plus the two auxiliary scale losses, with per-sample AWGN drawn from an
annealed SNR interval. Phase 2 freezes the encoder, re-initializes a (usually
deeper) decoder, and trains it on reconstruction alone under a milder mask.

All per-sample randomness (masks, SNR draws, noise) is keyed by
(seed, sample id, epoch, phase), so runs are reproducible regardless of batch
composition and can be replayed exactly.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .channel import ChannelSample, sample_rng
from .grid import (EPS_R, MaskSpec, PatchConfig, build_random_mask,
                   build_unstructured_keep, compute_pref, inject_awgn,
                   kept_patch_power, patch_stats, patchify)
from .model import Model, ModelConfig, init_decoder_params
from .optim import OptimizerState, adamw_step, clip_global_norm, cosine_lr, \
    warmup_cosine_lr
from .tensor import Tensor

_PHASE1, _PHASE2 = 1, 2


@dataclass(frozen=True)
class LossWeights:
    lam_enc: float = 0.05
    lam_dec: float = 0.05

    def __post_init__(self):
        if self.lam_enc < 0 or self.lam_dec < 0:
            raise ValueError("scale-loss weights must be nonnegative")


@dataclass(frozen=True)
class CurriculumConfig:
    s0_db: float = 40.0
    smax_db: float = 40.0
    epochs: int = 500
    enabled: bool = True

    def __post_init__(self):
        if self.enabled and self.s0_db > self.smax_db:
            raise ValueError("curriculum requires s0 <= smax")


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def recon_loss(pred_masked: Tensor, targets: np.ndarray) -> Tensor:
    """Mean over masked patches of the squared L2 distance to the normalized
    target; each patch contributes its full D_p-dimensional squared norm."""
    if pred_masked.data.shape[:-1] != targets.shape[:-1] or targets.size == 0:
        raise ValueError("empty or mismatched masked set")
    n_patches = int(np.prod(targets.shape[:-1]))
    diff = T.sub(pred_masked, T.const(targets))
    return T.mul_scalar(T.sum_all(T.square(diff)), 1.0 / n_patches)


def scale_loss(pred: Tensor, targets: np.ndarray) -> Tensor:
    """Mean squared L2 error of (mu, log-variance) predictions over an index set."""
    if targets.size == 0:
        raise ValueError("empty supervision set")
    n = int(np.prod(targets.shape[:-1]))
    diff = T.sub(pred, T.const(targets))
    return T.mul_scalar(T.sum_all(T.square(diff)), 1.0 / n)


def total_loss(recon: Tensor, s_enc: Tensor | None, s_dec: Tensor | None,
               w: LossWeights) -> Tensor:
    out = recon
    if s_enc is not None and w.lam_enc > 0:
        out = T.add(out, T.mul_scalar(s_enc, w.lam_enc))
    if s_dec is not None and w.lam_dec > 0:
        out = T.add(out, T.mul_scalar(s_dec, w.lam_dec))
    return out


# ---------------------------------------------------------------------------
# curriculum
# ---------------------------------------------------------------------------

def snr_lower_bound(e: int, cfg: CurriculumConfig) -> float:
    """Cosine anneal of the SNR interval's lower edge from s0 down to 0 dB."""
    if not 0 <= e <= cfg.epochs - 1:
        raise ValueError(f"epoch {e} outside [0, {cfg.epochs - 1}]")
    if cfg.epochs == 1:
        return cfg.s0_db
    return 0.5 * cfg.s0_db * (1.0 + math.cos(math.pi * e / (cfg.epochs - 1)))


def sample_snr(e: int, cfg: CurriculumConfig, rng: np.random.Generator) -> float:
    lo = snr_lower_bound(e, cfg)
    if lo > cfg.smax_db:
        raise ValueError("lower bound above smax")
    return float(rng.uniform(lo, cfg.smax_db))


# ---------------------------------------------------------------------------
# dataset preparation
# ---------------------------------------------------------------------------

@dataclass
class TokenizedDataset:
    """Clean patchified samples plus targets, ready for masked training."""

    X: np.ndarray        # (N, P, D_p) reference-normalized clean patches
    scale_t: np.ndarray  # (N, P, 2) scale targets
    var: np.ndarray      # (N, P)
    mu: np.ndarray       # (N, P)
    los: np.ndarray      # (N,)
    ids: np.ndarray      # (N,)
    pref: float
    pcfg: PatchConfig

    def __len__(self):
        return len(self.X)

    def z_targets(self, rows: np.ndarray, idx: np.ndarray) -> np.ndarray:
        """Normalized targets for samples `rows` at patch indices idx (B, K)."""
        x = self.X[rows[:, None], idx]                    # (B, K, D_p)
        mu = self.mu[rows[:, None], idx][..., None]
        var = self.var[rows[:, None], idx][..., None]
        return ((x - mu) / np.sqrt(var + EPS_R)).astype(self.X.dtype)


def prepare_dataset(samples: list[ChannelSample], pcfg: PatchConfig,
                    pref: float | None = None) -> TokenizedDataset:
    if pref is None:
        pref = compute_pref([s.H for s in samples])
    dtype = T.default_dtype()
    root = math.sqrt(pref)
    X = np.stack([patchify(s.H / root, pcfg, dtype=dtype) for s in samples])
    stats = patch_stats(X)
    return TokenizedDataset(X=X, scale_t=stats.scale, var=stats.var, mu=stats.mu,
                            los=np.array([s.los for s in samples]),
                            ids=np.array([s.sample_id for s in samples]),
                            pref=pref, pcfg=pcfg)


# ---------------------------------------------------------------------------
# training configuration and driver
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 500
    batch_size: int = 512
    lr_start: float = 5e-4
    lr_min: float = 5e-6
    warmup: int = 0
    weight_decay: float = 0.005
    clip: float = 1.0
    n_k: int = 2
    rho_k: float = 0.1
    unstructured_mask_ratio: float | None = None  # JST-baseline masking
    noise: bool = True
    scale: bool = True
    weights: LossWeights = field(default_factory=LossWeights)
    s0_db: float = 40.0
    smax_db: float = 40.0
    val_fraction: float = 0.1
    seed: int = 0


@dataclass
class EpochLog:
    epoch: int
    lr: float
    s_min: float
    recon: float
    scale_enc: float
    scale_dec: float
    val_loss: float
    wall_seconds: float

    HEADER = "epoch,lr,s_min,L_recon,L_scale_enc,L_scale_dec,val_loss,wall_seconds"

    def row(self) -> str:
        return (f"{self.epoch},{self.lr:.8g},{self.s_min:.6g},{self.recon:.8g},"
                f"{self.scale_enc:.8g},{self.scale_dec:.8g},{self.val_loss:.8g},"
                f"{self.wall_seconds:.3f}")


def write_log_csv(path: str | Path, logs: list[EpochLog], preamble: dict):
    lines = [f"# {k}={v}" for k, v in sorted(preamble.items())]
    lines.append(EpochLog.HEADER)
    lines.extend(l.row() for l in logs)
    Path(path).write_text("\n".join(lines) + "\n")


def _draw_batch_masks(ds: TokenizedDataset, rows: np.ndarray, epoch: int,
                      cfg: PretrainConfig, curriculum: CurriculumConfig,
                      phase: int):
    """Per-sample keep sets, SNRs, and noisy visible tokens for one batch."""
    pcfg = ds.pcfg
    vis_list, snrs = [], []
    for r in rows:
        rng = sample_rng(cfg.seed, int(ds.ids[r]), epoch, phase)
        if cfg.unstructured_mask_ratio is not None:
            vis = build_unstructured_keep(pcfg, cfg.unstructured_mask_ratio, rng)
        else:
            mask = build_random_mask(pcfg, cfg.n_k, cfg.rho_k, rng)
            vis = mask.flat_visible(pcfg)
        snr = sample_snr(epoch, curriculum, rng) if cfg.noise else None
        vis_list.append(vis)
        snrs.append(snr)
    vis_idx = np.stack(vis_list)                       # (B, V)
    tokens = ds.X[rows[:, None], vis_idx].copy()       # (B, V, D_p) clean
    for i, r in enumerate(rows):
        if snrs[i] is not None:
            rng = sample_rng(cfg.seed, int(ds.ids[r]), epoch, phase, 7)
            tokens[i] = inject_awgn(tokens[i], kept_patch_power(tokens[i]),
                                    snrs[i], rng)
    masked_idx = np.stack([np.setdiff1d(np.arange(pcfg.P), v) for v in vis_list])
    return tokens, vis_idx, masked_idx


def _forward_losses(model: Model, ds: TokenizedDataset, rows, tokens, vis_idx,
                    masked_idx, cfg: PretrainConfig, rect, fit_readout: bool):
    """Forward pass and loss parts for one batch.

    fit_readout (phase 2): skip the encoder-side term and compute the decoder
    scale loss on detached decoder tokens, so only the readout head sees it.
    """
    enc = model.encode(T.const(tokens), vis_idx, rect=rect)
    dec_tokens = model.decode_tokens(enc, vis_idx)
    pred = model.recon_head(dec_tokens)
    pred_m = T.gather_axis1(pred, masked_idx)
    l_rec = recon_loss(pred_m, ds.z_targets(rows, masked_idx))
    l_se = l_sd = None
    if fit_readout:
        s_dec = model.decoder_scale(T.const(dec_tokens.data))
        s_dec_m = T.gather_axis1(s_dec, masked_idx)
        l_sd = scale_loss(s_dec_m, np.take_along_axis(
            ds.scale_t[rows], masked_idx[:, :, None], axis=1))
    elif cfg.scale:
        s_enc = model.encoder_scale(enc)
        l_se = scale_loss(s_enc, np.take_along_axis(
            ds.scale_t[rows], vis_idx[:, :, None], axis=1))
        s_dec = model.decoder_scale(dec_tokens)
        s_dec_m = T.gather_axis1(s_dec, masked_idx)
        l_sd = scale_loss(s_dec_m, np.take_along_axis(
            ds.scale_t[rows], masked_idx[:, :, None], axis=1))
    return l_rec, l_se, l_sd


def zero_predictor_loss(ds: TokenizedDataset, cfg: PretrainConfig,
                        epoch: int, phase: int = _PHASE1) -> float:
    """Oracle loss of predicting all zeros, over the exact masked targets the
    given epoch used (masks are replayed from their RNG keys)."""
    total, count = 0.0, 0
    for r in range(len(ds)):
        rng = sample_rng(cfg.seed, int(ds.ids[r]), epoch, phase)
        if cfg.unstructured_mask_ratio is not None:
            vis = build_unstructured_keep(ds.pcfg, cfg.unstructured_mask_ratio, rng)
        else:
            vis = build_random_mask(ds.pcfg, cfg.n_k, cfg.rho_k,
                                    rng).flat_visible(ds.pcfg)
        midx = np.setdiff1d(np.arange(ds.pcfg.P), vis)
        z = ds.z_targets(np.array([r]), midx[None])
        total += float(np.sum(z.astype(np.float64) ** 2))
        count += len(midx)
    return total / count


def split_train_val(n: int, val_fraction: float, seed: int):
    """Seeded held-out split; recorded via the seed in the run manifest."""
    order = sample_rng(seed, 0xA1).permutation(n)
    n_val = int(round(val_fraction * n))
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def _run_epochs(model: Model, ds: TokenizedDataset, train_rows, val_rows,
                cfg: PretrainConfig, curriculum: CurriculumConfig,
                trainable: dict[str, Tensor], phase: int,
                state_dump_path: str | Path | None = None,
                progress=None) -> list[EpochLog]:
    opt = OptimizerState(weight_decay=cfg.weight_decay)
    logs: list[EpochLog] = []
    rect = None
    if cfg.unstructured_mask_ratio is None:
        from .grid import n_sf_from_ratio
        rect = (cfg.n_k, n_sf_from_ratio(ds.pcfg, cfg.rho_k))
    if model.mcfg.encoder_kind == "fst" and rect is None:
        raise ValueError("the FST encoder requires rectangular masks")
    w = cfg.weights if (cfg.scale and phase == _PHASE1) else LossWeights(0.0, 0.0)
    fit_readout = phase == _PHASE2
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = warmup_cosine_lr(epoch, cfg.epochs, cfg.warmup, cfg.lr_start, cfg.lr_min)
        s_min = snr_lower_bound(epoch, curriculum) if cfg.noise else 0.0
        order = sample_rng(cfg.seed, 0xE90C, epoch, phase).permutation(train_rows)
        sums = np.zeros(3)
        n_batches = 0
        for lo in range(0, len(order), cfg.batch_size):
            rows = order[lo:lo + cfg.batch_size]
            tokens, vis_idx, masked_idx = _draw_batch_masks(
                ds, rows, epoch, cfg, curriculum, phase)
            T.zero_grads(trainable)
            with T.Tape() as tape:
                l_rec, l_se, l_sd = _forward_losses(
                    model, ds, rows, tokens, vis_idx, masked_idx, cfg, rect,
                    fit_readout)
                loss = total_loss(l_rec, l_se, l_sd, w)
                if fit_readout and l_sd is not None:
                    # the scale readout trains on detached decoder tokens; it
                    # cannot steer the decoder or the logged objective
                    loss = T.add(loss, l_sd)
                val = loss.item()
                if not math.isfinite(val):
                    if state_dump_path is not None:
                        Path(state_dump_path).write_text(json.dumps({
                            "epoch": epoch, "batch_start": int(lo),
                            "recon": l_rec.item(),
                            "lr": lr, "s_min": s_min}))
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch}, batch {lo}")
                tape.backward(loss)
            grads = {k: p.grad for k, p in trainable.items() if p.grad is not None}
            clip_global_norm(grads, cfg.clip)
            adamw_step(opt, trainable, lr)
            sums += [l_rec.item(),
                     l_se.item() if l_se is not None else 0.0,
                     l_sd.item() if l_sd is not None else 0.0]
            n_batches += 1
        val_loss = _validation_loss(model, ds, val_rows, epoch, cfg, curriculum,
                                    rect, phase, w, fit_readout)
        logs.append(EpochLog(epoch, lr, s_min, *(sums / max(n_batches, 1)),
                             val_loss, time.perf_counter() - t0))
        if progress:
            progress(logs[-1])
    return logs


def _validation_loss(model, ds, val_rows, epoch, cfg, curriculum, rect, phase,
                     w, fit_readout) -> float:
    if len(val_rows) == 0:
        return float("nan")
    total, n = 0.0, 0
    for lo in range(0, len(val_rows), cfg.batch_size):
        rows = val_rows[lo:lo + cfg.batch_size]
        tokens, vis_idx, masked_idx = _draw_batch_masks(
            ds, rows, epoch, cfg, curriculum, phase)
        l_rec, l_se, l_sd = _forward_losses(model, ds, rows, tokens, vis_idx,
                                            masked_idx, cfg, rect, fit_readout)
        total += total_loss(l_rec, l_se, l_sd, w).item() * len(rows)
        n += len(rows)
    return total / n


def run_phase1(samples: list[ChannelSample], pcfg: PatchConfig, mcfg: ModelConfig,
               cfg: PretrainConfig, state_dump_path=None, progress=None
               ) -> tuple[Model, list[EpochLog], TokenizedDataset]:
    """Joint encoder-decoder pretraining with the full objective."""
    if not samples:
        raise ValueError("empty dataset")
    train_rows, val_rows = split_train_val(len(samples), cfg.val_fraction, cfg.seed)
    ds_all = prepare_dataset(samples, pcfg,
                             pref=compute_pref([samples[i].H for i in train_rows]))
    model = Model(mcfg, pcfg, pref=ds_all.pref,
                  rng=sample_rng(cfg.seed, 0x1817, _PHASE1))
    curriculum = CurriculumConfig(cfg.s0_db, cfg.smax_db, cfg.epochs, cfg.noise)
    logs = _run_epochs(model, ds_all, train_rows, val_rows, cfg, curriculum,
                       model.params, _PHASE1, state_dump_path, progress)
    return model, logs, ds_all


def run_phase2(model: Model, samples: list[ChannelSample], cfg: PretrainConfig,
               dec_layers: int, dec_heads: int | None = None,
               state_dump_path=None, progress=None
               ) -> tuple[Model, list[EpochLog]]:
    """Freeze the encoder, attach a fresh decoder, train it on reconstruction
    alone; the decoder scale readout is fitted on detached features so the
    objective stays pure reconstruction."""
    mcfg2 = replace(model.mcfg, dec_layers=dec_layers,
                    dec_heads=dec_heads or model.mcfg.dec_heads)
    params = dict(model.params)
    model2 = Model(mcfg2, model.pcfg, params=params, pref=model.pref)
    init_decoder_params(params, mcfg2, model.pcfg,
                        sample_rng(cfg.seed, 0x2827, _PHASE2))
    for name in params:
        params[name].requires_grad = name.startswith("dec.")
    trainable = {k: p for k, p in params.items() if p.requires_grad}
    train_rows, val_rows = split_train_val(len(samples), cfg.val_fraction, cfg.seed)
    ds = prepare_dataset(samples, model.pcfg, pref=model.pref)
    curriculum = CurriculumConfig(cfg.s0_db, cfg.smax_db, cfg.epochs, cfg.noise)
    logs = _run_epochs(model2, ds, train_rows, val_rows, cfg, curriculum,
                       trainable, _PHASE2, state_dump_path, progress)
    for p in params.values():
        p.requires_grad = True
    return model2, logs
