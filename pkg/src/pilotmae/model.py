"""Networks: linear patch embedding with scaled axial positional encoding, a
factorized space-time (FST) or joint space-time (JST) encoder, a JST decoder
over mask tokens, the reconstruction head, and per-side scale heads.

An FST block applies a temporal attention unit (attention + FFN, pre-norm
residual) followed by a spectro-spatial unit, so L blocks contribute 2L
attention sublayers. A JST encoder with 2L layers uses the identical parameter
tree; only the forward routing differs, which makes matched FST/JST parameter
counts equal by construction.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .grid import PatchConfig, axial_pos_embed
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    d: int = 128
    enc_blocks: int = 3       # FST blocks; the encoder always has 2x this many units
    enc_heads: int = 8
    dec_layers: int = 2
    dec_heads: int = 4
    ffn_mult: int = 4
    alpha_pe_init: float = 0.01
    encoder_kind: str = "fst"  # "fst" | "jst"

    def __post_init__(self):
        if self.d % self.enc_heads or self.d % self.dec_heads:
            raise ValueError("model dim must be divisible by the head counts")
        if self.encoder_kind not in ("fst", "jst"):
            raise ValueError(f"unknown encoder kind {self.encoder_kind!r}")

    @property
    def enc_units(self) -> int:
        return 2 * self.enc_blocks


def _trunc_normal(rng: np.random.Generator, shape, std=0.02):
    return np.clip(rng.normal(0.0, std, shape), -2.0 * std, 2.0 * std)


def _unit_param_names(prefix: str):
    return [f"{prefix}.ln1.g", f"{prefix}.ln1.b",
            f"{prefix}.wq", f"{prefix}.bq", f"{prefix}.wk", f"{prefix}.bk",
            f"{prefix}.wv", f"{prefix}.bv", f"{prefix}.wo", f"{prefix}.bo",
            f"{prefix}.ln2.g", f"{prefix}.ln2.b",
            f"{prefix}.ffn.w1", f"{prefix}.ffn.b1",
            f"{prefix}.ffn.w2", f"{prefix}.ffn.b2"]


def _init_unit(params, prefix, d, ffn_mult, rng):
    params[f"{prefix}.ln1.g"] = T.param(np.ones(d))
    params[f"{prefix}.ln1.b"] = T.param(np.zeros(d))
    for nm in ("wq", "wk", "wv", "wo"):
        params[f"{prefix}.{nm}"] = T.param(_trunc_normal(rng, (d, d)))
        params[f"{prefix}.b{nm[1]}"] = T.param(np.zeros(d))
    params[f"{prefix}.ln2.g"] = T.param(np.ones(d))
    params[f"{prefix}.ln2.b"] = T.param(np.zeros(d))
    h = ffn_mult * d
    params[f"{prefix}.ffn.w1"] = T.param(_trunc_normal(rng, (d, h)))
    params[f"{prefix}.ffn.b1"] = T.param(np.zeros(h))
    params[f"{prefix}.ffn.w2"] = T.param(_trunc_normal(rng, (h, d)))
    params[f"{prefix}.ffn.b2"] = T.param(np.zeros(d))


def init_params(mcfg: ModelConfig, pcfg: PatchConfig,
                rng: np.random.Generator) -> dict[str, Tensor]:
    d = mcfg.d
    params: dict[str, Tensor] = {}
    params["embed.w"] = T.param(_trunc_normal(rng, (pcfg.D_p, d)))
    params["embed.b"] = T.param(np.zeros(d))
    params["enc.alpha"] = T.param(np.asarray(mcfg.alpha_pe_init))
    for i in range(mcfg.enc_units):
        _init_unit(params, f"enc.u{i}", d, mcfg.ffn_mult, rng)
    params["enc.norm.g"] = T.param(np.ones(d))
    params["enc.norm.b"] = T.param(np.zeros(d))
    params["enc.scale_head.w"] = T.param(_trunc_normal(rng, (d, 2)))
    params["enc.scale_head.b"] = T.param(np.zeros(2))
    init_decoder_params(params, mcfg, pcfg, rng)
    return params


def init_decoder_params(params: dict[str, Tensor], mcfg: ModelConfig,
                        pcfg: PatchConfig, rng: np.random.Generator):
    """(Re)initialize the decoder subtree; used for the fresh phase-2 decoder."""
    d = mcfg.d
    for name in [k for k in params if k.startswith("dec.")]:
        del params[name]
    params["dec.mask_token"] = T.param(_trunc_normal(rng, (d,)))
    params["dec.alpha"] = T.param(np.asarray(mcfg.alpha_pe_init))
    for i in range(mcfg.dec_layers):
        _init_unit(params, f"dec.u{i}", d, mcfg.ffn_mult, rng)
    params["dec.norm.g"] = T.param(np.ones(d))
    params["dec.norm.b"] = T.param(np.zeros(d))
    params["dec.recon.w"] = T.param(_trunc_normal(rng, (d, pcfg.D_p)))
    params["dec.recon.b"] = T.param(np.zeros(pcfg.D_p))
    params["dec.scale_head.w"] = T.param(_trunc_normal(rng, (d, 2)))
    params["dec.scale_head.b"] = T.param(np.zeros(2))


def encoder_param_names(params) -> list[str]:
    return [k for k in params if k.startswith(("embed.", "enc."))]


def count_params(mcfg: ModelConfig, pcfg: PatchConfig) -> dict[str, int]:
    """Closed-form parameter accounting; 'total' must equal the tensor sum."""
    d, k = mcfg.d, mcfg.ffn_mult
    unit = 4 * d * d + 4 * d + 2 * k * d * d + k * d + d + 4 * d  # attn+ffn+2 LN
    embed = pcfg.D_p * d + d
    scale_head = 2 * d + 2
    final_norm = 2 * d
    encoder = embed + 1 + mcfg.enc_units * unit + final_norm + scale_head
    decoder = (d + 1 + mcfg.dec_layers * unit + final_norm
               + d * pcfg.D_p + pcfg.D_p + scale_head)
    return {
        "per_unit": unit,
        "encoder": encoder,
        "decoder": decoder,
        "total": encoder + decoder,
        # the published figure counts neither the final norms nor the scale heads
        "core": encoder + decoder - 2 * final_norm - 2 * scale_head,
    }


def _split_heads(x: Tensor, heads: int) -> Tensor:
    n, l, d = x.shape
    dh = d // heads
    x = T.reshape(x, (n, l, heads, dh))
    x = T.transpose(x, (0, 2, 1, 3))
    return T.reshape(x, (n * heads, l, dh))


def _merge_heads(x: Tensor, heads: int) -> Tensor:
    nh, l, dh = x.shape
    n = nh // heads
    x = T.reshape(x, (n, heads, l, dh))
    x = T.transpose(x, (0, 2, 1, 3))
    return T.reshape(x, (n, l, heads * dh))


def attention_sublayer(x: Tensor, params, prefix: str, heads: int) -> Tensor:
    """Pre-norm multi-head self-attention with residual; x is (N, L, d)."""
    h = T.layer_norm(x, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"])
    q = T.linear(h, params[f"{prefix}.wq"], params[f"{prefix}.bq"])
    k = T.linear(h, params[f"{prefix}.wk"], params[f"{prefix}.bk"])
    v = T.linear(h, params[f"{prefix}.wv"], params[f"{prefix}.bv"])
    dh = x.shape[-1] // heads
    if heads > 1:
        q, k, v = _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)
    scores = T.bmm_scores(q, k, 1.0 / math.sqrt(dh))
    attn = T.softmax_lastdim(scores, _donate_input=True)
    o = T.matmul(attn, v)
    if heads > 1:
        o = _merge_heads(o, heads)
    o = T.linear(o, params[f"{prefix}.wo"], params[f"{prefix}.bo"])
    return T.add(x, o)


def ffn_sublayer(x: Tensor, params, prefix: str) -> Tensor:
    h = T.layer_norm(x, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])
    h = T.linear(h, params[f"{prefix}.ffn.w1"], params[f"{prefix}.ffn.b1"])
    h = T.gelu(h)
    h = T.linear(h, params[f"{prefix}.ffn.w2"], params[f"{prefix}.ffn.b2"])
    return T.add(x, h)


def transformer_unit(x: Tensor, params, prefix: str, heads: int) -> Tensor:
    return ffn_sublayer(attention_sublayer(x, params, prefix, heads), params, prefix)


def fst_encode(x: Tensor, params, mcfg: ModelConfig) -> Tensor:
    """Factorized encoder on a rectangular token tensor (B, n_k, N'_sf, d).

    Per block: attention across the kept temporal indices at each fixed
    spectro-spatial position, then attention across positions within each kept
    temporal slice; every attention sublayer carries its own FFN.
    """
    if len(x.shape) != 4:
        raise ValueError("fst_encode expects a rectangular (B, n_k, N_sf, d) tensor")
    b, n_k, n_sf, d = x.shape
    for blk in range(mcfg.enc_blocks):
        xt = T.reshape(T.transpose(x, (0, 2, 1, 3)), (b * n_sf, n_k, d))
        xt = transformer_unit(xt, params, f"enc.u{2 * blk}", mcfg.enc_heads)
        x = T.transpose(T.reshape(xt, (b, n_sf, n_k, d)), (0, 2, 1, 3))
        xs = T.reshape(x, (b * n_k, n_sf, d))
        xs = transformer_unit(xs, params, f"enc.u{2 * blk + 1}", mcfg.enc_heads)
        x = T.reshape(xs, (b, n_k, n_sf, d))
    return T.layer_norm(x, params["enc.norm.g"], params["enc.norm.b"])


def jst_encode(x: Tensor, params, mcfg: ModelConfig) -> Tensor:
    """Joint all-to-all encoder on (B, M, d); same parameter tree as FST."""
    if len(x.shape) != 3:
        raise ValueError("jst_encode expects a (B, M, d) tensor")
    for i in range(mcfg.enc_units):
        x = transformer_unit(x, params, f"enc.u{i}", mcfg.enc_heads)
    return T.layer_norm(x, params["enc.norm.g"], params["enc.norm.b"])


class Model:
    """Parameter tree plus the constant positional table and reference power."""

    def __init__(self, mcfg: ModelConfig, pcfg: PatchConfig,
                 params: dict[str, Tensor] | None = None, pref: float = 1.0,
                 rng: np.random.Generator | None = None):
        self.mcfg = mcfg
        self.pcfg = pcfg
        self.pref = pref
        if params is None:
            params = init_params(mcfg, pcfg, rng or np.random.default_rng(0))
        self.params = params
        self.pos_table = axial_pos_embed(pcfg, mcfg.d).astype(T.default_dtype())

    def embed(self, tokens: Tensor, vis_idx: np.ndarray) -> Tensor:
        """Linear patch embedding plus the alpha-scaled positional row of each
        token's true flat index; tokens (B, V, D_p), vis_idx (V,) or (B, V)."""
        x = T.linear(tokens, self.params["embed.w"], self.params["embed.b"])
        pos = self.pos_table[vis_idx]  # (V, d) or (B, V, d)
        return T.add_scaled_const(x, pos, self.params["enc.alpha"])

    def encode(self, tokens: Tensor, vis_idx: np.ndarray,
               rect: tuple[int, int] | None = None) -> Tensor:
        """Embed then encode; returns (B, V, d). rect=(n_k, N'_sf) gives the
        keep-set rectangle (required for the FST kind, V = n_k * N'_sf with
        temporal-major ordering)."""
        x = self.embed(tokens, vis_idx)
        b, v, d = x.shape
        if self.mcfg.encoder_kind == "fst":
            if rect is None:
                raise ValueError("FST encoder needs the keep-set rectangle")
            n_k, n_sf = rect
            if n_k * n_sf != v:
                raise ValueError(f"rectangle {rect} does not tile {v} tokens")
            x = T.reshape(x, (b, n_k, n_sf, d))
            x = fst_encode(x, self.params, self.mcfg)
            return T.reshape(x, (b, v, d))
        return jst_encode(x, self.params, self.mcfg)

    def encoder_scale(self, enc: Tensor) -> Tensor:
        return T.linear(enc, self.params["enc.scale_head.w"],
                        self.params["enc.scale_head.b"])

    def decode_tokens(self, enc: Tensor, vis_idx: np.ndarray) -> Tensor:
        """Assemble the full-length sequence (mask token at masked positions),
        add alpha-scaled positional rows at all P positions, and run the JST
        decoder; returns the normalized decoder tokens (B, P, d)."""
        p = self.params
        x = T.assemble_tokens(enc, vis_idx, p["dec.mask_token"], self.pcfg.P)
        x = T.add_scaled_const(x, self.pos_table, p["dec.alpha"])
        for i in range(self.mcfg.dec_layers):
            x = transformer_unit(x, p, f"dec.u{i}", self.mcfg.dec_heads)
        return T.layer_norm(x, p["dec.norm.g"], p["dec.norm.b"])

    def recon_head(self, dec_tokens: Tensor) -> Tensor:
        return T.linear(dec_tokens, self.params["dec.recon.w"],
                        self.params["dec.recon.b"])

    def decoder_scale(self, dec_tokens: Tensor) -> Tensor:
        return T.linear(dec_tokens, self.params["dec.scale_head.w"],
                        self.params["dec.scale_head.b"])

    def decode(self, enc: Tensor, vis_idx: np.ndarray) -> tuple[Tensor, Tensor]:
        """Per-patch reconstructions and decoder-side scale predictions."""
        x = self.decode_tokens(enc, vis_idx)
        return self.recon_head(x), self.decoder_scale(x)

    def features(self, tokens: np.ndarray, vis_idx: np.ndarray,
                 rect: tuple[int, int] | None = None) -> np.ndarray:
        """Mean-pooled encoder representations, (B, d); inference only."""
        enc = self.encode(T.const(tokens), vis_idx, rect)
        return enc.data.mean(axis=1)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"PWCK"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<4sIdI")


def save_checkpoint(path: str | Path, model: Model, meta: dict | None = None):
    doc = {
        "model": asdict(model.mcfg),
        "patch": asdict(model.pcfg),
        "meta": meta or {},
    }
    blob = json.dumps(doc, sort_keys=True).encode()
    names = sorted(model.params)
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, model.pref, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            data = np.ascontiguousarray(model.params[name].data, dtype="<f4")
            enc = name.encode()
            fh.write(struct.pack("<H", len(enc)))
            fh.write(enc)
            fh.write(struct.pack("<B", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes())


def load_checkpoint(path: str | Path) -> Model:
    raw = Path(path).read_bytes()
    magic, version, pref, blob_len = _CKPT_HEAD.unpack_from(raw, 0)
    if magic != CKPT_MAGIC:
        raise ValueError(f"bad checkpoint magic {magic!r}")
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = _CKPT_HEAD.size
    doc = json.loads(raw[off:off + blob_len].decode())
    off += blob_len
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    params: dict[str, Tensor] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<B", raw, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(shape)
        off += 4 * n
        params[name] = T.param(arr.astype(T.default_dtype()))
    mcfg = ModelConfig(**doc["model"])
    pcfg = PatchConfig(**doc["patch"])
    model = Model(mcfg, pcfg, params=params, pref=pref)
    model.meta = doc.get("meta", {})
    return model
