"""Minimal dense real-tensor engine with reverse-mode automatic differentiation.

Design: a Tensor wraps a NumPy array; differentiable ops append (output,
backward-closure) records to the innermost active Tape. Records are appended
in execution order, which is a topological order of the graph, so Tape.backward
walks them exactly once in reverse. Compute is float32 by default; a float64
verification mode exists for gradient checking and bitwise-determinism tests.

Hot inner kernels (batched thin-K matmul, softmax, layer norm, GELU) dispatch
to the compiled extension when available, NumPy otherwise.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from . import _kernels as K

__all__ = [
    "Tensor", "Tape", "param", "const", "precision", "default_dtype",
    "set_check_finite", "count_flops", "matmul", "bmm_scores", "softmax_lastdim",
    "layer_norm", "gelu", "linear", "add", "sub", "scale_by", "mul_scalar",
    "add_scaled_const", "square", "sum_all", "mean_all", "reshape", "transpose",
    "gather_axis1", "assemble_tokens", "mean_pool_axis1", "cross_entropy",
    "grad_check", "zero_grads",
]

_DTYPE = np.float32
_CHECK_FINITE: bool | None = None  # None = auto: on in float64 mode only
_TAPES: list["Tape"] = []
_FLOPS: list[dict] = []


def default_dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(name: str):
    """Switch the default compute dtype ('float32' or 'float64') in a scope."""
    global _DTYPE
    prev = _DTYPE
    _DTYPE = {"float32": np.float32, "float64": np.float64}[name]
    try:
        yield
    finally:
        _DTYPE = prev


def set_check_finite(enabled: bool | None):
    """Force finite checks on/off; None restores the default (on in float64)."""
    global _CHECK_FINITE
    _CHECK_FINITE = enabled


def _checking() -> bool:
    if _CHECK_FINITE is None:
        return _DTYPE == np.float64
    return _CHECK_FINITE


def _chk(arr: np.ndarray) -> np.ndarray:
    if _checking() and not np.all(np.isfinite(arr)):
        raise FloatingPointError("non-finite value produced by tensor op")
    return arr


@contextlib.contextmanager
def count_flops():
    """Accumulate matmul-family flops by tag ('attn' score/value work vs 'gemm')."""
    d = {"attn": 0, "gemm": 0}
    _FLOPS.append(d)
    try:
        yield d
    finally:
        _FLOPS.pop()


def _bump(tag: str, flops: int):
    for d in _FLOPS:
        d[tag] += flops


class Tensor:
    """Dense real tensor; row-major data plus an optional same-shape gradient."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data: np.ndarray, requires_grad: bool = False):
        self.data = data
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, rg={self.requires_grad})"


def param(data, requires_grad: bool = True) -> Tensor:
    return Tensor(np.ascontiguousarray(data, dtype=_DTYPE), requires_grad)


def const(data) -> Tensor:
    return Tensor(np.ascontiguousarray(data, dtype=_DTYPE), requires_grad=False)


class Tape:
    """Topologically ordered op records for one forward/backward pass."""

    __slots__ = ("records",)

    def __init__(self):
        self.records: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False

    def backward(self, loss: Tensor):
        if loss.data.size != 1:
            raise ValueError("backward requires a scalar loss")
        loss.grad = np.ones_like(loss.data)
        for out, bwd in reversed(self.records):
            g = out.grad
            if g is None:
                continue
            bwd(g)
            out.grad = None  # grads of intermediates die after their record
        self.records.clear()


def _record(out: Tensor, bwd: Callable[[np.ndarray], None]):
    if _TAPES:
        out.requires_grad = True
        _TAPES[-1].records.append((out, bwd))


def _wants_grad(*ts: Tensor) -> bool:
    return bool(_TAPES) and any(t.requires_grad for t in ts)


def _acc(t: Tensor, g: np.ndarray, donate: bool = False):
    """Accumulate into t.grad; donate=True hands over ownership of g."""
    if t.grad is None:
        t.grad = g if donate else g.copy()
    else:
        t.grad += g


def zero_grads(params: dict[str, Tensor]):
    for p in params.values():
        p.grad = None


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2D matrix product or batched 3D product (leading batch axis)."""
    ad, bd = a.data, b.data
    if ad.ndim == 2 and bd.ndim == 2:
        if ad.shape[1] != bd.shape[0]:
            raise ValueError(f"matmul shape mismatch {ad.shape} @ {bd.shape}")
        _bump("gemm", 2 * ad.shape[0] * ad.shape[1] * bd.shape[1])
        out = Tensor(_chk(ad @ bd))
        if _wants_grad(a, b):
            def bwd(g):
                if a.requires_grad:
                    _acc(a, g @ bd.T, donate=True)
                if b.requires_grad:
                    _acc(b, ad.T @ g, donate=True)
            _record(out, bwd)
        return out
    if ad.ndim == 3 and bd.ndim == 3:
        if ad.shape[0] != bd.shape[0] or ad.shape[2] != bd.shape[1]:
            raise ValueError(f"matmul shape mismatch {ad.shape} @ {bd.shape}")
        _bump("attn", 2 * ad.shape[0] * ad.shape[1] * ad.shape[2] * bd.shape[2])
        out = Tensor(_chk(np.matmul(ad, bd)))
        if _wants_grad(a, b):
            def bwd(g):
                g = np.ascontiguousarray(g)
                if a.requires_grad:
                    # da = g @ b^T contracts the (often thin) last axes of g
                    # and b, exactly the kernel's layout
                    _acc(a, K.bmm_nt(g, bd, 1.0), donate=True)
                if b.requires_grad:
                    _acc(b, np.matmul(ad.swapaxes(1, 2), g), donate=True)
            _record(out, bwd)
        return out
    raise ValueError("matmul supports 2D@2D or 3D@3D only")


def bmm_scores(q: Tensor, k: Tensor, scale: float) -> Tensor:
    """scale * q @ k^T for q:(N,L,Dh), k:(N,M,Dh) -> (N,L,M) attention scores."""
    qd, kd = q.data, k.data
    if qd.ndim != 3 or kd.ndim != 3 or qd.shape[2] != kd.shape[2]:
        raise ValueError(f"bmm_scores shape mismatch {qd.shape} x {kd.shape}")
    _bump("attn", 2 * qd.shape[0] * qd.shape[1] * kd.shape[1] * qd.shape[2])
    out = Tensor(_chk(K.bmm_nt(qd, kd, scale)))
    if _wants_grad(q, k):
        def bwd(g):
            g = np.ascontiguousarray(g)
            if q.requires_grad:
                dq = np.matmul(g, kd)
                dq *= dq.dtype.type(scale)
                _acc(q, dq, donate=True)
            if k.requires_grad:
                dk = np.matmul(g.swapaxes(1, 2), qd)
                dk *= dk.dtype.type(scale)
                _acc(k, dk, donate=True)
        _record(out, bwd)
    return out


def softmax_lastdim(x: Tensor, _donate_input: bool = False) -> Tensor:
    """Numerically stabilized softmax over the last axis.

    _donate_input=True reuses x's buffer (callers that own x and never read it
    again, e.g. attention scores); x must not be consumed elsewhere.
    """
    if x.data.shape[-1] < 1:
        raise ValueError("softmax_lastdim requires last extent >= 1")
    if _donate_input and x.data.flags.c_contiguous:
        y = x.data
    else:
        y = np.ascontiguousarray(x.data).copy()
    K.softmax_rows(y.reshape(-1, y.shape[-1]))
    out = Tensor(_chk(y))
    if _wants_grad(x):
        def bwd(g):
            g = np.ascontiguousarray(g)
            # consumes g in place; out.grad is dead after this record
            K.softmax_rows_bwd(y.reshape(-1, y.shape[-1]), g.reshape(-1, g.shape[-1]))
            _acc(x, g, donate=True)
        _record(out, bwd)
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Layer normalization over the last axis with learnable gain/bias."""
    xd = np.ascontiguousarray(x.data)
    C = xd.shape[-1]
    x2 = xd.reshape(-1, C)
    o2, mean, rstd = K.layernorm_rows(x2, gain.data, bias.data, eps)
    out = Tensor(_chk(o2.reshape(xd.shape)))
    if _wants_grad(x, gain, bias):
        def bwd(g):
            g2 = g.reshape(-1, C)
            xhat = (x2 - mean[:, None]) * rstd[:, None]
            if gain.requires_grad:
                _acc(gain, np.einsum("rc,rc->c", g2, xhat), donate=True)
            if bias.requires_grad:
                _acc(bias, g2.sum(axis=0), donate=True)
            if x.requires_grad:
                dxh = g2 * gain.data
                t1 = dxh.mean(axis=1, keepdims=True)
                t2 = (dxh * xhat).mean(axis=1, keepdims=True)
                dx = (dxh - t1 - xhat * t2) * rstd[:, None]
                _acc(x, dx.reshape(xd.shape), donate=True)
        _record(out, bwd)
    return out


def gelu(x: Tensor) -> Tensor:
    xd = np.ascontiguousarray(x.data)
    flat = xd.reshape(-1)
    out = Tensor(_chk(K.gelu(flat).reshape(xd.shape)))
    if _wants_grad(x):
        def bwd(g):
            dx = K.gelu_bwd(flat, np.ascontiguousarray(g).reshape(-1))
            _acc(x, dx.reshape(xd.shape), donate=True)
        _record(out, bwd)
    return out


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w (+ b) over the last axis; x may have any leading shape."""
    xd, wd = x.data, w.data
    if xd.shape[-1] != wd.shape[0]:
        raise ValueError(f"linear dim mismatch {xd.shape} @ {wd.shape}")
    x2 = np.ascontiguousarray(xd).reshape(-1, wd.shape[0])
    _bump("gemm", 2 * x2.shape[0] * wd.shape[0] * wd.shape[1])
    o2 = x2 @ wd
    if b is not None:
        o2 += b.data
    out = Tensor(_chk(o2.reshape(xd.shape[:-1] + (wd.shape[1],))))
    if _wants_grad(x, w) or (b is not None and _wants_grad(b)):
        def bwd(g):
            g2 = np.ascontiguousarray(g).reshape(-1, wd.shape[1])
            if w.requires_grad:
                _acc(w, x2.T @ g2, donate=True)
            if b is not None and b.requires_grad:
                _acc(b, g2.sum(axis=0), donate=True)
            if x.requires_grad:
                _acc(x, (g2 @ wd.T).reshape(xd.shape), donate=True)
        _record(out, bwd)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; b may also be a last-axis vector broadcast."""
    out = Tensor(_chk(a.data + b.data))
    if _wants_grad(a, b):
        def bwd(g):
            if a.requires_grad:
                _acc(a, g)
            if b.requires_grad:
                if b.data.shape == g.shape:
                    _acc(b, g, donate=True)
                else:
                    _acc(b, g.reshape(-1, b.data.shape[-1]).sum(axis=0), donate=True)
        _record(out, bwd)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError("sub requires equal shapes")
    out = Tensor(_chk(a.data - b.data))
    if _wants_grad(a, b):
        def bwd(g):
            if a.requires_grad:
                _acc(a, g)
            if b.requires_grad:
                _acc(b, -g, donate=True)
        _record(out, bwd)
    return out


def mul_scalar(x: Tensor, s: float) -> Tensor:
    out = Tensor(_chk(x.data * x.data.dtype.type(s)))
    if _wants_grad(x):
        def bwd(g):
            _acc(x, g * g.dtype.type(s), donate=True)
        _record(out, bwd)
    return out


def scale_by(x: Tensor, s: Tensor) -> Tensor:
    """Multiply by a learnable scalar tensor."""
    if s.data.size != 1:
        raise ValueError("scale_by expects a scalar tensor")
    out = Tensor(_chk(x.data * s.data.reshape(())))
    if _wants_grad(x, s):
        def bwd(g):
            if s.requires_grad:
                _acc(s, np.array(np.vdot(g, x.data), dtype=g.dtype).reshape(s.data.shape),
                     donate=True)
            if x.requires_grad:
                _acc(x, g * s.data.reshape(()), donate=True)
        _record(out, bwd)
    return out


def add_scaled_const(x: Tensor, c: np.ndarray, alpha: Tensor) -> Tensor:
    """x + alpha * c for a constant array c and learnable scalar alpha."""
    if alpha.data.size != 1:
        raise ValueError("alpha must be scalar")
    out = Tensor(_chk(x.data + alpha.data.reshape(()) * c))
    if _wants_grad(x, alpha):
        def bwd(g):
            if alpha.requires_grad:
                _acc(alpha, np.array(np.vdot(g, np.broadcast_to(c, g.shape)),
                                     dtype=g.dtype).reshape(alpha.data.shape), donate=True)
            if x.requires_grad:
                _acc(x, g)
        _record(out, bwd)
    return out


def square(x: Tensor) -> Tensor:
    out = Tensor(_chk(x.data * x.data))
    if _wants_grad(x):
        def bwd(g):
            _acc(x, 2.0 * x.data * g, donate=True)
        _record(out, bwd)
    return out


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(_chk(x.data.sum(dtype=x.data.dtype).reshape(())))
    if _wants_grad(x):
        def bwd(g):
            _acc(x, np.broadcast_to(g, x.data.shape).copy(), donate=True)
        _record(out, bwd)
    return out


def mean_all(x: Tensor) -> Tensor:
    return mul_scalar(sum_all(x), 1.0 / x.data.size)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = Tensor(np.ascontiguousarray(x.data).reshape(shape))
    if _wants_grad(x):
        def bwd(g):
            _acc(x, np.ascontiguousarray(g).reshape(x.data.shape), donate=True)
        _record(out, bwd)
    return out


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(np.ascontiguousarray(x.data.transpose(axes)))
    if _wants_grad(x):
        def bwd(g):
            _acc(x, np.ascontiguousarray(g.transpose(inv)), donate=True)
        _record(out, bwd)
    return out


def gather_axis1(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows along axis 1 of a (B, P, D) tensor.

    idx is (K,) shared across the batch or (B, K) per sample; indices must be
    unique within a sample (masks and pilot patterns always are).
    """
    xd = x.data
    if idx.ndim == 1:
        sel = xd[:, idx, :]
    else:
        sel = np.take_along_axis(xd, idx[:, :, None], axis=1)
    out = Tensor(np.ascontiguousarray(sel))
    if _wants_grad(x):
        def bwd(g):
            dx = np.zeros_like(xd)
            if idx.ndim == 1:
                dx[:, idx, :] = g
            else:
                np.put_along_axis(dx, idx[:, :, None], g, axis=1)
            _acc(x, dx, donate=True)
        _record(out, bwd)
    return out


def assemble_tokens(visible: Tensor, vis_idx: np.ndarray, mask_token: Tensor,
                    total: int) -> Tensor:
    """Build the decoder input sequence: mask token everywhere, visible tokens
    scattered to their flat patch positions.

    visible: (B, V, d); vis_idx: (V,) or (B, V) unique positions in [0, total).
    """
    vd = visible.data
    B, V, d = vd.shape
    out_arr = np.broadcast_to(mask_token.data, (B, total, d)).copy()
    if vis_idx.ndim == 1:
        out_arr[:, vis_idx, :] = vd
        n_masked = total - len(vis_idx)
    else:
        np.put_along_axis(out_arr, vis_idx[:, :, None], vd, axis=1)
        n_masked = total - vis_idx.shape[1]
    out = Tensor(_chk(out_arr))
    if _wants_grad(visible, mask_token):
        def bwd(g):
            if vis_idx.ndim == 1:
                gv = g[:, vis_idx, :]
            else:
                gv = np.take_along_axis(g, vis_idx[:, :, None], axis=1)
            if mask_token.requires_grad:
                _acc(mask_token, g.sum(axis=(0, 1)) - gv.sum(axis=(0, 1)), donate=True)
            if visible.requires_grad:
                _acc(visible, np.ascontiguousarray(gv), donate=True)
        _record(out, bwd)
    return out


def mean_pool_axis1(x: Tensor) -> Tensor:
    """Mean over axis 1 of (B, L, d) -> (B, d)."""
    xd = x.data
    L = xd.shape[1]
    out = Tensor(_chk(xd.mean(axis=1)))
    if _wants_grad(x):
        def bwd(g):
            _acc(x, np.broadcast_to(g[:, None, :] / g.dtype.type(L), xd.shape).copy(),
                 donate=True)
        _record(out, bwd)
    return out


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    ld = logits.data
    n = ld.shape[0]
    shifted = ld - ld.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    nll = lse - shifted[np.arange(n), labels]
    out = Tensor(_chk(np.asarray(nll.mean(), dtype=ld.dtype).reshape(())))
    if _wants_grad(logits):
        def bwd(g):
            p = np.exp(shifted)
            p /= p.sum(axis=1, keepdims=True)
            p[np.arange(n), labels] -= 1.0
            p *= g.reshape(()) / ld.dtype.type(n)
            _acc(logits, p.astype(ld.dtype, copy=False), donate=True)
        _record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------

def grad_check(f: Callable[[], Tensor], params: dict[str, Tensor],
               h: float = 1e-5) -> float:
    """Max over parameters of the relative error between the analytic gradient
    and central differences: |analytic - fd| / max(|analytic|, |fd|, 1e-12),
    with |.| the Euclidean norm over each parameter's coordinates.

    f rebuilds the scalar loss graph from the current parameter values; call
    under float64 precision.
    """
    if default_dtype() != np.float64:
        raise RuntimeError("grad_check requires float64 mode")
    zero_grads(params)
    with Tape() as tape:
        loss = f()
        if not np.isfinite(loss.data).all():
            raise FloatingPointError("non-finite loss in grad_check")
        tape.backward(loss)
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()}
    worst = 0.0
    for k, p in params.items():
        flat = p.data.reshape(-1)
        fd = np.empty_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = f().item()
            flat[i] = orig - h
            lm = f().item()
            flat[i] = orig
            fd[i] = (lp - lm) / (2.0 * h)
        aflat = analytic[k].reshape(-1)
        num = float(np.linalg.norm(aflat - fd))
        den = max(float(np.linalg.norm(aflat)), float(np.linalg.norm(fd)), 1e-12)
        worst = max(worst, num / den)
    return worst
