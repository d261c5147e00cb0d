"""Pure-NumPy fallback for the compiled kernels (same signatures and semantics)."""
import numpy as np
from scipy.special import erf

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


def bmm_nt(a, b, scale):
    out = np.matmul(a, b.swapaxes(-1, -2))
    out *= out.dtype.type(scale)
    return out


def softmax_rows(x):
    x -= x.max(axis=1, keepdims=True)
    np.exp(x, out=x)
    x /= x.sum(axis=1, keepdims=True)


def softmax_rows_bwd(y, dy):
    s = np.einsum("rc,rc->r", y, dy)
    dy -= s[:, None]
    dy *= y


def layernorm_rows(x, gain, bias, eps):
    mean = x.mean(axis=1)
    var = x.var(axis=1)
    rstd = 1.0 / np.sqrt(var + x.dtype.type(eps))
    out = (x - mean[:, None]) * rstd[:, None] * gain + bias
    return out, mean, rstd


def gelu(x):
    return (0.5 * x * (1.0 + erf(x * _INV_SQRT2))).astype(x.dtype, copy=False)


def gelu_bwd(x, dy):
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
    return (dy * (cdf + x * pdf)).astype(x.dtype, copy=False)


def adamw_update(p, g, m, v, lr, beta1, beta2, eps, weight_decay, bc1, bc2):
    dt = p.dtype.type
    m *= dt(beta1)
    m += dt(1.0 - beta1) * g
    v *= dt(beta2)
    v += dt(1.0 - beta2) * g * g
    mh = m / dt(bc1)
    vh = v / dt(bc2)
    p *= dt(1.0 - lr * weight_decay)
    p -= dt(lr) * mh / (np.sqrt(vh) + dt(eps))
