# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled hot kernels: batched thin-K matmul, fused softmax/layernorm/GELU, AdamW.

Every kernel parallelizes over independent rows (static schedule, no cross-thread
reductions), so results are bitwise reproducible for any thread count.
"""
import numpy as np

cimport numpy as cnp
from cython.parallel cimport prange
from libc.math cimport erf, erff, exp, expf, sqrt, sqrtf

ctypedef fused real:
    float
    double


def bmm_nt(real[:, :, ::1] a, real[:, :, ::1] b, double scale):
    """out[n] = scale * a[n] @ b[n].T for a:(N,M,K), b:(N,P,K) -> (N,M,P).

    BLAS handles this shape poorly when K is small (attention head dim);
    a direct blocked loop wins by ~3x there.
    """
    cdef Py_ssize_t N = a.shape[0], M = a.shape[1], K = a.shape[2], P = b.shape[1]
    if b.shape[0] != N or b.shape[2] != K:
        raise ValueError("bmm_nt: shape mismatch")
    if real is float:
        out_arr = np.empty((N, M, P), dtype=np.float32)
    else:
        out_arr = np.empty((N, M, P), dtype=np.float64)
    cdef real[:, :, ::1] out = out_arr
    cdef Py_ssize_t nm, n, m, p, k
    cdef real acc, s = <real> scale
    cdef real *ar
    cdef real *br
    cdef real *orow
    with nogil:
        for nm in prange(N * M, schedule='static'):
            n = nm // M
            m = nm % M
            ar = &a[n, m, 0]
            orow = &out[n, m, 0]
            for p in range(P):
                br = &b[n, p, 0]
                acc = 0
                for k in range(K):
                    acc = acc + ar[k] * br[k]
                orow[p] = acc * s
    return out_arr


def softmax_rows(real[:, ::1] x):
    """In-place stabilized softmax over the last axis of a 2D array."""
    cdef Py_ssize_t R = x.shape[0], C = x.shape[1]
    cdef Py_ssize_t r, c
    cdef real mx, sm, inv
    cdef real *row
    with nogil:
        for r in prange(R, schedule='static'):
            row = &x[r, 0]
            mx = row[0]
            for c in range(1, C):
                if row[c] > mx:
                    mx = row[c]
            if real is float:
                for c in range(C):
                    row[c] = expf(row[c] - mx)
            else:
                for c in range(C):
                    row[c] = exp(row[c] - mx)
            sm = 0
            for c in range(C):
                sm = sm + row[c]
            inv = 1 / sm
            for c in range(C):
                row[c] = row[c] * inv


def softmax_rows_bwd(real[:, ::1] y, real[:, ::1] dy):
    """dy <- y * (dy - sum(y * dy, axis=1)) in place; y is the softmax output."""
    cdef Py_ssize_t R = y.shape[0], C = y.shape[1]
    cdef Py_ssize_t r, c
    cdef real s
    cdef real *yr
    cdef real *dr
    with nogil:
        for r in prange(R, schedule='static'):
            yr = &y[r, 0]
            dr = &dy[r, 0]
            s = 0
            for c in range(C):
                s = s + yr[c] * dr[c]
            for c in range(C):
                dr[c] = yr[c] * (dr[c] - s)


def layernorm_rows(real[:, ::1] x, real[::1] gain, real[::1] bias, double eps):
    """Row layer norm; returns (out, mean, rstd) with mean/rstd saved for backward."""
    cdef Py_ssize_t R = x.shape[0], C = x.shape[1]
    if gain.shape[0] != C or bias.shape[0] != C:
        raise ValueError("layernorm_rows: gain/bias length mismatch")
    if real is float:
        out_arr = np.empty((R, C), dtype=np.float32)
        mean_arr = np.empty(R, dtype=np.float32)
        rstd_arr = np.empty(R, dtype=np.float32)
    else:
        out_arr = np.empty((R, C), dtype=np.float64)
        mean_arr = np.empty(R, dtype=np.float64)
        rstd_arr = np.empty(R, dtype=np.float64)
    cdef real[:, ::1] out = out_arr
    cdef real[::1] mean = mean_arr
    cdef real[::1] rstd = rstd_arr
    cdef Py_ssize_t r, c
    cdef real mu, var, rs, d
    cdef real e = <real> eps
    cdef real *row
    cdef real *orow
    with nogil:
        for r in prange(R, schedule='static'):
            row = &x[r, 0]
            orow = &out[r, 0]
            mu = 0
            for c in range(C):
                mu = mu + row[c]
            mu = mu / C
            var = 0
            for c in range(C):
                d = row[c] - mu
                var = var + d * d
            var = var / C
            if real is float:
                rs = 1 / sqrtf(var + e)
            else:
                rs = 1 / sqrt(var + e)
            mean[r] = mu
            rstd[r] = rs
            for c in range(C):
                orow[c] = (row[c] - mu) * rs * gain[c] + bias[c]
    return out_arr, mean_arr, rstd_arr


cdef inline float _erf_poly(float x) nogil:
    # Abramowitz-Stegun 7.1.26, |error| <= 1.5e-7; exp vectorizes, libm erff
    # does not
    cdef float sign = 1.0 if x >= 0 else -1.0
    cdef float ax = x if x >= 0 else -x
    cdef float t = 1.0 / (1.0 + 0.3275911 * ax)
    cdef float poly = t * (0.254829592 + t * (-0.284496736 + t * (1.421413741
                      + t * (-1.453152027 + t * 1.061405429))))
    return sign * (1.0 - poly * expf(-ax * ax))


def gelu(real[::1] x):
    """erf-based GELU on a flat array (float32 uses a 1.5e-7-accurate erf)."""
    cdef Py_ssize_t N = x.shape[0]
    if real is float:
        out_arr = np.empty(N, dtype=np.float32)
    else:
        out_arr = np.empty(N, dtype=np.float64)
    cdef real[::1] out = out_arr
    cdef Py_ssize_t i
    cdef real v
    cdef real inv_sqrt2 = <real> 0.7071067811865476
    with nogil:
        for i in prange(N, schedule='static'):
            v = x[i]
            if real is float:
                out[i] = <real> 0.5 * v * (1 + _erf_poly(v * inv_sqrt2))
            else:
                out[i] = <real> 0.5 * v * (1 + erf(v * inv_sqrt2))
    return out_arr


def gelu_bwd(real[::1] x, real[::1] dy):
    """dx = dy * (0.5 (1 + erf(x/sqrt(2))) + x exp(-x^2/2)/sqrt(2 pi))."""
    cdef Py_ssize_t N = x.shape[0]
    if real is float:
        out_arr = np.empty(N, dtype=np.float32)
    else:
        out_arr = np.empty(N, dtype=np.float64)
    cdef real[::1] out = out_arr
    cdef Py_ssize_t i
    cdef real v, cdf, pdf
    cdef real inv_sqrt2 = <real> 0.7071067811865476
    cdef real inv_sqrt2pi = <real> 0.3989422804014327
    with nogil:
        for i in prange(N, schedule='static'):
            v = x[i]
            if real is float:
                cdf = <real> 0.5 * (1 + _erf_poly(v * inv_sqrt2))
                pdf = expf(<real> -0.5 * v * v) * inv_sqrt2pi
            else:
                cdf = <real> 0.5 * (1 + erf(v * inv_sqrt2))
                pdf = exp(<real> -0.5 * v * v) * inv_sqrt2pi
            out[i] = dy[i] * (cdf + v * pdf)
    return out_arr


def adamw_update(real[::1] p, real[::1] g, real[::1] m, real[::1] v,
                 double lr, double beta1, double beta2, double eps,
                 double weight_decay, double bc1, double bc2):
    """Fused decoupled-weight-decay Adam step, in place on flat views.

    bc1/bc2 are the bias corrections 1 - beta^t precomputed by the caller.
    """
    cdef Py_ssize_t N = p.shape[0]
    cdef Py_ssize_t i
    cdef real b1 = <real> beta1, b2 = <real> beta2
    cdef real ob1 = <real> (1.0 - beta1), ob2 = <real> (1.0 - beta2)
    cdef real alr = <real> lr, e = <real> eps
    cdef real decay = <real> (1.0 - lr * weight_decay)
    cdef real ibc1 = <real> (1.0 / bc1), ibc2 = <real> (1.0 / bc2)
    cdef real gi, mh, vh
    with nogil:
        for i in prange(N, schedule='static'):
            gi = g[i]
            m[i] = b1 * m[i] + ob1 * gi
            v[i] = b2 * v[i] + ob2 * gi * gi
            mh = m[i] * ibc1
            vh = v[i] * ibc2
            if real is float:
                p[i] = p[i] * decay - alr * mh / (sqrtf(vh) + e)
            else:
                p[i] = p[i] * decay - alr * mh / (sqrt(vh) + e)
