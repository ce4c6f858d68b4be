# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled implementations of the hot numeric kernels.

Mirrors kernels_numpy function for function; tsgen.nn.kernels picks
this lane when the extension is importable. Loops fuse the elementwise
work that the numpy lane spreads over temporaries, which is where the
speedup comes from; matrix multiplies stay in numpy/BLAS either way.
"""

from libc.math cimport erf, exp, sqrt, INFINITY

import numpy as np

ctypedef fused real:
    float
    double

cdef double INV_SQRT2 = 0.7071067811865476
cdef double INV_SQRT_2PI = 0.3989422804014327


# ---------------------------------------------------------------------------
# gelu

cdef void _gelu_fwd(real[::1] x, real[::1] out) noexcept nogil:
    cdef Py_ssize_t i, n = x.shape[0]
    cdef double v
    for i in range(n):
        v = <double> x[i]
        out[i] = <real> (0.5 * v * (1.0 + erf(v * INV_SQRT2)))


cdef void _gelu_bwd(real[::1] x, real[::1] g, real[::1] out) noexcept nogil:
    cdef Py_ssize_t i, n = x.shape[0]
    cdef double v, cdf, pdf
    for i in range(n):
        v = <double> x[i]
        cdf = 0.5 * (1.0 + erf(v * INV_SQRT2))
        pdf = exp(-0.5 * v * v) * INV_SQRT_2PI
        out[i] = <real> ((<double> g[i]) * (cdf + v * pdf))


def gelu_forward(x):
    arr = np.ascontiguousarray(x)
    out = np.empty_like(arr)
    cdef Py_ssize_t n = arr.size
    cdef float[::1] xf, of
    cdef double[::1] xd, od
    if arr.dtype == np.float32:
        xf = arr.reshape(n); of = out.reshape(n)
        _gelu_fwd(xf, of)
    elif arr.dtype == np.float64:
        xd = arr.reshape(n); od = out.reshape(n)
        _gelu_fwd(xd, od)
    else:
        raise TypeError(f"unsupported dtype {arr.dtype}")
    return out


def gelu_backward(x, grad_out):
    arr = np.ascontiguousarray(x)
    g = np.ascontiguousarray(grad_out, dtype=arr.dtype)
    out = np.empty_like(arr)
    cdef Py_ssize_t n = arr.size
    cdef float[::1] xf, gf, of
    cdef double[::1] xd, gd, od
    if arr.dtype == np.float32:
        xf = arr.reshape(n); gf = g.reshape(n); of = out.reshape(n)
        _gelu_bwd(xf, gf, of)
    elif arr.dtype == np.float64:
        xd = arr.reshape(n); gd = g.reshape(n); od = out.reshape(n)
        _gelu_bwd(xd, gd, od)
    else:
        raise TypeError(f"unsupported dtype {arr.dtype}")
    return out


# ---------------------------------------------------------------------------
# layer norm

cdef void _ln_fwd(real[:, ::1] x, real[::1] gain, real[::1] bias, double eps,
                  real[:, ::1] out, real[::1] mean, real[::1] rstd) noexcept nogil:
    cdef Py_ssize_t r, j, rows = x.shape[0], d = x.shape[1]
    cdef double mu, var, dev, rs
    for r in range(rows):
        mu = 0.0
        for j in range(d):
            mu += <double> x[r, j]
        mu /= d
        var = 0.0
        for j in range(d):
            dev = (<double> x[r, j]) - mu
            var += dev * dev
        var /= d
        rs = 1.0 / sqrt(var + eps)
        mean[r] = <real> mu
        rstd[r] = <real> rs
        for j in range(d):
            out[r, j] = <real> ((((<double> x[r, j]) - mu) * rs) * (<double> gain[j]) + (<double> bias[j]))


cdef void _ln_bwd(real[:, ::1] x, real[::1] gain, real[::1] mean, real[::1] rstd,
                  real[:, ::1] g, real[:, ::1] gx, double[::1] ggain, double[::1] gbias) noexcept nogil:
    cdef Py_ssize_t r, j, rows = x.shape[0], d = x.shape[1]
    cdef double mu, rs, xhat, gxh, m1, m2, go
    for r in range(rows):
        mu = <double> mean[r]
        rs = <double> rstd[r]
        m1 = 0.0
        m2 = 0.0
        for j in range(d):
            xhat = ((<double> x[r, j]) - mu) * rs
            gxh = (<double> g[r, j]) * (<double> gain[j])
            m1 += gxh
            m2 += gxh * xhat
        m1 /= d
        m2 /= d
        for j in range(d):
            xhat = ((<double> x[r, j]) - mu) * rs
            gxh = (<double> g[r, j]) * (<double> gain[j])
            go = <double> g[r, j]
            gx[r, j] = <real> (rs * (gxh - m1 - xhat * m2))
            ggain[j] += go * xhat
            gbias[j] += go


def layer_norm_forward(x, gain, bias, double eps):
    arr = np.ascontiguousarray(x)
    # positive indices only: wraparound is compiled out module-wide
    d = arr.shape[arr.ndim - 1]
    rows = arr.size // d
    x2 = arr.reshape(rows, d)
    gain_c = np.ascontiguousarray(gain, dtype=arr.dtype)
    bias_c = np.ascontiguousarray(bias, dtype=arr.dtype)
    out = np.empty_like(x2)
    mean = np.empty(rows, dtype=arr.dtype)
    rstd = np.empty(rows, dtype=arr.dtype)
    cdef float[:, ::1] xf, outf
    cdef float[::1] gf, bf, mf, rf
    cdef double[:, ::1] xd, outd
    cdef double[::1] gd, bd, md, rd
    if arr.dtype == np.float32:
        xf = x2; outf = out; gf = gain_c; bf = bias_c; mf = mean; rf = rstd
        _ln_fwd(xf, gf, bf, eps, outf, mf, rf)
    elif arr.dtype == np.float64:
        xd = x2; outd = out; gd = gain_c; bd = bias_c; md = mean; rd = rstd
        _ln_fwd(xd, gd, bd, eps, outd, md, rd)
    else:
        raise TypeError(f"unsupported dtype {arr.dtype}")
    stat_shape = arr.shape[:-1] + (1,)
    return out.reshape(arr.shape), mean.reshape(stat_shape), rstd.reshape(stat_shape)


def layer_norm_backward(x, gain, mean, rstd, grad_out):
    arr = np.ascontiguousarray(x)
    d = arr.shape[arr.ndim - 1]
    rows = arr.size // d
    x2 = arr.reshape(rows, d)
    g2 = np.ascontiguousarray(grad_out, dtype=arr.dtype).reshape(rows, d)
    gain_c = np.ascontiguousarray(gain, dtype=arr.dtype)
    mean_c = np.ascontiguousarray(mean, dtype=arr.dtype).reshape(rows)
    rstd_c = np.ascontiguousarray(rstd, dtype=arr.dtype).reshape(rows)
    gx = np.empty_like(x2)
    ggain = np.zeros(d, dtype=np.float64)
    gbias = np.zeros(d, dtype=np.float64)
    cdef float[:, ::1] xf, gf, gxf
    cdef float[::1] gainf, mf, rf
    cdef double[:, ::1] xd, gd, gxd
    cdef double[::1] gaind, md, rd
    cdef double[::1] ggv = ggain, gbv = gbias
    if arr.dtype == np.float32:
        xf = x2; gf = g2; gxf = gx; gainf = gain_c; mf = mean_c; rf = rstd_c
        _ln_bwd(xf, gainf, mf, rf, gf, gxf, ggv, gbv)
    elif arr.dtype == np.float64:
        xd = x2; gd = g2; gxd = gx; gaind = gain_c; md = mean_c; rd = rstd_c
        _ln_bwd(xd, gaind, md, rd, gd, gxd, ggv, gbv)
    else:
        raise TypeError(f"unsupported dtype {arr.dtype}")
    return gx.reshape(arr.shape), ggain.astype(arr.dtype), gbias.astype(arr.dtype)


# ---------------------------------------------------------------------------
# causal softmax

cdef void _csm_fwd(real[:, :, ::1] s, real[:, :, ::1] p) noexcept nogil:
    cdef Py_ssize_t b, i, j, rows = s.shape[0], n = s.shape[1]
    cdef double mx, tot, v
    for b in range(rows):
        for i in range(n):
            mx = -INFINITY
            for j in range(i + 1):
                v = <double> s[b, i, j]
                if v > mx:
                    mx = v
            tot = 0.0
            for j in range(i + 1):
                v = exp((<double> s[b, i, j]) - mx)
                p[b, i, j] = <real> v
                tot += v
            for j in range(i + 1):
                p[b, i, j] = <real> ((<double> p[b, i, j]) / tot)
            for j in range(i + 1, n):
                p[b, i, j] = <real> 0.0


cdef void _csm_bwd(real[:, :, ::1] p, real[:, :, ::1] g, real[:, :, ::1] gs) noexcept nogil:
    cdef Py_ssize_t b, i, j, rows = p.shape[0], n = p.shape[1]
    cdef double inner
    for b in range(rows):
        for i in range(n):
            inner = 0.0
            for j in range(i + 1):
                inner += (<double> p[b, i, j]) * (<double> g[b, i, j])
            for j in range(i + 1):
                gs[b, i, j] = <real> ((<double> p[b, i, j]) * ((<double> g[b, i, j]) - inner))
            for j in range(i + 1, n):
                gs[b, i, j] = <real> 0.0


def causal_softmax_forward(scores):
    arr = np.ascontiguousarray(scores)
    n = arr.shape[arr.ndim - 1]
    if arr.shape[arr.ndim - 2] != n:
        raise ValueError(f"causal softmax expects square last axes, got {arr.shape}")
    rows = arr.size // (n * n)
    s3 = arr.reshape(rows, n, n)
    out = np.empty_like(s3)
    cdef float[:, :, ::1] sf, pf
    cdef double[:, :, ::1] sd, pd
    if arr.dtype == np.float32:
        sf = s3; pf = out
        _csm_fwd(sf, pf)
    elif arr.dtype == np.float64:
        sd = s3; pd = out
        _csm_fwd(sd, pd)
    else:
        raise TypeError(f"unsupported dtype {arr.dtype}")
    return out.reshape(arr.shape)


def causal_softmax_backward(probs, grad_out):
    arr = np.ascontiguousarray(probs)
    n = arr.shape[arr.ndim - 1]
    rows = arr.size // (n * n)
    p3 = arr.reshape(rows, n, n)
    g3 = np.ascontiguousarray(grad_out, dtype=arr.dtype).reshape(rows, n, n)
    out = np.empty_like(p3)
    cdef float[:, :, ::1] pf, gf, of
    cdef double[:, :, ::1] pd, gd, od
    if arr.dtype == np.float32:
        pf = p3; gf = g3; of = out
        _csm_bwd(pf, gf, of)
    elif arr.dtype == np.float64:
        pd = p3; gd = g3; od = out
        _csm_bwd(pd, gd, od)
    else:
        raise TypeError(f"unsupported dtype {arr.dtype}")
    return out.reshape(arr.shape)


# ---------------------------------------------------------------------------
# optimizer update

cdef void _adamw(real[::1] p, real[::1] g, real[::1] m, real[::1] v,
                 double lr, double b1, double b2, double eps, double wd,
                 double bc1, double bc2) noexcept nogil:
    cdef Py_ssize_t i, n = p.shape[0]
    cdef double gi, mi, vi, pi
    cdef double decay = 1.0 - lr * wd
    for i in range(n):
        gi = <double> g[i]
        mi = b1 * (<double> m[i]) + (1.0 - b1) * gi
        vi = b2 * (<double> v[i]) + (1.0 - b2) * gi * gi
        m[i] = <real> mi
        v[i] = <real> vi
        pi = <double> p[i]
        if wd != 0.0:
            pi *= decay
        pi -= lr * (mi / bc1) / (sqrt(vi / bc2) + eps)
        p[i] = <real> pi


def adamw_update(param, grad, m, v, double lr, double beta1, double beta2,
                 double eps, double weight_decay, double bias_corr1, double bias_corr2):
    if not (param.flags["C_CONTIGUOUS"] and m.flags["C_CONTIGUOUS"] and v.flags["C_CONTIGUOUS"]):
        raise ValueError("optimizer buffers must be C-contiguous")
    g = np.ascontiguousarray(grad, dtype=param.dtype)
    cdef Py_ssize_t n = param.size
    cdef float[::1] pf, gf, mf, vf
    cdef double[::1] pd, gd, md, vd
    if param.dtype == np.float32:
        pf = param.reshape(n); gf = g.reshape(n); mf = m.reshape(n); vf = v.reshape(n)
        _adamw(pf, gf, mf, vf, lr, beta1, beta2, eps, weight_decay, bias_corr1, bias_corr2)
    elif param.dtype == np.float64:
        pd = param.reshape(n); gd = g.reshape(n); md = m.reshape(n); vd = v.reshape(n)
        _adamw(pd, gd, md, vd, lr, beta1, beta2, eps, weight_decay, bias_corr1, bias_corr2)
    else:
        raise TypeError(f"unsupported dtype {param.dtype}")
