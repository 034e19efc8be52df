# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops.

``euler_gbm`` and ``bridge_path_weights`` mirror ``_kernels_py``.  The
``mlp1_*`` pair is a fused forward/backward for the one-hidden-layer Elu net
with optional per-step batch normalization; its NumPy counterpart is the
generic layer code in ``nn``.
"""

import numpy as np

from libc.math cimport exp, sqrt


def euler_gbm(double x0, double drift_dt, double vol, const double[:, ::1] dw):
    cdef Py_ssize_t n_paths = dw.shape[0], n_steps = dw.shape[1], p, i
    out = np.empty((n_paths, n_steps + 1))
    cdef double[:, ::1] x = out
    cdef double xi
    for p in range(n_paths):
        xi = x0
        x[p, 0] = xi
        for i in range(n_steps):
            xi = xi + drift_dt * xi + vol * xi * dw[p, i]
            x[p, i + 1] = xi
    return out


def bridge_path_weights(const double[:, ::1] z, double log_x0, double mu_dt, double vol_sqrt_dt,
                        double log_barrier, double var_dt):
    cdef Py_ssize_t n_paths = z.shape[0], n_steps = z.shape[1], p, i
    xt_arr = np.empty(n_paths)
    w_arr = np.empty(n_paths)
    cdef double[::1] xt = xt_arr
    cdef double[::1] wt = w_arr
    cdef double lx, gap_prev, gap, w, s, scale = -2.0 / var_dt
    for p in range(n_paths):
        lx = log_x0
        gap_prev = log_barrier - lx
        w = 1.0 if gap_prev > 0.0 else 0.0
        for i in range(n_steps):
            lx = lx + mu_dt + vol_sqrt_dt * z[p, i]
            gap = log_barrier - lx
            if gap <= 0.0:
                w = 0.0
            if w != 0.0:
                s = scale * gap_prev * gap
                # below -40 the crossing factor is < 5e-18 and 1 - it rounds to 1
                if s > -40.0:
                    s = 1.0 - exp(s)
                    if s < 0.0:
                        s = 0.0
                    w = w * s
            gap_prev = gap
        xt[p] = exp(lx)
        wt[p] = w
    return xt_arr, w_arr


cdef void _col_stats(const double* v, Py_ssize_t n, Py_ssize_t w, double* mean, double* var) noexcept nogil:
    # mean / biased variance of each column of a row-major (n, w) block
    cdef Py_ssize_t b, c
    cdef double t
    for c in range(w):
        mean[c] = 0.0
        var[c] = 0.0
    for b in range(n):
        for c in range(w):
            mean[c] += v[b * w + c]
    for c in range(w):
        mean[c] /= n
    for b in range(n):
        for c in range(w):
            t = v[b * w + c] - mean[c]
            var[c] += t * t
    for c in range(w):
        var[c] /= n


cdef void _bn_apply(const double* v, double* xhat, double* out, Py_ssize_t n, Py_ssize_t w,
                    const double* mean, const double* istd, const double* gamma,
                    const double* beta) noexcept nogil:
    cdef Py_ssize_t b, c
    cdef double t
    for b in range(n):
        for c in range(w):
            t = (v[b * w + c] - mean[c]) * istd[c]
            xhat[b * w + c] = t
            out[b * w + c] = gamma[c] * t + beta[c]


cdef void _bn_back(double* g, const double* xhat, Py_ssize_t n, Py_ssize_t w, const double* gamma,
                   const double* istd, double* dgamma, double* dbeta, double* t1, double* t2,
                   bint training) noexcept nogil:
    # in place: g holds d(out) on entry and d(in) on exit
    cdef Py_ssize_t b, c
    cdef double inv_n = 1.0 / n
    for c in range(w):
        dgamma[c] = 0.0
        dbeta[c] = 0.0
    for b in range(n):
        for c in range(w):
            dgamma[c] += g[b * w + c] * xhat[b * w + c]
            dbeta[c] += g[b * w + c]
    for c in range(w):
        # column sums of dxhat * xhat and dxhat, over n, where dxhat = gamma * dout
        t1[c] = dgamma[c] * gamma[c] * inv_n
        t2[c] = dbeta[c] * gamma[c] * inv_n
    for b in range(n):
        for c in range(w):
            if training:
                g[b * w + c] = istd[c] * (gamma[c] * g[b * w + c] - t2[c] - xhat[b * w + c] * t1[c])
            else:
                g[b * w + c] = istd[c] * gamma[c] * g[b * w + c]


def _c(a):
    return None if a is None else np.ascontiguousarray(a, dtype=np.float64)


def mlp1_forward(x, w0, b0, w1, double b1, g0, be0, rm0, rv0, g1, be1, rm1, rv1, bint training, double eps):
    """Fused forward pass.

    ``g0/be0`` (S, D) and ``g1/be1`` (S, H) are the BN rows already gathered
    for each slab, or ``None`` when that layer is not normalized.  Running
    statistics are only read in inference mode.
    """
    x, w0, b0, w1 = _c(x), _c(w0), _c(b0), _c(w1)
    g0, be0, rm0, rv0, g1, be1, rm1, rv1 = map(_c, (g0, be0, rm0, rv0, g1, be1, rm1, rv1))
    cdef Py_ssize_t S = x.shape[0], B = x.shape[1], D = x.shape[2], H = w0.shape[1]
    cdef Py_ssize_t s, b, d, h
    cdef bint bn0 = g0 is not None, bn1 = g1 is not None
    if (bn0 or bn1) and training and B < 2:
        raise ValueError("batch normalization in training mode needs batch size >= 2")

    z_arr = np.empty((S, B))
    xin_arr = np.empty((S, B, D)) if bn0 else x
    xhat0_arr = np.empty((S, B, D)) if bn0 else np.empty((1, 1, 1))
    ahat_arr = np.empty((S, B, H)) if bn1 else np.empty((1, 1, 1))
    m0_arr, v0_arr, i0_arr = np.empty((S, D)), np.empty((S, D)), np.empty((S, D))
    m1_arr, v1_arr, i1_arr = np.empty((S, H)), np.empty((S, H)), np.empty((S, H))
    act_arr = np.empty((S, B, H))
    dummy = np.zeros((1, 1))

    cdef const double[:, :, ::1] vx = x
    cdef double[:, ::1] vz = z_arr
    cdef double[:, :, ::1] vxin = xin_arr
    cdef double[:, :, ::1] vxhat0 = xhat0_arr
    cdef double[:, :, ::1] vahat = ahat_arr
    cdef double[:, ::1] vm0 = m0_arr, vv0 = v0_arr, vi0 = i0_arr
    cdef double[:, ::1] vm1 = m1_arr, vv1 = v1_arr, vi1 = i1_arr
    cdef double[:, :, ::1] vact = act_arr
    cdef const double[:, ::1] vw0 = w0
    cdef const double[::1] vb0 = b0
    cdef const double[::1] vw1 = w1
    cdef const double[:, ::1] vg0 = g0 if bn0 else dummy
    cdef const double[:, ::1] vbe0 = be0 if bn0 else dummy
    cdef const double[:, ::1] vrm0 = rm0 if bn0 and not training else dummy
    cdef const double[:, ::1] vrv0 = rv0 if bn0 and not training else dummy
    cdef const double[:, ::1] vg1 = g1 if bn1 else dummy
    cdef const double[:, ::1] vbe1 = be1 if bn1 else dummy
    cdef const double[:, ::1] vrm1 = rm1 if bn1 and not training else dummy
    cdef const double[:, ::1] vrv1 = rv1 if bn1 and not training else dummy

    cdef const double* xs
    cdef double* xi
    cdef double* row
    cdef double* er
    cdef const double* wr
    cdef double xv, acc, t

    pre_arr = np.empty((B, H))
    e_arr = np.empty((B, H))
    cdef double[:, ::1] vpre = pre_arr
    cdef double[:, ::1] ve = e_arr

    # one slab at a time so the (B, H) temporaries stay in cache
    for s in range(S):
        with nogil:
            xs = &vx[s, 0, 0]
            if bn0:
                if training:
                    _col_stats(xs, B, D, &vm0[s, 0], &vv0[s, 0])
                else:
                    for d in range(D):
                        vm0[s, d] = vrm0[s, d]
                        vv0[s, d] = vrv0[s, d]
                for d in range(D):
                    vi0[s, d] = 1.0 / sqrt(vv0[s, d] + eps)
                _bn_apply(xs, &vxhat0[s, 0, 0], &vxin[s, 0, 0], B, D, &vm0[s, 0], &vi0[s, 0],
                          &vg0[s, 0], &vbe0[s, 0])
            xi = &vxin[s, 0, 0]
            for b in range(B):
                row = &vpre[b, 0]
                for h in range(H):
                    row[h] = vb0[h]
                for d in range(D):
                    xv = xi[b * D + d]
                    wr = &vw0[d, 0]
                    for h in range(H):
                        row[h] += xv * wr[h]
            if bn1:
                row = &vpre[0, 0]
                if training:
                    _col_stats(row, B, H, &vm1[s, 0], &vv1[s, 0])
                else:
                    for h in range(H):
                        vm1[s, h] = vrm1[s, h]
                        vv1[s, h] = vrv1[s, h]
                for h in range(H):
                    vi1[s, h] = 1.0 / sqrt(vv1[s, h] + eps)
                _bn_apply(row, &vahat[s, 0, 0], row, B, H, &vm1[s, 0], &vi1[s, 0], &vg1[s, 0], &vbe1[s, 0])

        # NumPy's vectorized exp is several times faster than scalar libm
        np.minimum(pre_arr, 0.0, out=e_arr)
        np.exp(e_arr, out=e_arr)

        with nogil:
            for b in range(B):
                row = &vact[s, b, 0]
                wr = &vpre[b, 0]
                er = &ve[b, 0]
                acc = b1
                for h in range(H):
                    t = wr[h]
                    if t <= 0.0:
                        t = er[h] - 1.0
                    row[h] = t
                    acc = acc + t * vw1[h]
                vz[s, b] = acc

    cache = {
        "xin": xin_arr, "act": act_arr, "training": bool(training),
        "xhat0": xhat0_arr if bn0 else None, "istd0": i0_arr if bn0 else None,
        "mean0": m0_arr if bn0 else None, "var0": v0_arr if bn0 else None,
        "ahat": ahat_arr if bn1 else None, "istd1": i1_arr if bn1 else None,
        "mean1": m1_arr if bn1 else None, "var1": v1_arr if bn1 else None,
    }
    return z_arr, cache


def mlp1_backward(dz, dict cache, w0, w1, g0, g1):
    """Gradients of the fused pass.

    Returns ``dW0, db0, dW1, db1, dg0, dbe0, dg1, dbe1, dx`` where the BN
    gradients are per slab (S, width) and ``None`` for unnormalized layers.
    """
    dz, w0, w1, g0, g1 = _c(dz), _c(w0), _c(w1), _c(g0), _c(g1)
    cdef Py_ssize_t S = dz.shape[0], B = dz.shape[1], D = w0.shape[0], H = w0.shape[1]
    cdef Py_ssize_t s, b, d, h
    cdef bint bn0 = g0 is not None, bn1 = g1 is not None
    cdef bint training = cache["training"]
    dummy3 = np.zeros((1, 1, 1))
    dummy2 = np.zeros((1, 1))

    dw0_arr = np.zeros((D, H))
    db0_arr = np.zeros(H)
    dw1_arr = np.zeros(H)
    dg0_arr, dbe0_arr = np.zeros((S, D)), np.zeros((S, D))
    dg1_arr, dbe1_arr = np.zeros((S, H)), np.zeros((S, H))
    dx_arr = np.empty((S, B, D))
    work_arr = np.empty((B, H))
    t_arr = np.empty((2, max(D, H)))

    cdef const double[:, ::1] vdz = dz
    cdef double[:, ::1] vdw0 = dw0_arr
    cdef double[::1] vdb0 = db0_arr
    cdef double[::1] vdw1 = dw1_arr
    cdef double[:, ::1] vdg0 = dg0_arr, vdbe0 = dbe0_arr, vdg1 = dg1_arr, vdbe1 = dbe1_arr
    cdef double[:, :, ::1] vdx = dx_arr
    cdef double[:, ::1] work = work_arr
    cdef double[:, ::1] vt = t_arr
    cdef const double[:, :, ::1] xin = cache["xin"]
    cdef const double[:, :, ::1] act = cache["act"]
    cdef const double[:, :, ::1] xhat0 = cache["xhat0"] if bn0 else dummy3
    cdef const double[:, :, ::1] ahat = cache["ahat"] if bn1 else dummy3
    cdef const double[:, ::1] istd0 = cache["istd0"] if bn0 else dummy2
    cdef const double[:, ::1] istd1 = cache["istd1"] if bn1 else dummy2
    cdef const double[:, ::1] vg0 = g0 if bn0 else dummy2
    cdef const double[:, ::1] vg1 = g1 if bn1 else dummy2
    cdef const double[:, ::1] vw0 = w0
    cdef const double[::1] vw1 = w1
    cdef double db1 = 0.0, g, acc, xv
    cdef double* wk
    cdef double* dxs
    cdef const double* ac
    cdef const double* wr

    with nogil:
        for s in range(S):
            for b in range(B):
                g = vdz[s, b]
                db1 += g
                wk = &work[b, 0]
                ac = &act[s, b, 0]
                for h in range(H):
                    vdw1[h] += g * ac[h]
                    if ac[h] > 0.0:
                        wk[h] = g * vw1[h]
                    else:
                        wk[h] = g * vw1[h] * (ac[h] + 1.0)
            if bn1:
                _bn_back(&work[0, 0], &ahat[s, 0, 0], B, H, &vg1[s, 0], &istd1[s, 0],
                         &vdg1[s, 0], &vdbe1[s, 0], &vt[0, 0], &vt[1, 0], training)
            dxs = &vdx[s, 0, 0]
            for b in range(B):
                wk = &work[b, 0]
                for h in range(H):
                    vdb0[h] += wk[h]
                for d in range(D):
                    xv = xin[s, b, d]
                    wr = &vw0[d, 0]
                    acc = 0.0
                    for h in range(H):
                        vdw0[d, h] += xv * wk[h]
                        acc = acc + wk[h] * wr[h]
                    dxs[b * D + d] = acc
            if bn0:
                _bn_back(dxs, &xhat0[s, 0, 0], B, D, &vg0[s, 0], &istd0[s, 0],
                         &vdg0[s, 0], &vdbe0[s, 0], &vt[0, 0], &vt[1, 0], training)

    return (dw0_arr, db0_arr, dw1_arr, db1,
            dg0_arr if bn0 else None, dbe0_arr if bn0 else None,
            dg1_arr if bn1 else None, dbe1_arr if bn1 else None, dx_arr)
