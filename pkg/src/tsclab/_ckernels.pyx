# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels; same contract as ``tsclab._pykernels``.

Matrix products go through BLAS dgemm (via scipy's Cython bindings); the
elementwise work (bias, activations, softmax, Adam) runs in plain C loops,
which removes most of the per-call overhead of the NumPy path on the small
batches used here.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, sqrt, tanh
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()

DEF IDENTITY = 0
DEF RELU = 1
DEF TANH = 2


cdef inline void _gemm(char ta, char tb, int m, int n, int k, double *a, int lda,
                       double *b, int ldb, double *c, int ldc) noexcept nogil:
    cdef double one = 1.0, zero = 0.0
    dgemm(&ta, &tb, &m, &n, &k, &one, a, &lda, b, &ldb, &zero, c, &ldc)


cdef void _linear(double[:, ::1] h, double[::1] values, Py_ssize_t off, int nin, int nout,
                  int code, double[:, ::1] z) noexcept nogil:
    # z = act(h @ W.T + b), W row-major (nout, nin) at values[off]
    cdef int m = h.shape[0]
    cdef Py_ssize_t i, j
    cdef Py_ssize_t boff = off + <Py_ssize_t>nin * nout
    cdef double v
    if m == 0 or nout == 0:
        return
    _gemm(b'T', b'N', nout, m, nin, &values[off], nin, &h[0, 0], nin, &z[0, 0], nout)
    for i in range(m):
        for j in range(nout):
            v = z[i, j] + values[boff + j]
            if code == RELU:
                if v < 0.0:
                    v = 0.0
            elif code == TANH:
                v = tanh(v)
            z[i, j] = v


cdef void _check(double[::1] values, cnp.int64_t[:, ::1] table, object X) except *:
    # the loops below trust these shapes, so a mismatch must never reach them
    cdef Py_ssize_t li, L = table.shape[0], off = 0
    if L == 0 or table.shape[1] != 4:
        raise ValueError("layer table must have shape (L, 4) with L >= 1")
    if X.ndim != 2 or X.shape[1] != table[0, 1]:
        raise ValueError(f"input has shape {X.shape}, layer table expects width {table[0, 1]}")
    for li in range(L):
        if table[li, 0] != off or table[li, 1] < 1 or table[li, 2] < 0 \
                or (li > 0 and table[li, 1] != table[li - 1, 2]):
            raise ValueError(f"layer table row {li} is inconsistent")
        off += table[li, 2] * (table[li, 1] + 1)
    if values.shape[0] != off:
        raise ValueError(f"parameter vector has {values.shape[0]} entries, table needs {off}")


cdef list _forward_cache(double[::1] values, cnp.int64_t[:, ::1] table, object X,
                         int upto):
    # list of ndarrays: input, then each layer's output
    X = np.ascontiguousarray(X, dtype=np.float64)
    _check(values, table, X)
    cdef list acts = [X]
    cdef double[:, ::1] h = X
    cdef double[:, ::1] z
    cdef int li
    cdef int m = h.shape[0]
    for li in range(upto):
        out = np.empty((m, table[li, 2]))
        z = out
        _linear(h, values, table[li, 0], <int>table[li, 1], <int>table[li, 2],
                <int>table[li, 3], z)
        acts.append(out)
        h = z
    return acts


def forward(double[::1] values, cnp.int64_t[:, ::1] table, X):
    return _forward_cache(values, table, X, table.shape[0])[table.shape[0]]


def embed(double[::1] values, cnp.int64_t[:, ::1] table, X):
    return _forward_cache(values, table, X, table.shape[0] - 1)[table.shape[0] - 1]


cdef void _backward(double[::1] values, cnp.int64_t[:, ::1] table, list acts,
                    double[:, ::1] dout, double[::1] grad, int lowest):
    # dout: gradient wrt the post-activation output of the last layer; consumed.
    cdef int L = table.shape[0]
    cdef int li, nin, nout, code
    cdef Py_ssize_t off, boff, i, j
    cdef int m = dout.shape[0]
    cdef double[:, ::1] out
    cdef double[:, ::1] inp
    cdef double[:, ::1] nxt
    cdef double s, o
    for li in range(L - 1, lowest - 1, -1):
        off = table[li, 0]
        nin = <int>table[li, 1]
        nout = <int>table[li, 2]
        code = <int>table[li, 3]
        boff = off + <Py_ssize_t>nin * nout
        out = acts[li + 1]
        inp = acts[li]
        if code == RELU:
            for i in range(m):
                for j in range(nout):
                    if out[i, j] <= 0.0:
                        dout[i, j] = 0.0
        elif code == TANH:
            for i in range(m):
                for j in range(nout):
                    o = out[i, j]
                    dout[i, j] = dout[i, j] * (1.0 - o * o)
        if nout == 0:
            continue
        if m == 0:
            for j in range(boff - off + nout):
                grad[off + j] = 0.0
            continue
        # dW (nout, nin) = dz.T @ inp
        _gemm(b'N', b'T', nin, nout, m, &inp[0, 0], nin, &dout[0, 0], nout, &grad[off], nin)
        for j in range(nout):
            s = 0.0
            for i in range(m):
                s = s + dout[i, j]
            grad[boff + j] = s
        if li > lowest:
            nxt = np.empty((m, nin))
            # dh (m, nin) = dz @ W
            _gemm(b'N', b'N', nin, m, nout, &values[off], nin, &dout[0, 0], nout,
                  &nxt[0, 0], nin)
            dout = nxt


def loss_grad(double[::1] values, cnp.int64_t[:, ::1] table, X,
              cnp.int64_t[::1] y, int scope):
    cdef int L = table.shape[0]
    cdef list acts = _forward_cache(values, table, X, L)
    cdef double[:, ::1] logits = acts[L]
    cdef int m = logits.shape[0]
    cdef int C = logits.shape[1]
    cdef Py_ssize_t i, j
    cdef double mx, s, total = 0.0
    if y.shape[0] != m:
        raise ValueError(f"{y.shape[0]} labels for {m} rows")
    for i in range(m):
        if y[i] < 0 or y[i] >= C:
            raise ValueError(f"label {y[i]} outside 0..{C - 1}")
    cdef double inv_m = 1.0 / m
    dl_arr = np.empty((m, C))
    cdef double[:, ::1] dl = dl_arr
    for i in range(m):
        mx = logits[i, 0]
        for j in range(1, C):
            if logits[i, j] > mx:
                mx = logits[i, j]
        s = 0.0
        for j in range(C):
            dl[i, j] = exp(logits[i, j] - mx)
            s = s + dl[i, j]
        total = total + (logits[i, y[i]] - mx) - log(s)
        for j in range(C):
            dl[i, j] = dl[i, j] / s * inv_m
        dl[i, y[i]] = dl[i, y[i]] - inv_m
    grad_arr = np.zeros(values.shape[0])
    cdef double[::1] grad = grad_arr
    _backward(values, table, acts, dl, grad, (L - 1) if scope == 2 else 0)
    if scope == 1:
        for i in range(table[L - 1, 0], values.shape[0]):
            grad[i] = 0.0
    return -total * inv_m, grad_arr


def vjp(double[::1] values, cnp.int64_t[:, ::1] table, X, dlogits):
    cdef int L = table.shape[0]
    cdef list acts = _forward_cache(values, table, X, L)
    dl_arr = np.array(dlogits, dtype=np.float64, order="C", copy=True)
    if dl_arr.shape != acts[L].shape:
        raise ValueError(f"dlogits has shape {dl_arr.shape}, logits are {acts[L].shape}")
    grad_arr = np.zeros(values.shape[0])
    _backward(values, table, acts, dl_arr, grad_arr, 0)
    return grad_arr


def adam_update(double[::1] values, double[::1] grad, double[::1] m, double[::1] v,
                long step, double lr, double beta1, double beta2, double eps):
    cdef Py_ssize_t i, n = values.shape[0]
    cdef double g, c1 = 1.0 - beta1 ** step, c2 = 1.0 - beta2 ** step
    cdef double mhat, vhat
    if grad.shape[0] != n or m.shape[0] != n or v.shape[0] != n:
        raise ValueError("Adam operands differ in length")
    for i in range(n):
        g = grad[i]
        m[i] = beta1 * m[i] + (1.0 - beta1) * g
        v[i] = beta2 * v[i] + (1.0 - beta2) * (g * g)
        mhat = m[i] / c1
        vhat = v[i] / c2
        values[i] = values[i] - lr * mhat / (sqrt(vhat) + eps)
