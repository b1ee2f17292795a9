"""Pure-NumPy kernels.  Reference path and fallback for ``_ckernels``.

A network is described by ``values`` (flat float64 parameter vector) and
``table``, an int64 array of shape (L, 4) with one row per linear layer:
``(offset, in_dim, out_dim, activation)``.  Each layer stores its weight
matrix row-major with shape (out_dim, in_dim), immediately followed by its
bias of length out_dim.  Activation codes: 0 identity, 1 relu, 2 tanh.

Scope codes for ``loss_grad``: 0 all, 1 embedding only, 2 output only.
"""

from __future__ import annotations

import numpy as np

IDENTITY, RELU, TANH = 0, 1, 2
SCOPE_ALL, SCOPE_EMBEDDING, SCOPE_OUTPUT = 0, 1, 2


def _params(values, row):
    off, n_in, n_out = int(row[0]), int(row[1]), int(row[2])
    w = values[off : off + n_in * n_out].reshape(n_out, n_in)
    b = values[off + n_in * n_out : off + n_in * n_out + n_out]
    return w, b


def _activate(z, code):
    if code == RELU:
        return np.maximum(z, 0.0)
    if code == TANH:
        return np.tanh(z)
    return z


def _check(values, table, X):
    if table.ndim != 2 or table.shape[0] == 0 or table.shape[1] != 4:
        raise ValueError("layer table must have shape (L, 4) with L >= 1")
    if X.ndim != 2 or X.shape[1] != table[0, 1]:
        raise ValueError(f"input has shape {X.shape}, layer table expects width {table[0, 1]}")
    off = 0
    for li, (o, n_in, n_out, _) in enumerate(table):
        if o != off or n_in < 1 or n_out < 0 or (li > 0 and n_in != table[li - 1, 2]):
            raise ValueError(f"layer table row {li} is inconsistent")
        off += int(n_out) * (int(n_in) + 1)
    if values.shape[0] != off:
        raise ValueError(f"parameter vector has {values.shape[0]} entries, table needs {off}")


def _forward_cache(values, table, X):
    _check(values, table, X)
    acts = [X]
    h = X
    for row in table:
        w, b = _params(values, row)
        h = _activate(h @ w.T + b, int(row[3]))
        acts.append(h)
    return acts


def forward(values, table, X):
    return _forward_cache(values, table, X)[-1]


def embed(values, table, X):
    """Activations feeding the final layer."""
    _check(values, table, X)
    h = X
    for row in table[:-1]:
        w, b = _params(values, row)
        h = _activate(h @ w.T + b, int(row[3]))
    return h


def _backward(values, table, acts, dout, grad, lowest):
    # dout: gradient wrt the output of the last layer (post-activation).
    n_layers = len(table)
    for li in range(n_layers - 1, lowest - 1, -1):
        row = table[li]
        code = int(row[3])
        out = acts[li + 1]
        if code == RELU:
            dz = dout * (out > 0.0)
        elif code == TANH:
            dz = dout * (1.0 - out * out)
        else:
            dz = dout
        off, n_in, n_out = int(row[0]), int(row[1]), int(row[2])
        grad[off : off + n_in * n_out] = (dz.T @ acts[li]).ravel()
        grad[off + n_in * n_out : off + n_in * n_out + n_out] = dz.sum(axis=0)
        if li > lowest:
            w, _ = _params(values, row)
            dout = dz @ w


def _softmax_xent(logits, y):
    shifted = logits - logits.max(axis=1, keepdims=True)
    expz = np.exp(shifted)
    sums = expz.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    logp = shifted[np.arange(n), y] - np.log(sums[:, 0])
    probs = expz / sums
    return -logp.mean(), probs


def loss_grad(values, table, X, y, scope):
    acts = _forward_cache(values, table, X)
    n = X.shape[0]
    if y.shape[0] != n:
        raise ValueError(f"{y.shape[0]} labels for {n} rows")
    if n and (y.min() < 0 or y.max() >= acts[-1].shape[1]):
        raise ValueError(f"label outside 0..{acts[-1].shape[1] - 1}")
    loss, probs = _softmax_xent(acts[-1], y)
    dlogits = probs
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n
    grad = np.zeros_like(values)
    last = len(table) - 1
    lowest = last if scope == SCOPE_OUTPUT else 0
    _backward(values, table, acts, dlogits, grad, lowest)
    if scope == SCOPE_EMBEDDING:
        grad[int(table[last, 0]) :] = 0.0
    return float(loss), grad


def vjp(values, table, X, dlogits):
    """Gradient of ``sum(dlogits * forward(X))`` wrt every parameter."""
    acts = _forward_cache(values, table, X)
    dlogits = np.asarray(dlogits, dtype=np.float64)
    if dlogits.shape != acts[-1].shape:
        raise ValueError(f"dlogits has shape {dlogits.shape}, logits are {acts[-1].shape}")
    grad = np.zeros_like(values)
    _backward(values, table, acts, dlogits, grad, 0)
    return grad


def adam_update(values, grad, m, v, step, lr, beta1, beta2, eps):
    """In-place Adam update; ``step`` is the already-incremented count."""
    if not grad.shape == m.shape == v.shape == values.shape:
        raise ValueError("Adam operands differ in length")
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * (grad * grad)
    mhat = m / (1.0 - beta1**step)
    vhat = v / (1.0 - beta2**step)
    values -= lr * mhat / (np.sqrt(vhat) + eps)
