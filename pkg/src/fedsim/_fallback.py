"""Pure numpy versions of the SGD kernels in ``_kernels.pyx``.

Same semantics as the compiled kernels; results agree to rounding (the
compiled code sums in a fixed scalar order, numpy may use BLAS).
"""

from __future__ import annotations

import numpy as np

ACT_TANH = 0
ACT_RELU = 1


def softplus(z):
    return np.logaddexp(0.0, z)


def sigmoid(z):
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def logreg_sgd_epoch(w, X, y, order, batch_size, lr):
    """One epoch of mini-batch SGD on mean binary cross-entropy.

    ``w`` holds the d feature weights followed by the bias and is updated in
    place. Returns the summed pre-update loss over all visited examples.
    """
    d = X.shape[1]
    total = 0.0
    for lo in range(0, len(order), batch_size):
        idx = order[lo:lo + batch_size]
        xb = X[idx]
        yb = y[idx]
        z = xb @ w[:d] + w[d]
        total += float(np.sum(softplus(z) - yb * z))
        r = (sigmoid(z) - yb) / len(idx)
        gw = xb.T @ r
        gb = r.sum()
        w[:d] -= lr * gw
        w[d] -= lr * gb
    return total


def mlp_sgd_epoch(w, X, y, order, batch_size, lr, hidden, activation):
    """One epoch of mini-batch SGD for a 1-hidden-layer MLP.

    Flat layout: W1 (hidden x d, row-major), b1 (hidden), w2 (hidden), b2.
    """
    d = X.shape[1]
    h = hidden
    o_b1 = h * d
    o_w2 = o_b1 + h
    o_b2 = o_w2 + h
    total = 0.0
    for lo in range(0, len(order), batch_size):
        idx = order[lo:lo + batch_size]
        xb = X[idx]
        yb = y[idx]
        W1 = w[:o_b1].reshape(h, d)
        a = xb @ W1.T + w[o_b1:o_w2]
        if activation == ACT_TANH:
            hid = np.tanh(a)
            dact = 1.0 - hid * hid
        else:
            hid = np.maximum(a, 0.0)
            dact = (a > 0).astype(np.float64)
        z = hid @ w[o_w2:o_b2] + w[o_b2]
        total += float(np.sum(softplus(z) - yb * z))
        r = (sigmoid(z) - yb) / len(idx)
        g_w2 = hid.T @ r
        g_b2 = r.sum()
        dh = np.outer(r, w[o_w2:o_b2]) * dact
        g_W1 = dh.T @ xb
        g_b1 = dh.sum(axis=0)
        w[:o_b1] -= lr * g_W1.ravel()
        w[o_b1:o_w2] -= lr * g_b1
        w[o_w2:o_b2] -= lr * g_w2
        w[o_b2] -= lr * g_b2
    return total
