"""Pure numpy reference implementations of the hot model kernels.

All kernels operate on 2D float64 C-contiguous arrays (rows are independent)
and are shape-for-shape interchangeable with the compiled backend.
"""

from __future__ import annotations

import numpy as np


def layer_norm_forward(x, gamma, beta, eps):
    """Normalize each row to zero mean / unit variance, then scale and shift.

    Returns (y, mean, rstd); mean and rstd are cached for the backward pass.
    """
    mean = x.mean(axis=1)
    var = x.var(axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[:, None]) * rstd[:, None]
    return xhat * gamma + beta, mean, rstd


def layer_norm_backward(dy, x, gamma, mean, rstd):
    """Gradients of layer_norm_forward w.r.t. input, gamma, and beta."""
    xhat = (x - mean[:, None]) * rstd[:, None]
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    dxhat = dy * gamma
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = rstd[:, None] * (dxhat - m1 - xhat * m2)
    return dx, dgamma, dbeta


def softmax_forward(scores):
    """Row-wise softmax, numerically stabilized by the row max."""
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(dprobs, probs):
    """Row-wise softmax Jacobian-vector product."""
    inner = (dprobs * probs).sum(axis=1, keepdims=True)
    return probs * (dprobs - inner)


def cross_entropy_forward(logits, targets, weights):
    """Per-row weighted negative log-likelihood.

    Returns (losses, probs); probs is the row softmax, cached for backward.
    """
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    denom = e.sum(axis=1)
    probs = e / denom[:, None]
    rows = np.arange(logits.shape[0])
    logp = shifted[rows, targets] - np.log(denom)
    return -weights * logp, probs


def cross_entropy_backward(probs, targets, weights, scale):
    """d(total scaled loss)/dlogits given cached softmax probabilities."""
    dlogits = probs * (weights * scale)[:, None]
    rows = np.arange(probs.shape[0])
    dlogits[rows, targets] -= weights * scale
    return dlogits
