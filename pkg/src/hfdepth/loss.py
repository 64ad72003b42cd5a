"""Per-pixel softmax and multinomial logistic loss over depth labels."""

from __future__ import annotations

import numpy as np

IGNORE = -1


def softmax(scores):
    """Softmax over the channel axis of an (n, K, h, w) score tensor."""
    scores = np.asarray(scores)
    if scores.ndim != 4 or scores.shape[1] < 2:
        raise ValueError(f"softmax expects (n, K>=2, h, w) scores, got {scores.shape}")
    if np.isnan(scores).any():
        raise ValueError("softmax input contains NaN")
    z = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _contributing(labels, K, spatial):
    labels = np.asarray(labels)
    if labels.shape != spatial:
        raise ValueError(f"label map shape {labels.shape} != score spatial shape {spatial}")
    valid = labels != IGNORE
    bad = valid & ((labels < 0) | (labels >= K))
    if bad.any():
        raise ValueError(f"label out of range [0, {K - 1}]: {labels[bad][0]}")
    m = int(valid.sum())
    if m == 0:
        raise ValueError("every pixel is ignored; loss undefined")
    return labels, valid, m


def nll_loss(probs, labels):
    """Mean negative log-likelihood over non-ignored pixels.

    Returns ``(loss, grad)`` where ``grad`` is the gradient with respect to the
    pre-softmax scores, ``(p - onehot) / M`` at contributing pixels.
    """
    probs = np.asarray(probs)
    n, K, h, w = probs.shape
    labels, valid, m = _contributing(labels, K, (n, h, w))
    safe = np.where(valid, labels, 0)
    p_true = np.take_along_axis(probs, safe[:, None], axis=1)[:, 0]
    loss = -np.sum(np.log(np.maximum(p_true[valid], np.finfo(probs.dtype).tiny))) / m
    grad = probs.copy()
    np.put_along_axis(grad, safe[:, None], p_true[:, None] - 1, axis=1)
    grad *= valid[:, None] / m
    return float(loss), grad.astype(probs.dtype, copy=False)


def softmax_nll(scores, labels):
    """Fused softmax + loss using log-sum-exp; same return as :func:`nll_loss`."""
    scores = np.asarray(scores)
    n, K, h, w = scores.shape
    labels, valid, m = _contributing(labels, K, (n, h, w))
    z = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=1, keepdims=True)
    safe = np.where(valid, labels, 0)
    z_true = np.take_along_axis(z, safe[:, None], axis=1)[:, 0]
    loss = np.sum((np.log(s[:, 0]) - z_true)[valid]) / m
    grad = e / s
    onehot = np.zeros_like(grad)
    np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
    grad = (grad - onehot) * (valid[:, None] / m)
    return float(loss), grad.astype(scores.dtype, copy=False)
