"""Log-space depth discretization and label-to-depth inference."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

RENORM_TOL = 1e-4


@dataclass(frozen=True)
class Binning:
    d_min: float
    d_max: float
    K: int
    q: float = field(init=False)
    w: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not (0 < self.d_min < self.d_max):
            raise ValueError(f"need 0 < d_min < d_max, got {self.d_min}, {self.d_max}")
        if int(self.K) != self.K or self.K < 2:
            raise ValueError(f"bin count must be an integer >= 2, got {self.K}")
        q = (np.log(self.d_max) - np.log(self.d_min)) / (self.K - 1)
        w = np.log(self.d_min) + q * np.arange(self.K)
        w.setflags(write=False)
        object.__setattr__(self, "q", float(q))
        object.__setattr__(self, "w", w)

    @property
    def centers(self) -> np.ndarray:
        """Bin-center depths exp(w_i)."""
        return np.exp(self.w)


def make_binning(d_min: float, d_max: float, K: int) -> Binning:
    return Binning(float(d_min), float(d_max), int(K))


def quantize_depth(d, b: Binning):
    """Label of each depth: round((ln d - ln d_min) / q), clamped to [0, K-1].

    Rounds half away from zero. Accepts scalars or arrays.
    """
    d = np.asarray(d, dtype=np.float64)
    if np.any(~(d > 0)):
        raise ValueError("quantize_depth requires strictly positive depths")
    t = (np.log(d) - np.log(b.d_min)) / b.q
    lab = np.sign(t) * np.floor(np.abs(t) + 0.5)
    lab = np.clip(lab, 0, b.K - 1).astype(np.int64)
    return int(lab) if lab.ndim == 0 else lab


def _check_probs(p, b: Binning, axis):
    p = np.asarray(p, dtype=np.float64)
    if p.shape[axis] != b.K:
        raise ValueError(f"score vector has length {p.shape[axis]} along axis {axis}, expected K={b.K}")
    if np.any(p < 0):
        raise ValueError("probabilities must be non-negative")
    s = p.sum(axis=axis, keepdims=True)
    if np.any(np.abs(s - 1.0) > RENORM_TOL):
        raise ValueError(f"probabilities must sum to 1 within {RENORM_TOL}")
    return p / s


def _move(w, p, axis):
    shape = [1] * p.ndim
    shape[axis] = -1
    return w.reshape(shape)


def soft_weighted_sum(p, b: Binning, axis: int = -1):
    """exp(w . p) along ``axis``; the weighted geometric mean of bin centers."""
    p = _check_probs(p, b, axis)
    logd = np.sum(p * _move(b.w, p, axis), axis=axis)
    logd = np.clip(logd, b.w[0], b.w[-1])  # guards rounding drift only
    out = np.exp(logd)
    return float(out) if out.ndim == 0 else out


def hard_max(p, b: Binning, axis: int = -1):
    """Center depth of the most probable bin; ties go to the smaller index."""
    p = _check_probs(p, b, axis)
    out = np.exp(b.w[np.argmax(p, axis=axis)])
    return float(out) if out.ndim == 0 else out


def one_hot(labels, K: int, axis: int = -1) -> np.ndarray:
    labels = np.asarray(labels)
    oh = (labels[..., None] == np.arange(K)).astype(np.float64)
    return np.moveaxis(oh, -1, axis) if axis != -1 else oh
