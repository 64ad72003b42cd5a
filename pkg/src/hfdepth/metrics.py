"""Depth error metrics, label accuracy, confusion analysis and the bin sweep."""

from __future__ import annotations

import csv
import math
from dataclasses import astuple, dataclass, replace
from typing import Optional

import numpy as np

from . import net as hnet
from .depth_bins import Binning, make_binning, quantize_depth
from .loss import IGNORE, softmax

THRESHOLDS = (1.25, 1.25**2, 1.25**3)


@dataclass
class MetricSet:
    delta1: float
    delta2: float
    delta3: float
    rel: float
    log10: float
    rms: float
    count: int

    HEADER = ("delta1", "delta2", "delta3", "rel", "log10", "rms", "count")

    def row(self):
        return astuple(self)


def _fmean(x) -> float:
    return math.fsum(x.tolist()) / len(x)


def compute_metrics(pred, gt, mask=None, cap: Optional[float] = None) -> MetricSet:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    sel = np.ones(gt.shape, bool) if mask is None else np.asarray(mask, bool)
    if sel.shape != gt.shape:
        raise ValueError(f"mask {sel.shape} does not match depth {gt.shape}")
    if cap is not None:
        sel = sel & (gt <= cap)
    p, g = pred[sel], gt[sel]
    if p.size == 0:
        raise ValueError("no pixels to evaluate")
    if np.any(g <= 0) or np.any(p <= 0):
        raise ValueError("evaluated depths must be positive")
    ratio = np.maximum(p / g, g / p)
    deltas = [float(np.count_nonzero(ratio < t)) / p.size for t in THRESHOLDS]
    return MetricSet(
        *deltas,
        rel=_fmean(np.abs(p - g) / g),
        log10=_fmean(np.abs(np.log10(p) - np.log10(g))),
        rms=math.sqrt(_fmean((p - g) ** 2)),
        count=int(p.size),
    )


def threshold_accuracy(pred, gt, thr: float) -> float:
    pred, gt = np.asarray(pred, float), np.asarray(gt, float)
    return float(np.mean(np.maximum(pred / gt, gt / pred) < thr))


def write_metrics_csv(path, rows) -> None:
    """``rows`` is a list of (name, MetricSet)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("name",) + MetricSet.HEADER)
        for name, m in rows:
            w.writerow((name,) + tuple(repr(v) if isinstance(v, float) else v for v in m.row()))


def pixel_accuracy(pred_labels, gt_labels) -> float:
    pred_labels, gt_labels = np.asarray(pred_labels), np.asarray(gt_labels)
    if pred_labels.shape != gt_labels.shape:
        raise ValueError(f"label maps differ in shape: {pred_labels.shape} vs {gt_labels.shape}")
    sel = gt_labels != IGNORE
    if not sel.any():
        raise ValueError("no labelled pixels to evaluate")
    return float(np.count_nonzero(pred_labels[sel] == gt_labels[sel])) / int(sel.sum())


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows: ground truth, cols: prediction
    merge: int = 1

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def band_mass(self, band: int) -> float:
        """Fraction of counts within ``band`` bins of the diagonal."""
        k = self.counts.shape[0]
        i, j = np.indices((k, k))
        return float(self.counts[np.abs(i - j) <= band].sum()) / self.total

    def asymmetry(self) -> float:
        c = self.counts.astype(np.float64)
        return float(np.abs(c - c.T).sum() / c.sum())

    def write_csv(self, path) -> None:
        k = self.counts.shape[0]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["gt\\pred"] + [str(j) for j in range(k)])
            for i in range(k):
                w.writerow([str(i)] + [str(int(v)) for v in self.counts[i]])


def confusion(pred_labels, gt_labels, K: int, merge: int = 1) -> ConfusionMatrix:
    if merge < 1 or K % merge:
        raise ValueError(f"merge factor {merge} must divide K={K}")
    pred_labels, gt_labels = np.asarray(pred_labels), np.asarray(gt_labels)
    if pred_labels.shape != gt_labels.shape:
        raise ValueError("label maps differ in shape")
    sel = gt_labels != IGNORE
    gt, pr = gt_labels[sel], pred_labels[sel]
    if np.any((gt < 0) | (gt >= K) | (pr < 0) | (pr >= K)):
        raise ValueError(f"labels must lie in [0, {K - 1}]")
    k = K // merge
    counts = np.bincount((gt // merge) * k + pr // merge, minlength=k * k).reshape(k, k)
    return ConfusionMatrix(counts.astype(np.int64), merge)


# -- evaluating a model over samples -------------------------------------------


def _half_res(s):
    return s.depth[:, :, ::2, ::2], s.valid[:, :, ::2, ::2]


@dataclass
class Evaluation:
    soft: np.ndarray  # predicted depth per evaluated pixel
    hard: np.ndarray
    gt: np.ndarray
    pred_labels: np.ndarray  # hard-max labels at labelled pixels
    gt_labels: np.ndarray


def run_model(params: hnet.NetParams, samples, binning: Binning) -> Evaluation:
    """Eval-mode inference on every sample; collects valid-pixel predictions."""
    from .trainer import normalize_image

    soft, hard, gts, pl, gl = [], [], [], [], []
    for s in samples:
        scores, _ = hnet.forward(normalize_image(s.rgb), params, "eval")
        probs = softmax(scores.astype(np.float64))
        logd = np.tensordot(binning.w, probs, axes=([0], [1]))  # (n, h, w)
        lab = probs.argmax(axis=1)
        depth, valid = _half_res(s)
        v = valid[:, 0]
        soft.append(np.exp(logd[v]))
        hard.append(binning.centers[lab[v]])
        gts.append(depth[:, 0][v].astype(np.float64))
        pl.append(lab[v])
        gl.append(quantize_depth(depth[:, 0][v], binning))
    cat = np.concatenate
    return Evaluation(cat(soft), cat(hard), cat(gts), cat(pl), cat(gl))


def evaluate(params, samples, binning, rule="soft", cap=None) -> MetricSet:
    ev = run_model(params, samples, binning)
    pred = ev.soft if rule == "soft" else ev.hard
    return compute_metrics(pred, ev.gt, cap=cap)


def bins_sweep(train_set, test_set, K_list, cfg):
    """Train one model per bin count under an identical budget.

    Returns rows of (K, pixel_accuracy, rel) with Rel from soft inference.
    """
    from .trainer import train

    rows = []
    for K in K_list:
        b = make_binning(cfg.binning.d_min, cfg.binning.d_max, K)
        kcfg = replace(cfg, binning=b, arch=replace(cfg.arch, K=K))
        params, _, _ = train(train_set, kcfg)
        ev = run_model(params, test_set, b)
        rows.append((K, pixel_accuracy(ev.pred_labels, ev.gt_labels), compute_metrics(ev.soft, ev.gt).rel))
    return rows


def write_sweep_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["K", "pixel_accuracy", "rel"])
        for K, acc, rel in rows:
            w.writerow([K, repr(acc), repr(rel)])
