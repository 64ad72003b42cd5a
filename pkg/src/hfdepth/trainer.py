"""SGD with momentum, coupled weight decay, gradient averaging and step decay."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import net as hnet
from .depth_bins import Binning, make_binning, quantize_depth
from .loss import IGNORE, softmax_nll
from .synth import Sample, augment_sample, fill_invalid

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    base_lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0004
    accum_steps: int = 8
    total_iters: int = 8000
    fixed_iters: int = 4800
    decay_every: int = 1600
    decay_factor: float = 0.1
    seed: int = 0
    binning: Binning = field(default_factory=lambda: make_binning(1.5, 12.0, 40))
    arch: hnet.NetArch = field(default_factory=hnet.NetArch)
    augment: bool = False
    fill_invalid: bool = False
    log_every: int = 8
    bn_mode: str = "train"
    dtype: str = "float32"

    def __post_init__(self):
        for name in ("base_lr", "decay_every", "decay_factor"):
            if not getattr(self, name) > 0:
                raise ValueError(f"TrainConfig.{name} must be positive")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("momentum and weight decay must be non-negative")
        if self.accum_steps < 1:
            raise ValueError("accum_steps must be >= 1")
        if not 0 <= self.fixed_iters <= self.total_iters:
            raise ValueError("need 0 <= fixed_iters <= total_iters")
        if self.binning.K != self.arch.K:
            raise ValueError(f"binning K={self.binning.K} disagrees with arch K={self.arch.K}")


@dataclass
class OptState:
    velocity: dict
    iteration: int = 0  # forward/backward passes completed

    @classmethod
    def zeros_like(cls, params: hnet.NetParams) -> "OptState":
        return cls({k: np.zeros_like(v) for k, v in params.tensors.items()})


class TrainingDiverged(FloatingPointError):
    pass


def lr_at(it: int, cfg: TrainConfig) -> float:
    if it < cfg.fixed_iters:
        return cfg.base_lr
    return cfg.base_lr * cfg.decay_factor ** (1 + (it - cfg.fixed_iters) // cfg.decay_every)


def sgd_step(params: hnet.NetParams, grads: dict, state: OptState, cfg: TrainConfig, lr: float):
    """v <- momentum*v + (g + wd*theta); theta <- theta - lr*v.  BN scale/shift skip decay."""
    for name, theta in params.tensors.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {theta.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient for {name}; step aborted")
    for name, theta in params.tensors.items():
        g = grads[name]
        v = state.velocity[name]
        wd = 0.0 if hnet.is_bn_param(name) else cfg.weight_decay
        v *= cfg.momentum
        v += g + wd * theta if wd else g
        theta -= lr * v
    return params, state


def target_labels(s: Sample, binning: Binning, fill: bool = False) -> np.ndarray:
    """Half-resolution (nearest) label map with IGNORE at invalid pixels."""
    depth = s.depth[:, 0, ::2, ::2]
    valid = s.valid[:, 0, ::2, ::2]
    if fill and valid.any():
        depth = fill_invalid(depth, valid)
        valid = np.ones_like(valid)
    labels = np.full(depth.shape, IGNORE, dtype=np.int64)
    labels[valid] = quantize_depth(depth[valid], binning)
    return labels


def normalize_image(rgb) -> np.ndarray:
    return rgb * 2.0 - 1.0


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)  # (iter, lr, loss)
    epoch_seeds: list = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iter", "lr", "loss"])
            for it, lr, loss in self.rows:
                w.writerow([it, repr(float(lr)), repr(float(loss))])


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, 0, epoch]).permutation(n)


def train(
    dataset,
    cfg: TrainConfig,
    params: Optional[hnet.NetParams] = None,
    state: Optional[OptState] = None,
    stop_at: Optional[int] = None,
    on_step: Optional[Callable] = None,
):
    """Run passes ``state.iteration .. stop_at`` (default ``total_iters``).

    Every random draw is keyed on (seed, pass index), so a run resumed from
    a checkpoint taken on an optimizer-step boundary follows the same
    trajectory as an uninterrupted one. ``on_step(params, state)`` fires
    after each optimizer step.
    """
    if not dataset:
        raise ValueError("training needs a non-empty dataset")
    dtype = np.dtype(cfg.dtype)
    if params is None:
        params = hnet.init_params(cfg.seed, cfg.arch, dtype)
    if params.arch != cfg.arch:
        raise ValueError("parameter arch does not match the configuration")
    if state is None:
        state = OptState.zeros_like(params)
    if state.iteration % cfg.accum_steps:
        raise ValueError("can only resume on an optimizer-step boundary")
    stop = cfg.total_iters if stop_at is None else min(stop_at, cfg.total_iters)
    n = len(dataset)
    tlog = TrainLog()
    accum = None
    window = []
    order, order_epoch = None, -1
    for it in range(state.iteration, stop):
        epoch, pos = divmod(it, n)
        if epoch != order_epoch:
            order, order_epoch = epoch_order(cfg.seed, epoch, n), epoch
            tlog.epoch_seeds.append((epoch, f"{cfg.seed}:0:{epoch}"))
        sample = dataset[order[pos]]
        if cfg.augment:
            sample = augment_sample(sample, np.random.default_rng([cfg.seed, 1, it]))
        labels = target_labels(sample, cfg.binning, cfg.fill_invalid)
        if not (labels != IGNORE).any():
            log.warning("pass %d: sample has no valid pixels, skipped", it)
            grads = {k: np.zeros_like(v) for k, v in params.tensors.items()}
            loss = 0.0
        else:
            x = normalize_image(sample.rgb).astype(dtype)
            scores, cache = hnet.forward(x, params, cfg.bn_mode)
            loss, g = softmax_nll(scores, labels)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at pass {it} (sample {order[pos]})")
            grads = hnet.backward(cache, g)
        window.append(loss)
        if accum is None:
            accum = {k: v.copy() for k, v in grads.items()}
        else:
            for k, v in grads.items():
                accum[k] += v
        done = it + 1
        if done % cfg.accum_steps == 0:
            avg = {k: v / dtype.type(cfg.accum_steps) for k, v in accum.items()}
            sgd_step(params, avg, state, cfg, lr_at(it, cfg))
            accum = None
        state.iteration = done
        if done % cfg.log_every == 0:
            tlog.rows.append((done, lr_at(it, cfg), float(np.mean(window))))
            window = []
        if done % cfg.accum_steps == 0 and on_step is not None:
            on_step(params, state)
    return params, state, tlog


# -- checkpoints with optimizer state ------------------------------------------


def save_training_checkpoint(path, params: hnet.NetParams, state: OptState, binning: Optional[Binning] = None) -> None:
    extra = {f"opt.v.{k}": v for k, v in state.velocity.items()}
    header = f"iter={state.iteration}"
    if binning is not None:
        header += f" d_min={binning.d_min!r} d_max={binning.d_max!r} K={binning.K}"
    hnet.save_checkpoint(path, params, extra, header=header)


def load_training_checkpoint(path, dtype=np.float32):
    """Return (params, OptState, Binning or None)."""
    params, extra, header = hnet.load_checkpoint(path, dtype)
    kv = dict(tok.split("=", 1) for tok in header.split())
    velocity = {}
    for k, ref in params.tensors.items():
        v = extra.get(f"opt.v.{k}")
        velocity[k] = np.zeros_like(ref) if v is None else v
    binning = None
    if "K" in kv:
        binning = make_binning(float(kv["d_min"]), float(kv["d_max"]), int(kv["K"]))
    return params, OptState(velocity, int(kv.get("iter", 0))), binning
