"""Miniature hierarchical-fusion dilated network.

Residual stem and four stages at 1/4 input resolution, late stages dilated
2 and 4, taps after every stage concatenated into a 1x1 scoring conv, and a
learned stride-2 deconvolution producing K depth-label scores at 1/2
resolution.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor_core as tc
from .depth_bins import Binning, hard_max, soft_weighted_sum
from .loss import softmax


@dataclass(frozen=True)
class NetArch:
    K: int = 40
    stem_width: int = 16
    widths: tuple = (16, 32, 32, 32)
    blocks: int = 2
    dilated: bool = True
    concat: bool = True

    def __post_init__(self):
        if self.K < 2:
            raise ValueError("K must be at least 2")
        if len(self.widths) != 4:
            raise ValueError("exactly four stage widths are required")
        if self.blocks < 1 or self.stem_width < 1 or min(self.widths) < 1:
            raise ValueError("block count and widths must be positive")

    @property
    def stage_dilations(self) -> tuple:
        return (1, 1, 2, 4) if self.dilated else (1, 1, 1, 1)

    @property
    def fused_width(self) -> int:
        return sum(self.widths) if self.concat else self.widths[-1]

    @property
    def head_spec(self) -> tc.ConvSpec:
        if self.dilated:
            return tc.ConvSpec.square(self.K, self.K, 4, stride=2, pad=1)
        return tc.ConvSpec.square(self.K, self.K, 8, stride=4, pad=2)

    def describe(self) -> str:
        return (
            f"K={self.K} stem={self.stem_width} widths={','.join(map(str, self.widths))} "
            f"blocks={self.blocks} dilated={int(self.dilated)} concat={int(self.concat)}"
        )

    @classmethod
    def parse(cls, text: str) -> "NetArch":
        kv = dict(tok.split("=", 1) for tok in text.split())
        return cls(
            K=int(kv["K"]),
            stem_width=int(kv["stem"]),
            widths=tuple(int(v) for v in kv["widths"].split(",")),
            blocks=int(kv["blocks"]),
            dilated=kv["dilated"] == "1",
            concat=kv["concat"] == "1",
        )


REDUCED_ARCH = dict(stem_width=8, widths=(8, 8, 8, 8), blocks=1)


def block_names(arch: NetArch):
    """Yield (stage, prefix, in_width, out_width, dilation) per residual block."""
    cin = arch.stem_width
    for s, (width, d) in enumerate(zip(arch.widths, arch.stage_dilations)):
        for b in range(arch.blocks):
            yield s, f"s{s + 1}.b{b + 1}", cin, width, d
            cin = width


def layer_specs(arch: NetArch) -> dict:
    """Ordered name -> ConvSpec for every convolution (BN layers share the name)."""
    specs = {"stem": tc.ConvSpec.square(3, arch.stem_width, 3, stride=2, pad=1)}
    for _, pre, cin, cout, d in block_names(arch):
        specs[f"{pre}.conv1"] = tc.ConvSpec.square(cin, cout, 3, pad=d, dilation=d)
        specs[f"{pre}.conv2"] = tc.ConvSpec.square(cout, cout, 3, pad=d, dilation=d)
        if cin != cout:
            specs[f"{pre}.proj"] = tc.ConvSpec.square(cin, cout, 1)
    specs["fuse"] = tc.ConvSpec.square(arch.fused_width, arch.K, 1)
    return specs


def layer_sequence(arch: NetArch):
    """(kernel, stride, dilation) along the deepest path to the scoring conv."""
    seq = [(3, 2, 1), (2, 2, 1)]
    for s, pre, _, _, d in block_names(arch):
        if s == 2 and pre.endswith("b1") and not arch.dilated:
            seq.append((2, 2, 1))
        seq += [(3, 1, d), (3, 1, d)]
    seq.append((1, 1, 1))
    return seq


@dataclass
class NetParams:
    arch: NetArch
    tensors: dict  # learnable: name -> array
    buffers: dict  # BN running statistics

    def bn(self, name: str) -> tc.BNState:
        return tc.BNState(
            gamma=self.tensors[f"{name}.gamma"],
            beta=self.tensors[f"{name}.beta"],
            running_mean=self.buffers[f"{name}.mean"],
            running_var=self.buffers[f"{name}.var"],
        )

    def copy(self) -> "NetParams":
        return NetParams(
            self.arch,
            {k: v.copy() for k, v in self.tensors.items()},
            {k: v.copy() for k, v in self.buffers.items()},
        )

    def astype(self, dtype) -> "NetParams":
        return NetParams(
            self.arch,
            {k: v.astype(dtype) for k, v in self.tensors.items()},
            {k: v.astype(dtype) for k, v in self.buffers.items()},
        )

    @property
    def dtype(self):
        return self.tensors["fuse.w"].dtype


def is_bn_param(name: str) -> bool:
    return name.endswith(".gamma") or name.endswith(".beta")


def _bilinear_kernel(k: int) -> np.ndarray:
    f = (k + 1) // 2
    c = f - 1 if k % 2 == 1 else f - 0.5
    og = np.arange(k)
    w1 = 1 - np.abs(og - c) / f
    return np.outer(w1, w1)


def init_params(seed: int, arch: NetArch, dtype=np.float32) -> NetParams:
    """He-normal convolutions, zero biases, identity BN, bilinear deconv head."""
    rng = np.random.default_rng(seed)
    tensors, buffers = {}, {}
    for name, spec in layer_specs(arch).items():
        fan_in = spec.in_channels * spec.kernel_h * spec.kernel_w
        shape = (spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w)
        tensors[f"{name}.w"] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
        if name == "fuse":
            tensors["fuse.b"] = np.zeros(arch.K, dtype=dtype)
        else:
            c = spec.out_channels
            tensors[f"{name}.gamma"] = np.ones(c, dtype=dtype)
            tensors[f"{name}.beta"] = np.zeros(c, dtype=dtype)
            buffers[f"{name}.mean"] = np.zeros(c, dtype=dtype)
            buffers[f"{name}.var"] = np.ones(c, dtype=dtype)
    hs = arch.head_spec
    head = np.zeros((arch.K, arch.K, hs.kernel_h, hs.kernel_w))
    head[np.arange(arch.K), np.arange(arch.K)] = _bilinear_kernel(hs.kernel_h)
    tensors["head.w"] = head.astype(dtype)
    tensors["head.b"] = np.zeros(arch.K, dtype=dtype)
    return NetParams(arch, tensors, buffers)


class _Runner:
    """Forward/backward bookkeeping shared by the layer helpers."""

    def __init__(self, params: NetParams, mode: str):
        self.P = params
        self.mode = mode
        self.specs = layer_specs(params.arch)
        self.cache = {}

    def conv(self, name, x):
        bias = self.P.tensors.get(f"{name}.b")
        y = tc.conv2d(x, self.P.tensors[f"{name}.w"], bias, self.specs[name])
        self.cache[f"{name}.in"] = x
        return y

    def conv_bn(self, name, x, act=True):
        y = self.conv(name, x)
        y, bc = tc.batchnorm(y, self.P.bn(name), self.mode)
        self.cache[f"{name}.bn"] = bc
        if act:
            y = tc.relu(y)
            self.cache[f"{name}.act"] = y
        return y

    def conv_back(self, name, g, grads):
        gx, gw, gb = tc.conv2d_backward(self.cache[f"{name}.in"], self.P.tensors[f"{name}.w"], self.specs[name], g)
        grads[f"{name}.w"] = gw
        if f"{name}.b" in self.P.tensors:
            grads[f"{name}.b"] = gb
        return gx

    def conv_bn_back(self, name, g, grads, act=True):
        if act:
            g = tc.relu_backward(self.cache[f"{name}.act"], g)
        g, gg, gbeta = tc.batchnorm_backward(self.cache[f"{name}.bn"], self.P.tensors[f"{name}.gamma"], g)
        grads[f"{name}.gamma"] = gg
        grads[f"{name}.beta"] = gbeta
        return self.conv_back(name, g, grads)

    def pool(self, key, x):
        y, idx = tc.maxpool2(x)
        self.cache[f"{key}.argmax"] = idx
        return y

    def pool_back(self, key, g):
        return tc.maxpool2_backward(self.cache[f"{key}.argmax"], g)


def _check_image(image, arch):
    image = tc.as_tensor4(image, "image")
    n, c, h, w = image.shape
    if c != 3:
        raise ValueError(f"image must have 3 channels, got {c}")
    mult = 4 if arch.dilated else 8
    if h % mult or w % mult or h == 0 or w == 0:
        raise ValueError(f"image spatial dims must be positive multiples of {mult}, got {h}x{w}")
    return image


def forward(image, params: NetParams, mode: str = "eval"):
    """Return ``(scores, cache)`` with scores of shape (n, K, h/2, w/2)."""
    arch = params.arch
    image = _check_image(image, arch)
    r = _Runner(params, mode)
    h = r.conv_bn("stem", image.astype(params.dtype, copy=False))
    h = r.pool("stem.pool", h)
    taps = []
    for s, pre, cin, cout, _ in block_names(arch):
        if s == 2 and pre.endswith("b1") and not arch.dilated:
            h = r.pool("s3.pool", h)
        x = h
        y = r.conv_bn(f"{pre}.conv1", x)
        y = r.conv_bn(f"{pre}.conv2", y, act=False)
        skip = r.conv_bn(f"{pre}.proj", x, act=False) if cin != cout else x
        h = tc.relu(y + skip)
        r.cache[f"{pre}.out"] = h
        if pre.endswith(f"b{arch.blocks}"):
            taps.append(h)
    if arch.concat:
        if not arch.dilated:
            taps[0] = r.pool("tap1.pool", taps[0])
            taps[1] = r.pool("tap2.pool", taps[1])
        feats = taps
    else:
        feats = taps[-1:]
    r.cache["fuse.widths"] = [f.shape[1] for f in feats]
    fused = tc.concat_channels(feats)
    s = r.conv("fuse", fused)
    r.cache["head.in"] = s
    out = tc.deconv2d(s, params.tensors["head.w"], arch.head_spec, params.tensors["head.b"])
    return out, r


def backward(cache: _Runner, grad_scores) -> dict:
    """Gradients of every learnable tensor given dLoss/dScores."""
    if not isinstance(cache, _Runner) or "head.in" not in cache.cache:
        raise ValueError("backward needs the cache returned by a completed forward pass")
    r, P, arch = cache, cache.P, cache.P.arch
    grads = {}
    g, gw, gb = tc.deconv2d_backward(r.cache["head.in"], P.tensors["head.w"], arch.head_spec, grad_scores)
    grads["head.w"], grads["head.b"] = gw, gb
    g = r.conv_back("fuse", g, grads)
    g_feats = tc.concat_channels_backward(r.cache["fuse.widths"], g)
    if arch.concat:
        g_taps = list(g_feats)
        if not arch.dilated:
            g_taps[0] = r.pool_back("tap1.pool", g_taps[0])
            g_taps[1] = r.pool_back("tap2.pool", g_taps[1])
    else:
        g_taps = [None, None, None, g_feats[0]]
    blocks = list(block_names(arch))
    g_h = None
    for s, pre, cin, cout, _ in reversed(blocks):
        if pre.endswith(f"b{arch.blocks}") and g_taps[s] is not None:
            g_h = g_taps[s] if g_h is None else g_h + g_taps[s]
        if g_h is None:
            continue
        g_sum = tc.relu_backward(r.cache[f"{pre}.out"], g_h)
        g_y = r.conv_bn_back(f"{pre}.conv2", g_sum, grads, act=False)
        g_x = r.conv_bn_back(f"{pre}.conv1", g_y, grads)
        if cin != cout:
            g_x = g_x + r.conv_bn_back(f"{pre}.proj", g_sum, grads, act=False)
        else:
            g_x = g_x + g_sum
        g_h = g_x
        if s == 2 and pre.endswith("b1") and not arch.dilated:
            g_h = r.pool_back("s3.pool", g_h)
    g_h = r.pool_back("stem.pool", g_h)
    r.conv_bn_back("stem", g_h, grads)
    for name, t in P.tensors.items():
        if name not in grads:  # unreachable tensors (none in the standard variants)
            grads[name] = np.zeros_like(t)
    return grads


def predict_depth(image, params: NetParams, binning: Binning, rule: str = "soft"):
    """Depth map (n, 1, h/2, w/2) from an eval-mode forward pass."""
    if binning.K != params.arch.K:
        raise ValueError(f"binning has K={binning.K}, network emits {params.arch.K}")
    scores, _ = forward(image, params, "eval")
    probs = softmax(scores.astype(np.float64))
    if rule == "soft":
        d = soft_weighted_sum(probs, binning, axis=1)
    elif rule == "hard":
        d = hard_max(probs, binning, axis=1)
    else:
        raise ValueError(f"unknown inference rule {rule!r}")
    return d[:, None]


# -- checkpoint file ---------------------------------------------------------

MAGIC = b"HFDNETCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def save_checkpoint(path, params: NetParams, extra: dict | None = None, header: str = "") -> None:
    """Write params (and optional extra named arrays) as float32 little-endian.

    ``header`` is free text stored after the arch descriptor.
    """
    entries = [(k, v) for k, v in params.tensors.items()]
    entries += [(k, v) for k, v in params.buffers.items()]
    entries += sorted((extra or {}).items())
    out = [MAGIC, struct.pack("<I", VERSION), _pack_str(params.arch.describe()), _pack_str(header)]
    out.append(struct.pack("<I", len(entries)))
    for name, arr in entries:
        arr = np.asarray(arr)
        out.append(_pack_str(name))
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(out))


def load_checkpoint(path, dtype=np.float32):
    """Return ``(params, extra, header)`` from a checkpoint file."""
    data = Path(path).read_bytes()
    pos = 0

    def take(nbytes, what):
        nonlocal pos
        if pos + nbytes > len(data):
            raise CheckpointError(f"{path}: truncated while reading {what} at offset {pos}")
        chunk = data[pos : pos + nbytes]
        pos += nbytes
        return chunk

    def take_str(what):
        (n,) = struct.unpack("<I", take(4, what + " length"))
        return take(n, what).decode("utf-8")

    if take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointError(f"{path}: not a network checkpoint (bad magic)")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    arch = NetArch.parse(take_str("arch descriptor"))
    header = take_str("header")
    (count,) = struct.unpack("<I", take(4, "entry count"))
    arrays = {}
    for _ in range(count):
        name = take_str("entry name")
        (ndim,) = struct.unpack("<I", take(4, f"{name} ndim"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, f"{name} dims"))
        size = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(take(4 * size, f"{name} payload"), dtype="<f4").reshape(shape)
        arrays[name] = arr.astype(dtype)
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes after offset {pos}")
    template = init_params(0, arch, dtype)
    tensors, buffers = {}, {}
    for group, dst in ((template.tensors, tensors), (template.buffers, buffers)):
        for name, ref in group.items():
            if name not in arrays:
                raise CheckpointError(f"{path}: missing entry {name!r}")
            arr = arrays.pop(name)
            if arr.shape != ref.shape:
                raise CheckpointError(f"{path}: entry {name!r} has dims {arr.shape}, expected {ref.shape}")
            dst[name] = arr
    return NetParams(arch, tensors, buffers), arrays, header
