"""Dense NCHW layer kernels with hand-derived gradients.

Tensors are plain 4-D numpy arrays laid out (batch, channel, height, width).
Convolutions use the cross-correlation orientation and are evaluated by
shift-and-accumulate over kernel taps, so the dilation factor only changes
where each tap reads from.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


def check_finite(x: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{where}: non-finite values in output")
    return x


def as_tensor4(x, name: str = "input") -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 4:
        raise ValueError(f"{name}: expected a 4-D (n, c, h, w) array, got shape {x.shape}")
    return x


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    pad: int = 0
    dilation: int = 1

    def __post_init__(self):
        for name in ("in_channels", "out_channels", "kernel_h", "kernel_w", "stride", "dilation"):
            if getattr(self, name) < 1:
                raise ValueError(f"ConvSpec.{name} must be positive")
        if self.pad < 0:
            raise ValueError("ConvSpec.pad must be non-negative")

    @classmethod
    def square(cls, cin, cout, k, stride=1, pad=0, dilation=1):
        return cls(cin, cout, k, k, stride, pad, dilation)

    @property
    def extent_h(self) -> int:
        return self.dilation * (self.kernel_h - 1) + 1

    @property
    def extent_w(self) -> int:
        return self.dilation * (self.kernel_w - 1) + 1

    def conv_out_size(self, h: int, w: int) -> tuple[int, int]:
        ph, pw = h + 2 * self.pad, w + 2 * self.pad
        if self.extent_h > ph or self.extent_w > pw:
            raise ValueError(
                f"effective kernel {self.extent_h}x{self.extent_w} exceeds padded input {ph}x{pw}"
            )
        return (ph - self.extent_h) // self.stride + 1, (pw - self.extent_w) // self.stride + 1

    def deconv_out_size(self, h: int, w: int) -> tuple[int, int]:
        oh = (h - 1) * self.stride - 2 * self.pad + self.extent_h
        ow = (w - 1) * self.stride - 2 * self.pad + self.extent_w
        if oh < 1 or ow < 1:
            raise ValueError(f"deconv output would be empty ({oh}x{ow})")
        return oh, ow


def _tap(xp, i, j, spec, oh, ow):
    """View of the padded input read by kernel tap (i, j)."""
    r0, c0 = i * spec.dilation, j * spec.dilation
    s = spec.stride
    return xp[:, :, r0 : r0 + s * (oh - 1) + 1 : s, c0 : c0 + s * (ow - 1) + 1 : s]


def _pad(x, p):
    if p == 0:
        return x
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=x.dtype)
    xp[:, :, p : p + h, p : p + w] = x
    return xp


def _tap_major(weights):
    """(o, c, kh, kw) -> contiguous (kh, kw, o, c) so each tap is a BLAS-ready matrix."""
    return np.ascontiguousarray(weights.transpose(2, 3, 0, 1))


def _flat(t):
    n, c = t.shape[:2]
    return t.reshape(n, c, -1)


def conv2d(x, weights, bias, spec: ConvSpec) -> np.ndarray:
    x = as_tensor4(x)
    weights = as_tensor4(weights, "weights")
    expect = (spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w)
    if weights.shape != expect:
        raise ValueError(f"weights shape {weights.shape} != {expect}")
    if x.shape[1] != spec.in_channels:
        raise ValueError(f"input has {x.shape[1]} channels, spec expects {spec.in_channels}")
    n = x.shape[0]
    oh, ow = spec.conv_out_size(x.shape[2], x.shape[3])
    xp = _pad(x, spec.pad)
    dtype = np.result_type(x, weights)
    out = np.zeros((n, spec.out_channels, oh * ow), dtype=dtype)
    taps = _tap_major(weights)
    for i in range(spec.kernel_h):
        for j in range(spec.kernel_w):
            patch = _flat(_tap(xp, i, j, spec, oh, ow))
            out += taps[i, j] @ patch
    out = out.reshape(n, spec.out_channels, oh, ow)
    if bias is not None:
        out += np.asarray(bias, dtype=dtype).reshape(1, -1, 1, 1)
    return check_finite(out, "conv2d")


def _conv_input_grad(grad_out, weights, spec: ConvSpec, in_h: int, in_w: int):
    """Adjoint of conv2d with respect to its input (the transposed convolution)."""
    n, _, oh, ow = grad_out.shape
    hp, wp = in_h + 2 * spec.pad, in_w + 2 * spec.pad
    dtype = np.result_type(grad_out, weights)
    gxp = np.zeros((n, spec.in_channels, hp, wp), dtype=dtype)
    g = _flat(grad_out)
    taps = _tap_major(weights)
    for i in range(spec.kernel_h):
        for j in range(spec.kernel_w):
            contrib = taps[i, j].T @ g
            _tap(gxp, i, j, spec, oh, ow)[...] += contrib.reshape(n, spec.in_channels, oh, ow)
    p = spec.pad
    if p:
        gxp = gxp[:, :, p : p + in_h, p : p + in_w]
    return np.ascontiguousarray(gxp)


def _conv_weight_grad(x, grad_out, spec: ConvSpec):
    oh, ow = grad_out.shape[2:]
    xp = _pad(x, spec.pad)
    dtype = np.result_type(x, grad_out)
    gw = np.empty((spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w), dtype=dtype)
    g = _flat(grad_out)
    for i in range(spec.kernel_h):
        for j in range(spec.kernel_w):
            patch = _flat(_tap(xp, i, j, spec, oh, ow))
            gw[:, :, i, j] = (g @ patch.transpose(0, 2, 1)).sum(axis=0)
    return gw


def conv2d_backward(x, weights, spec: ConvSpec, grad_output):
    """Return (grad_input, grad_weights, grad_bias) for conv2d."""
    x = as_tensor4(x)
    grad_output = as_tensor4(grad_output, "grad_output")
    oh, ow = spec.conv_out_size(x.shape[2], x.shape[3])
    expect = (x.shape[0], spec.out_channels, oh, ow)
    if grad_output.shape != expect:
        raise ValueError(f"grad_output shape {grad_output.shape} != {expect}")
    gx = _conv_input_grad(grad_output, weights, spec, x.shape[2], x.shape[3])
    gw = _conv_weight_grad(x, grad_output, spec)
    gb = grad_output.sum(axis=(0, 2, 3))
    return check_finite(gx, "conv2d_backward"), check_finite(gw, "conv2d_backward"), gb


def _as_conv(spec: ConvSpec) -> ConvSpec:
    """The forward convolution whose input-adjoint is the given deconvolution."""
    return ConvSpec(
        spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w,
        spec.stride, spec.pad, spec.dilation,
    )


def deconv2d(x, weights, spec: ConvSpec, bias=None) -> np.ndarray:
    """Transposed convolution.

    ``weights`` has shape (in_channels, out_channels, kh, kw), which is exactly
    the weight array of the convolution mapping out_channels -> in_channels
    that this operation is the adjoint of.
    """
    x = as_tensor4(x)
    weights = as_tensor4(weights, "weights")
    expect = (spec.in_channels, spec.out_channels, spec.kernel_h, spec.kernel_w)
    if weights.shape != expect:
        raise ValueError(f"weights shape {weights.shape} != {expect}")
    if x.shape[1] != spec.in_channels:
        raise ValueError(f"input has {x.shape[1]} channels, spec expects {spec.in_channels}")
    oh, ow = spec.deconv_out_size(x.shape[2], x.shape[3])
    out = _conv_input_grad(x, weights, _as_conv(spec), oh, ow)
    if bias is not None:
        out = out + np.asarray(bias, dtype=out.dtype).reshape(1, -1, 1, 1)
    return check_finite(out, "deconv2d")


def deconv2d_backward(x, weights, spec: ConvSpec, grad_output):
    """Return (grad_input, grad_weights, grad_bias) for deconv2d."""
    x = as_tensor4(x)
    grad_output = as_tensor4(grad_output, "grad_output")
    oh, ow = spec.deconv_out_size(x.shape[2], x.shape[3])
    expect = (x.shape[0], spec.out_channels, oh, ow)
    if grad_output.shape != expect:
        raise ValueError(f"grad_output shape {grad_output.shape} != {expect}")
    cspec = _as_conv(spec)
    gx = conv2d(grad_output, weights, None, cspec)
    # deconv(x) = A^T x with A the conv on grad_output's space; the weight
    # gradient is the conv weight gradient with input and output roles swapped
    gw = _conv_weight_grad(grad_output, x, cspec)
    gb = grad_output.sum(axis=(0, 2, 3))
    return gx, check_finite(gw, "deconv2d_backward"), gb


@dataclass
class BNState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels: int, dtype=np.float64):
        return cls(
            gamma=np.ones(channels, dtype=dtype),
            beta=np.zeros(channels, dtype=dtype),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
        )

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("BNState.eps must be positive")


def batchnorm(x, state: BNState, mode: str = "train"):
    """Per-channel batch normalization.

    Returns ``(y, cache)``; the cache is consumed by :func:`batchnorm_backward`.
    In train mode the running statistics of ``state`` are updated in place.
    """
    x = as_tensor4(x)
    c = x.shape[1]
    if state.gamma.shape != (c,):
        raise ValueError(f"input has {c} channels, BN state has {state.gamma.shape[0]}")
    m = x.shape[0] * x.shape[2] * x.shape[3]
    if m == 0:
        raise ValueError("batchnorm over an empty batch/spatial extent")
    dtype = x.dtype
    if mode == "train":
        mean = x.mean(axis=(0, 2, 3))
        xc = x - mean.reshape(1, c, 1, 1)
        var = (xc * xc).mean(axis=(0, 2, 3))
        unbiased = var * m / (m - 1) if m > 1 else var
        state.running_mean *= 1 - state.momentum
        state.running_mean += state.momentum * mean
        state.running_var *= 1 - state.momentum
        state.running_var += state.momentum * unbiased
    elif mode == "eval":
        mean = state.running_mean.astype(dtype)
        var = state.running_var.astype(dtype)
        xc = x - mean.reshape(1, c, 1, 1)
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = xc * inv_std.reshape(1, c, 1, 1).astype(dtype)
    y = xhat * state.gamma.reshape(1, c, 1, 1).astype(dtype) + state.beta.reshape(1, c, 1, 1).astype(dtype)
    return check_finite(y, "batchnorm"), (xhat, inv_std.astype(dtype), mode)


def batchnorm_backward(cache, gamma, grad_output):
    """Return (grad_input, grad_gamma, grad_beta)."""
    xhat, inv_std, mode = cache
    c = xhat.shape[1]
    g = grad_output
    grad_beta = g.sum(axis=(0, 2, 3))
    grad_gamma = (g * xhat).sum(axis=(0, 2, 3))
    gxhat = g * gamma.reshape(1, c, 1, 1).astype(g.dtype)
    if mode == "eval":
        return gxhat * inv_std.reshape(1, c, 1, 1), grad_gamma, grad_beta
    m = xhat.shape[0] * xhat.shape[2] * xhat.shape[3]
    mean_g = gxhat.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1) / m
    mean_gx = (gxhat * xhat).sum(axis=(0, 2, 3)).reshape(1, c, 1, 1) / m
    gx = (gxhat - mean_g - xhat * mean_gx) * inv_std.reshape(1, c, 1, 1)
    return check_finite(gx, "batchnorm_backward"), grad_gamma, grad_beta


def relu(x):
    return np.maximum(x, 0)


def relu_backward(x, grad_output):
    return grad_output * (x > 0)


def maxpool2(x):
    """2x2 max pooling with stride 2. Returns (y, argmax) with argmax in 0..3."""
    x = as_tensor4(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)  # first maximum wins on ties
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return y, idx


def maxpool2_backward(argmax, grad_output):
    n, c, oh, ow = grad_output.shape
    win = np.zeros((n, c, oh, ow, 4), dtype=grad_output.dtype)
    np.put_along_axis(win, argmax[..., None], grad_output[..., None], axis=-1)
    return win.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * oh, 2 * ow)


def concat_channels(tensors):
    if not tensors:
        raise ValueError("concat_channels needs at least one tensor")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != 4 or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ValueError(f"cannot concat shapes {ref} and {t.shape}")
    return np.concatenate(tensors, axis=1)


def concat_channels_backward(channel_counts, grad_output):
    splits = np.cumsum(channel_counts)[:-1]
    return np.split(grad_output, splits, axis=1)


def receptive_field(layers) -> tuple[int, int]:
    """Theoretical receptive field of one output unit after a layer stack.

    ``layers`` is a sequence of ``(kernel, stride, dilation)`` where kernel is
    an int or a ``(kh, kw)`` pair.
    """
    layers = list(layers)
    if not layers:
        raise ValueError("receptive_field needs at least one layer")
    rf = [1, 1]
    jump = 1
    for kernel, stride, dilation in layers:
        ks = (kernel, kernel) if np.isscalar(kernel) else tuple(kernel)
        for a in range(2):
            rf[a] += dilation * (ks[a] - 1) * jump
        jump *= stride
    return rf[0], rf[1]
