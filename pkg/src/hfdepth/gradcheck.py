"""Central finite-difference checks for every kernel and the reduced network.

Each check contracts the layer output with a fixed random tensor R, so the
scalar objective is sum(R * f(inputs)) and its analytic gradient is the
layer's backward pass fed with R. A random subset of input coordinates is
perturbed by +-eps in float64; the error of a tensor is
||analytic - numeric|| / max(||analytic|| + ||numeric||, floor) over the
probed coordinates.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, replace

import numpy as np

from . import net as hnet
from . import tensor_core as tc
from .loss import softmax_nll

LAYER_TOL = 1e-4
NET_TOL = 1e-3
EPS = 1e-6
_FLOOR = 1e-10


@dataclass
class CheckResult:
    name: str
    rel_error: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.rel_error < self.tol)

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: rel {self.rel_error:.2e} (tol {self.tol:.0e})"


def _probe(objective, arrays, analytic, rng, probes):
    """Worst relative error over ``arrays`` (a dict of float64 arrays, mutated and restored)."""
    worst = 0.0
    for name, arr in arrays.items():
        flat = arr.reshape(-1)
        idx = rng.choice(flat.size, size=min(probes, flat.size), replace=False)
        num = np.empty(len(idx))
        for n, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + EPS
            up = objective()
            flat[i] = orig - EPS
            down = objective()
            flat[i] = orig
            num[n] = (up - down) / (2 * EPS)
        ana = np.asarray(analytic[name], dtype=np.float64).reshape(-1)[idx]
        denom = max(np.linalg.norm(ana) + np.linalg.norm(num), _FLOOR)
        worst = max(worst, float(np.linalg.norm(ana - num) / denom))
    return worst


def check_conv(rng, spec: tc.ConvSpec, size=(9, 10), probes=24) -> float:
    x = rng.standard_normal((2, spec.in_channels, *size))
    w = rng.standard_normal((spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w))
    b = rng.standard_normal(spec.out_channels)
    R = rng.standard_normal(tc.conv2d(x, w, b, spec).shape)
    gx, gw, gb = tc.conv2d_backward(x, w, spec, R)
    return _probe(lambda: float(np.sum(R * tc.conv2d(x, w, b, spec))),
                  {"x": x, "w": w, "b": b}, {"x": gx, "w": gw, "b": gb}, rng, probes)


def check_deconv(rng, spec: tc.ConvSpec, size=(5, 6), probes=24) -> float:
    x = rng.standard_normal((2, spec.in_channels, *size))
    w = rng.standard_normal((spec.in_channels, spec.out_channels, spec.kernel_h, spec.kernel_w))
    b = rng.standard_normal(spec.out_channels)
    R = rng.standard_normal(tc.deconv2d(x, w, spec, b).shape)
    gx, gw, gb = tc.deconv2d_backward(x, w, spec, R)
    return _probe(lambda: float(np.sum(R * tc.deconv2d(x, w, spec, b))),
                  {"x": x, "w": w, "b": b}, {"x": gx, "w": gw, "b": gb}, rng, probes)


def check_batchnorm(rng, mode: str, shape=(2, 3, 4, 5), probes=24) -> float:
    x = rng.standard_normal(shape) * 2 + 0.5
    state = tc.BNState.fresh(shape[1])
    state.gamma = rng.uniform(0.5, 1.5, shape[1])
    state.beta = rng.standard_normal(shape[1])
    state.running_mean = rng.standard_normal(shape[1])
    state.running_var = rng.uniform(0.5, 2.0, shape[1])

    def run():
        # running statistics must not leak between evaluations
        return tc.batchnorm(x, copy.deepcopy(state), mode)

    y, cache = run()
    R = rng.standard_normal(y.shape)
    gx, gg, gb = tc.batchnorm_backward(cache, state.gamma, R)
    return _probe(lambda: float(np.sum(R * run()[0])),
                  {"x": x, "gamma": state.gamma, "beta": state.beta},
                  {"x": gx, "gamma": gg, "beta": gb}, rng, probes)


def check_relu(rng, probes=24) -> float:
    x = rng.standard_normal((2, 3, 5, 5))
    x[np.abs(x) < 1e-3] = 0.5  # keep probes away from the kink
    R = rng.standard_normal(x.shape)
    return _probe(lambda: float(np.sum(R * tc.relu(x))), {"x": x}, {"x": tc.relu_backward(x, R)}, rng, probes)


def check_maxpool(rng, probes=24) -> float:
    # distinct values spaced far beyond EPS so no probe flips the argmax
    x = rng.permutation(2 * 3 * 6 * 8).reshape(2, 3, 6, 8) * 0.01
    y, am = tc.maxpool2(x)
    R = rng.standard_normal(y.shape)
    return _probe(lambda: float(np.sum(R * tc.maxpool2(x)[0])), {"x": x},
                  {"x": tc.maxpool2_backward(am, R)}, rng, probes)


def check_concat(rng, probes=24) -> float:
    xs = {f"x{i}": rng.standard_normal((2, c, 3, 4)) for i, c in enumerate((2, 3, 1))}
    R = rng.standard_normal((2, 6, 3, 4))
    parts = tc.concat_channels_backward([2, 3, 1], R)
    return _probe(lambda: float(np.sum(R * tc.concat_channels(list(xs.values())))), xs,
                  dict(zip(xs, parts)), rng, probes)


def check_softmax_nll(rng, probes=24) -> float:
    s = rng.standard_normal((2, 7, 4, 5)) * 3
    labels = rng.integers(-1, 7, size=(2, 4, 5))
    labels[0, 0, 0] = 3
    _, g = softmax_nll(s, labels)
    return _probe(lambda: float(softmax_nll(s, labels)[0]), {"s": s}, {"s": g}, rng, probes)


def check_network(rng, arch: hnet.NetArch, size=16, probes=4, seed=0) -> float:
    params = hnet.init_params(seed, arch, np.float64)
    for name, t in params.tensors.items():  # move BN/bias off their trivial init
        if name.endswith(("gamma", "beta", ".b")):
            t += 0.1 * rng.standard_normal(t.shape)
    x = rng.uniform(-1, 1, (1, 3, size, size))
    out, _ = hnet.forward(x, params, "train")
    labels = rng.integers(-1, arch.K, size=(1,) + out.shape[2:])
    labels[0, 0, 0] = 0

    def objective():
        return float(softmax_nll(hnet.forward(x, params, "train")[0], labels)[0])

    scores, cache = hnet.forward(x, params, "train")
    _, g = softmax_nll(scores, labels)
    grads = hnet.backward(cache, g)
    return _probe(objective, params.tensors, grads, rng, probes)


def layer_configs():
    """(name, callable(rng)) pairs spanning stride {1, 2} and dilation {1, 2, 4}."""
    out = []
    for stride in (1, 2):
        for dil in (1, 2, 4):
            for k, pad in ((3, dil), (2, 0)):
                spec = tc.ConvSpec(3, 4, k, k, stride=stride, pad=pad, dilation=dil)
                out.append((f"conv k{k} s{stride} d{dil} p{pad}", lambda r, s=spec: check_conv(r, s, (13, 14))))
            dspec = tc.ConvSpec(3, 2, 3, 3, stride=stride, pad=1, dilation=dil)
            out.append((f"deconv k3 s{stride} d{dil} p1", lambda r, s=dspec: check_deconv(r, s)))
    out.append(("deconv k4 s2 p1 (head)", lambda r: check_deconv(r, tc.ConvSpec.square(3, 3, 4, stride=2, pad=1))))
    out.append(("deconv k8 s4 p2 (head)", lambda r: check_deconv(r, tc.ConvSpec.square(2, 2, 8, stride=4, pad=2))))
    out.append(("conv 1x1", lambda r: check_conv(r, tc.ConvSpec.square(5, 3, 1))))
    out.append(("conv 3x1 asymmetric", lambda r: check_conv(r, tc.ConvSpec(2, 3, 3, 1, stride=2, pad=1, dilation=2))))
    out.append(("batchnorm train", lambda r: check_batchnorm(r, "train")))
    out.append(("batchnorm eval", lambda r: check_batchnorm(r, "eval")))
    out.append(("relu", check_relu))
    out.append(("maxpool2", check_maxpool))
    out.append(("concat", check_concat))
    out.append(("softmax+nll", check_softmax_nll))
    return out


def network_configs(K: int = 6):
    base = hnet.NetArch(K=K, **hnet.REDUCED_ARCH)
    return [
        ("network full", base),
        ("network no-concat", replace(base, concat=False)),
        ("network no-dilation", replace(base, dilated=False)),
        ("network no-dilation no-concat", replace(base, dilated=False, concat=False)),
        ("network mixed widths", replace(base, widths=(4, 8, 8, 6), stem_width=4)),
    ]


def run_suite(seed: int = 0, network: bool = True) -> list:
    """Run every check; returns a list of :class:`CheckResult`."""
    results = []
    for i, (name, fn) in enumerate(layer_configs()):
        results.append(CheckResult(name, fn(np.random.default_rng([seed, i])), LAYER_TOL))
    if network:
        for i, (name, arch) in enumerate(network_configs()):
            rel = check_network(np.random.default_rng([seed, 1000 + i]), arch, seed=seed)
            results.append(CheckResult(name, rel, NET_TOL))
    return results
