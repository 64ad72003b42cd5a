"""Acceptance criteria 1-9, each at its stated tolerance.

Criteria 4-7 share one benchmark: 512 training and 128 test scenes of 64x64,
K=40 and the default TrainConfig at seed 0. Every model is trained once per
session. The whole module takes about 20 minutes on one CPU core.
"""

import math
import time
from dataclasses import replace

import numpy as np
import pytest

import conftest
from hfdepth import cli, gradcheck
from hfdepth import tensor_core as tc
from hfdepth.depth_bins import make_binning, one_hot, quantize_depth, soft_weighted_sum
from hfdepth.metrics import compute_metrics, confusion, pixel_accuracy, run_model
from hfdepth.synth import SceneSpec, generate_dataset
from hfdepth.trainer import TrainConfig, train
from oracles import zero_insert


def record(n, ok, detail):
    conftest.ACCEPTANCE[n] = (bool(ok), detail)
    assert ok, detail


# -- 1: gradients -----------------------------------------------------------------


def test_criterion_1_gradient_correctness():
    t0 = time.perf_counter()
    results = gradcheck.run_suite(seed=0)
    elapsed = time.perf_counter() - t0
    layer = [r for r in results if r.tol == gradcheck.LAYER_TOL]
    netr = [r for r in results if r.tol == gradcheck.NET_TOL]
    names = " ".join(r.name for r in layer)
    spans = all(f"s{s} d{d}" in names for s in (1, 2) for d in (1, 2, 4))
    worst_l = max(r.rel_error for r in layer)
    worst_n = max(r.rel_error for r in netr)
    ok = (
        len(results) >= 20 and spans and worst_l < 1e-4 and worst_n < 1e-3
        and gradcheck.LAYER_TOL == 1e-4 and gradcheck.NET_TOL == 1e-3 and elapsed < 120
    )
    record(1, ok, f"{len(results)} configs, worst layer {worst_l:.1e}, worst network {worst_n:.1e}, {elapsed:.1f}s")


# -- 2: dilated convolution oracle and receptive field --------------------------------


def test_criterion_2_dilation_oracle_and_receptive_field():
    r = np.random.default_rng(2)
    worst = 0.0
    for d in (1, 2, 4):
        for stride in (1, 2):
            x = r.standard_normal((2, 3, 17, 19))
            w = r.standard_normal((4, 3, 3, 3))
            b = r.standard_normal(4)
            got = tc.conv2d(x, w, b, tc.ConvSpec(3, 4, 3, 3, stride=stride, pad=d, dilation=d))
            ext = 2 * d + 1
            ref = tc.conv2d(x, zero_insert(w, d), b, tc.ConvSpec(3, 4, ext, ext, stride=stride, pad=d))
            worst = max(worst, float(np.abs(got - ref).max()))
    rfs = [tc.receptive_field([(3, 1, 1)]), tc.receptive_field([(3, 1, 1), (3, 1, 2)]),
           tc.receptive_field([(3, 1, 1), (3, 1, 2), (3, 1, 4)])]
    ok = worst <= 1e-12 and rfs == [(3, 3), (7, 7), (15, 15)]
    record(2, ok, f"max |conv - zero-inserted oracle| {worst:.1e}; receptive fields {rfs}")


# -- 3: quantization round trip ---------------------------------------------------------


def test_criterion_3_quantization_round_trip():
    b = make_binning(0.1, 10.0, 200)
    r = np.random.default_rng(3)
    d = np.exp(r.uniform(math.log(b.d_min), math.log(b.d_max), 10_000))
    labels = quantize_depth(d, b)
    rec = soft_weighted_sum(one_hot(labels, 200), b)
    err = float(np.abs(np.log(rec) - np.log(d)).max())
    record(3, err <= b.q / 2 + 1e-9, f"max log error {err:.6f} vs bound {b.q / 2 + 1e-9:.6f}")


# -- 4-7: trained benchmark ----------------------------------------------------------------

_CACHE = {}


def benchmark_data():
    if "data" not in _CACHE:
        _CACHE["data"] = (generate_dataset(SceneSpec(seed=0), 512), generate_dataset(SceneSpec(seed=100_000), 128))
    return _CACHE["data"]


def trained(variant="full", K=40):
    key = (variant, K)
    if key not in _CACHE:
        tr, te = benchmark_data()
        cfg = TrainConfig()
        arch = replace(cfg.arch, K=K, concat=variant != "no-concat", dilated=variant != "no-dilation")
        cfg = replace(cfg, arch=arch, binning=make_binning(cfg.binning.d_min, cfg.binning.d_max, K))
        t0 = time.perf_counter()
        params, _, _ = train(tr, cfg)
        ev = run_model(params, te, cfg.binning)
        _CACHE[key] = (ev, cfg.binning, time.perf_counter() - t0)
    return _CACHE[key]


@pytest.mark.slow
def test_criterion_4_soft_beats_hard():
    ev, b, elapsed = trained()  # elapsed covers training and test inference
    soft = compute_metrics(ev.soft, ev.gt).rel
    hard = compute_metrics(ev.hard, ev.gt).rel
    centers = bool(np.all(np.isin(ev.hard, b.centers)))
    ok = soft <= hard and centers and elapsed < 15 * 60
    record(4, ok, f"soft Rel {soft:.4f} <= hard Rel {hard:.4f}; hard outputs on bin centers: {centers}; {elapsed:.0f}s")


@pytest.mark.slow
def test_criterion_5_ablation_ordering():
    rel = {v: compute_metrics(trained(v)[0].soft, trained(v)[0].gt).rel for v in ("full", "no-concat", "no-dilation")}
    ok = rel["full"] <= rel["no-concat"] and rel["full"] <= rel["no-dilation"]
    record(5, ok, ", ".join(f"{k} Rel {v:.4f}" for k, v in rel.items()))


@pytest.mark.slow
def test_criterion_6_bins_sensitivity():
    acc, rel = {}, {}
    for K in (10, 20, 40, 80):
        ev = trained("full", K)[0]
        acc[K] = pixel_accuracy(ev.pred_labels, ev.gt_labels)
        rel[K] = compute_metrics(ev.soft, ev.gt).rel
    decreasing = all(acc[a] > acc[b] for a, b in ((10, 20), (20, 40), (40, 80)))
    band = max(rel[K] for K in (20, 40, 80)) / min(rel[K] for K in (20, 40, 80))
    ok = decreasing and band <= 1.35
    record(6, ok, "accuracy " + " > ".join(f"{acc[K]:.3f}" for K in acc)
           + f"; Rel(20,40,80) spread {band:.3f}x (" + ", ".join(f"{rel[K]:.4f}" for K in (20, 40, 80)) + ")")


@pytest.mark.slow
def test_criterion_7_confusion_structure():
    ev, _, _ = trained()
    C = confusion(ev.pred_labels, ev.gt_labels, 40)
    band, asym = C.band_mass(2), C.asymmetry()
    record(7, band >= 0.60 and asym <= 0.35, f"mass within +-2 bins {band:.3f} (>= 0.60), asymmetry {asym:.3f} (<= 0.35)")


# -- 8: metric identities -----------------------------------------------------------------------


def test_criterion_8_metric_identities():
    r = np.random.default_rng(8)
    gt = np.exp(r.uniform(0, 3, 5000))
    same = compute_metrics(gt, gt)
    scaled = compute_metrics(1.3 * gt, gt)
    ok_same = (same.delta1, same.delta2, same.delta3, same.rel, same.log10, same.rms) == (1, 1, 1, 0, 0, 0)
    ok_scaled = scaled.delta1 == 0 and scaled.delta2 == 1 and abs(scaled.rel - 0.3) <= 1e-12
    ok_sym = ok_cap = True
    for _ in range(50):
        p, g = np.exp(r.uniform(0, 3, 300)), np.exp(r.uniform(0, 3, 300))
        a, b = compute_metrics(p, g), compute_metrics(g, p)
        ok_sym &= (a.delta1, a.delta2, a.delta3) == (b.delta1, b.delta2, b.delta3)
        cap = float(r.uniform(2, 15))
        mask = r.random(300) < 0.9
        keep = mask & (g <= cap)
        ok_cap &= compute_metrics(p, g, mask, cap) == compute_metrics(p[keep], g[keep])
    ok = ok_same and ok_scaled and ok_sym and ok_cap
    record(8, ok, f"identity {ok_same}, 1.3x (delta1 {scaled.delta1}, delta2 {scaled.delta2}, Rel {scaled.rel!r}), "
                  f"symmetry {ok_sym}, cap masking {ok_cap}")


# -- 9: determinism ---------------------------------------------------------------------------------

PIPELINE = """\
count = 16
total_iters = 64
fixed_iters = 32
decay_every = 16
"""


def test_criterion_9_pipeline_determinism(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(PIPELINE)
    outputs = []
    for run in ("a", "b"):
        d = tmp_path / run
        codes = [
            cli.main(["gen-data", "--config", str(cfg), "--out", str(d / "data")]),
            cli.main(["train", "--config", str(cfg), "--data", str(d / "data"), "--out", str(d / "model.ck")]),
            cli.main(["eval", "--config", str(cfg), "--checkpoint", str(d / "model.ck"), "--data", str(d / "data"),
                      "--out", str(d / "metrics.csv")]),
        ]
        assert codes == [0, 0, 0]
        files = sorted(p for p in d.rglob("*") if p.is_file())
        outputs.append({str(p.relative_to(d)): p.read_bytes() for p in files})
    a, b = outputs
    same = a.keys() == b.keys() and all(a[k] == b[k] for k in a)
    kinds = {k.split("/")[0] if "/" in k else k for k in a}
    ok = same and {"data", "model.ck", "metrics.csv"} <= kinds
    record(9, ok, f"{len(a)} files compared (dataset, checkpoint, log, metrics): byte-identical {same}")
