from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hfdepth import net as hnet
from hfdepth import trainer as T
from hfdepth.depth_bins import make_binning
from hfdepth.loss import IGNORE, softmax_nll
from hfdepth.synth import Sample, SceneSpec, generate_dataset

ARCH = hnet.NetArch(K=8, **hnet.REDUCED_ARCH)
BINS = make_binning(1.5, 12.0, 8)


def cfg(**kw):
    base = dict(binning=BINS, arch=ARCH, total_iters=32, fixed_iters=16, decay_every=8, base_lr=0.05, log_every=4)
    base.update(kw)
    return T.TrainConfig(**base)


def small_data(n=4, size=16, seed=0):
    return generate_dataset(SceneSpec(seed=seed, height=size, width=size, focal=6.0), n)


def test_long_reference_schedule():
    c = T.TrainConfig(base_lr=0.001, total_iters=50_000, fixed_iters=30_000, decay_every=10_000)
    assert T.lr_at(0, c) == 0.001
    assert T.lr_at(29_999, c) == 0.001
    assert T.lr_at(35_000, c) == pytest.approx(0.0001)
    assert T.lr_at(45_000, c) == pytest.approx(0.00001)


def test_constant_rate_when_decay_factor_is_one():
    c = T.TrainConfig(decay_factor=1.0)
    assert {T.lr_at(i, c) for i in range(0, c.total_iters, 97)} == {c.base_lr}


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 10_000))
def test_lr_non_increasing(a, b):
    c = T.TrainConfig(total_iters=10_000, fixed_iters=3000, decay_every=700, decay_factor=0.3)
    lo, hi = sorted((a, b))
    assert T.lr_at(lo, c) >= T.lr_at(hi, c)


@pytest.mark.parametrize(
    "kw",
    [dict(base_lr=0), dict(decay_every=0), dict(decay_factor=-1), dict(momentum=-0.1), dict(accum_steps=0),
     dict(fixed_iters=40, total_iters=32), dict(binning=make_binning(1, 2, 5))],
)
def test_config_validation(kw):
    with pytest.raises(ValueError):
        cfg(**kw)


def one_param(theta):
    """Parameter set holding a single conv weight and one BN scale."""
    p = hnet.NetParams(ARCH, {"w.w": np.array([theta]), "bn.gamma": np.array([1.0])}, {})
    return p


def test_sgd_zero_everything_is_identity():
    p = one_param(0.7)
    s = T.OptState.zeros_like(p)
    T.sgd_step(p, {k: np.zeros(1) for k in p.tensors}, s, cfg(weight_decay=0.0), 0.1)
    assert p.tensors["w.w"][0] == 0.7


def test_sgd_single_scalar_step():
    p = one_param(1.0)
    s = T.OptState.zeros_like(p)
    T.sgd_step(p, {"w.w": np.ones(1), "bn.gamma": np.zeros(1)}, s, cfg(momentum=0.0, weight_decay=0.0), 0.1)
    assert p.tensors["w.w"][0] == pytest.approx(0.9)


def test_momentum_accumulates():
    p = one_param(1.0)
    s = T.OptState.zeros_like(p)
    c = cfg(momentum=0.9, weight_decay=0.0)
    g = {"w.w": np.full(1, 2.0), "bn.gamma": np.zeros(1)}
    T.sgd_step(p, g, s, c, 0.1)
    before = p.tensors["w.w"][0]
    T.sgd_step(p, g, s, c, 0.1)
    assert before - p.tensors["w.w"][0] == pytest.approx(0.1 * 1.9 * 2.0)


def test_weight_decay_exempts_batchnorm():
    p = one_param(2.0)
    p.tensors["bn.gamma"][:] = 1.5
    s = T.OptState.zeros_like(p)
    c = cfg(momentum=0.0, weight_decay=0.01)
    zero = {k: np.zeros(1) for k in p.tensors}
    for _ in range(5):
        T.sgd_step(p, zero, s, c, 1.0)
    assert p.tensors["bn.gamma"][0] == 1.5
    assert p.tensors["w.w"][0] == pytest.approx(2.0 * 0.99**5)


def test_sgd_errors_leave_params_untouched():
    p = one_param(1.0)
    s = T.OptState.zeros_like(p)
    with pytest.raises(ValueError):
        T.sgd_step(p, {"w.w": np.ones(2), "bn.gamma": np.zeros(1)}, s, cfg(), 0.1)
    with pytest.raises(T.TrainingDiverged):
        T.sgd_step(p, {"w.w": np.ones(1), "bn.gamma": np.array([np.nan])}, s, cfg(), 0.1)
    assert p.tensors["w.w"][0] == 1.0


def test_target_labels_half_resolution_with_ignore():
    s = small_data(1)[0]
    s.valid[0, 0, 0, 0] = False
    lab = T.target_labels(s, BINS)
    assert lab.shape == (1, 8, 8)
    assert lab[0, 0, 0] == IGNORE
    assert lab.min() >= IGNORE and lab.max() < 8
    filled = T.target_labels(s, BINS, fill=True)
    assert np.all(filled >= 0)


def test_accumulation_averages_identical_gradients():
    sample = small_data(1)[0]
    c1 = cfg(accum_steps=1, total_iters=1, fixed_iters=1, dtype="float64", weight_decay=0.0)
    c8 = cfg(accum_steps=8, total_iters=8, fixed_iters=8, dtype="float64", weight_decay=0.0)
    # eval-mode BN keeps the running statistics out of the comparison
    c1, c8 = replace(c1, bn_mode="eval"), replace(c8, bn_mode="eval")
    p1, _, _ = T.train([sample], c1, hnet.init_params(0, ARCH, np.float64))
    p8, _, _ = T.train([sample], c8, hnet.init_params(0, ARCH, np.float64))
    for k in p1.tensors:
        np.testing.assert_allclose(p1.tensors[k], p8.tensors[k], rtol=1e-12, atol=1e-14)


def test_update_equals_sgd_on_explicit_mean():
    data = small_data(4)
    c = cfg(accum_steps=4, total_iters=4, fixed_iters=4, dtype="float64")
    p0 = hnet.init_params(0, ARCH, np.float64)
    trained, _, _ = T.train(data, c, p0.copy())
    ref = p0.copy()
    order = T.epoch_order(c.seed, 0, len(data))
    grads = []
    for i in order:
        s = data[i]
        scores, cache = hnet.forward(T.normalize_image(s.rgb).astype(np.float64), ref, "train")
        _, g = softmax_nll(scores, T.target_labels(s, BINS))
        grads.append(hnet.backward(cache, g))
    mean = {k: sum(g[k] for g in grads) / 4 for k in ref.tensors}
    T.sgd_step(ref, mean, T.OptState.zeros_like(ref), c, c.base_lr)
    for k in ref.tensors:
        np.testing.assert_allclose(trained.tensors[k], ref.tensors[k], rtol=1e-10, atol=1e-13)


def test_two_sample_loss_decreases():
    data = small_data(2, seed=3)
    c = cfg(total_iters=200, fixed_iters=200, accum_steps=2, log_every=1, base_lr=0.05)
    _, _, log = T.train(data, c)
    losses = np.array([r[2] for r in log.rows])
    smoothed = losses.reshape(10, 20).mean(axis=1)
    assert np.all(np.diff(smoothed) <= 0), smoothed


def test_same_seed_gives_identical_checkpoint(tmp_path):
    data = small_data(3)
    outs = []
    for name in ("a", "b"):
        p, s, log = T.train(data, cfg(augment=True))
        T.save_training_checkpoint(tmp_path / f"{name}.ck", p, s, BINS)
        log.write_csv(tmp_path / f"{name}.csv")
        outs.append(((tmp_path / f"{name}.ck").read_bytes(), (tmp_path / f"{name}.csv").read_bytes()))
    assert outs[0] == outs[1]


def test_resume_reproduces_uninterrupted_run(tmp_path):
    data = small_data(3)
    c = cfg(augment=True, dtype="float32")
    full, _, _ = T.train(data, c)
    p, s, _ = T.train(data, c, stop_at=16)
    T.save_training_checkpoint(tmp_path / "mid.ck", p, s, BINS)
    p2, s2, b = T.load_training_checkpoint(tmp_path / "mid.ck")
    assert s2.iteration == 16 and b == BINS
    resumed, _, _ = T.train(data, c, p2, s2)
    for k in full.tensors:
        assert np.array_equal(full.tensors[k], resumed.tensors[k])
    for k in full.buffers:
        assert np.array_equal(full.buffers[k], resumed.buffers[k])


def test_resume_off_boundary_is_rejected():
    data = small_data(2)
    p, s, _ = T.train(data, cfg(), stop_at=8)
    s.iteration = 5
    with pytest.raises(ValueError):
        T.train(data, cfg(), p, s)


def test_log_records_cadence_and_epoch_seeds(tmp_path):
    data = small_data(4)
    _, _, log = T.train(data, cfg(total_iters=16, fixed_iters=8, decay_every=4, log_every=4))
    assert [r[0] for r in log.rows] == [4, 8, 12, 16]
    assert [r[1] for r in log.rows] == pytest.approx([0.05, 0.05, 0.005, 0.0005])
    assert [e for e, _ in log.epoch_seeds] == [0, 1, 2, 3]
    log.write_csv(tmp_path / "log.csv")
    assert (tmp_path / "log.csv").read_text().splitlines()[0] == "iter,lr,loss"


def test_non_finite_loss_aborts():
    s = small_data(1)[0]
    bad = Sample(np.full_like(s.rgb, np.nan), s.depth, s.valid)
    with pytest.raises(FloatingPointError):
        T.train([bad], cfg())


def test_empty_dataset():
    with pytest.raises(ValueError):
        T.train([], cfg())
