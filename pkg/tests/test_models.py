"""Base model, filters, identity init, freezing, inference sampling."""

import numpy as np
import pytest

from drift import DomainError
from drift.data import generate_synthetic_dataset
from drift.models import (
    FilterArch, bind_params, build_base_model, build_filter_bank,
    base_apply, ensemble_forward, filter_forward, filter_forward_np,
    filter_param_count, init_filter_identity, param_checksum,
    pretrain_and_freeze, sample_filter_index,
)
from drift.tape import Tape, vjp

RNG = np.random.default_rng(42)


def test_build_base_model_deterministic():
    m1 = build_base_model((3, 16, 16), 10, seed=7)
    m2 = build_base_model((3, 16, 16), 10, seed=7)
    m3 = build_base_model((3, 16, 16), 10, seed=8)
    assert m1.checksum() == m2.checksum()
    assert m1.checksum() != m3.checksum()


def test_base_forward_shapes():
    m = build_base_model((3, 16, 16), 10, seed=7)
    x = RNG.uniform(0, 1, (3, 16, 16))
    assert m.forward_np(x).shape == (10,)
    xb = RNG.uniform(0, 1, (5, 3, 16, 16))
    assert m.forward_np(xb).shape == (5, 10)


def test_base_model_degenerate_args():
    with pytest.raises(DomainError):
        build_base_model((3, 0, 16), 10, seed=0)
    with pytest.raises(DomainError):
        build_base_model((3, 16, 16), 1, seed=0)


def test_taped_and_numpy_base_forward_match():
    m = build_base_model((3, 8, 8), 5, seed=3)
    x = RNG.uniform(0, 1, (4, 3, 8, 8))
    t = Tape()
    logits = base_apply(bind_params(t, m.params), t.leaf(x))
    np.testing.assert_array_equal(logits.value, m.forward_np(x))


# -- filters ------------------------------------------------------------------

def test_res_block_identity_init_bitwise():
    f = init_filter_identity("res_block", seed=0)
    x = RNG.uniform(0, 1, (3, 16, 16))
    assert filter_forward_np(f, x).tobytes() == x.tobytes()
    t = Tape()
    xv = t.leaf(x)
    assert filter_forward(f, xv).value.tobytes() == x.tobytes()


def test_identity_init_seeds_differ_but_both_identity():
    f1 = init_filter_identity("res_block", seed=1)
    f2 = init_filter_identity("res_block", seed=2)
    assert f1.checksum() != f2.checksum()
    x = RNG.uniform(0, 1, (3, 8, 8))
    assert filter_forward_np(f1, x).tobytes() == filter_forward_np(f2, x).tobytes()


@pytest.mark.parametrize("arch", ["single_conv", "res_block", "deep_conv"])
def test_filter_shape_preserving(arch):
    f = init_filter_identity(arch, seed=4)
    x = RNG.uniform(0, 1, (3, 12, 12))
    assert filter_forward_np(f, x).shape == x.shape
    xb = RNG.uniform(0, 1, (2, 3, 12, 12))
    assert filter_forward_np(f, xb).shape == xb.shape


@pytest.mark.parametrize("arch", ["single_conv", "res_block", "deep_conv"])
def test_filter_vjp_matches_fd(arch):
    f = init_filter_identity(arch, seed=9)
    # move params off the identity so the test is not trivial
    r = np.random.default_rng(1)
    for k in f.params:
        f.params[k] = f.params[k] + 0.05 * r.standard_normal(f.params[k].shape)
    x0 = RNG.uniform(0.2, 0.8, (3, 6, 6))
    v = r.standard_normal((3, 6, 6))

    t = Tape()
    xv = t.leaf(x0)
    y = filter_forward(f, xv)
    (g,) = vjp(t, y, v, [xv])

    def scal(x):
        return float(np.vdot(v, filter_forward_np(f, x)))

    eta = 1e-5
    u = r.standard_normal(x0.shape)
    u /= np.linalg.norm(u)
    fd = (scal(x0 + eta * u) - scal(x0 - eta * u)) / (2 * eta)
    an = float(np.vdot(u, g.value))
    assert abs(an - fd) / (abs(fd) + 1e-12) < 1e-5


def test_res_block_param_count():
    f = init_filter_identity("res_block", seed=0)
    assert filter_param_count(f) == 883


def test_taped_and_numpy_filter_match():
    for arch in ("single_conv", "res_block", "deep_conv"):
        f = init_filter_identity(arch, seed=5)
        x = RNG.uniform(0, 1, (2, 3, 8, 8))
        t = Tape()
        y = filter_forward(f, t.leaf(x))
        np.testing.assert_array_equal(y.value, filter_forward_np(f, x))


# -- pretraining and freeze ---------------------------------------------------

@pytest.fixture(scope="module")
def desk():
    train, eval_ = generate_synthetic_dataset(10, 16, 40, seed=0)
    model = build_base_model((3, 16, 16), 10, seed=0)
    model = pretrain_and_freeze(model, (train.x, train.y), epochs=30, lr=1e-3)
    return model, train, eval_


def test_pretrain_reaches_train_accuracy(desk):
    model, train, eval_ = desk
    pred = model.forward_np(train.x).argmax(axis=1)
    assert (pred == train.y).mean() >= 0.95
    pred_ev = model.forward_np(eval_.x).argmax(axis=1)
    assert (pred_ev == eval_.y).mean() >= 0.90


def test_freeze_makes_params_readonly(desk):
    model, _, _ = desk
    assert model.frozen
    with pytest.raises(ValueError):
        model.params["fc_b"][0] = 1.0
    assert model.checksum() == model.frozen_checksum


def test_zero_epochs_freezes_without_update():
    tr, _ = generate_synthetic_dataset(2, 8, 4, seed=1)
    m = build_base_model((3, 8, 8), 2, seed=1)
    before = m.checksum()
    m = pretrain_and_freeze(m, (tr.x, tr.y), epochs=0, lr=1e-3)
    assert m.frozen and m.checksum() == before


def test_separable_blobs_perfect_accuracy():
    # two well-separated classes; a few epochs reach 100% train accuracy
    tr, _ = generate_synthetic_dataset(2, 8, 20, seed=3)
    m = build_base_model((3, 8, 8), 2, seed=3)
    m = pretrain_and_freeze(m, (tr.x, tr.y), epochs=30, lr=1e-3)
    pred = m.forward_np(tr.x).argmax(axis=1)
    assert (pred == tr.y).mean() == 1.0


# -- ensemble forward ---------------------------------------------------------

def test_identity_mode_matches_base(desk):
    model, _, eval_ = desk
    bank = build_filter_bank("res_block", 4, seed=0)
    x = eval_.x[0]
    np.testing.assert_array_equal(
        ensemble_forward(bank, model, x, "identity"), model.forward_np(x))


def test_index_mode_and_bad_index(desk):
    model, _, eval_ = desk
    bank = build_filter_bank("res_block", 4, seed=0)
    x = eval_.x[0]
    out = ensemble_forward(bank, model, x, ("index", 2))
    np.testing.assert_array_equal(
        out, model.forward_np(filter_forward_np(bank.filters[2], x)))
    with pytest.raises(DomainError):
        ensemble_forward(bank, model, x, ("index", 4))


def test_sample_mode_reproducible(desk):
    model, _, eval_ = desk
    bank = build_filter_bank("res_block", 4, seed=0)
    xb = eval_.x[:8]
    a = ensemble_forward(bank, model, xb, ("sample", 123))
    b = ensemble_forward(bank, model, xb, ("sample", 123))
    assert a.tobytes() == b.tobytes()


def test_sample_mode_k1_always_filter_zero():
    assert all(sample_filter_index(1, [s]) == 0 for s in range(20))


def test_sampling_uniformity():
    draws = [sample_filter_index(4, [99, i]) for i in range(10_000)]
    freq = np.bincount(draws, minlength=4) / 10_000
    assert freq.min() >= 0.22 and freq.max() <= 0.28


def test_identity_init_ensemble_matches_base_accuracy(desk):
    model, _, eval_ = desk
    bank = build_filter_bank("res_block", 4, seed=0)
    base_pred = model.forward_np(eval_.x).argmax(axis=1)
    ens = ensemble_forward(bank, model, eval_.x, ("sample", 7)).argmax(axis=1)
    assert np.array_equal(base_pred, ens)


def test_filter_arch_validation():
    with pytest.raises(DomainError):
        FilterArch("resnet50")
    with pytest.raises(DomainError):
        build_filter_bank("res_block", 0, seed=0)
