"""Autodiff core: finite-difference oracles, closed forms, vjp contract."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drift import ShapeError, TapeError
from drift.tape import (
    Tape, add, conv2d, cross_entropy_rows, dense, dot, dot_rows, div, grad,
    matmul, maximum, mul, relu, reshape, rows_scale, scale, softmax_cross_entropy,
    sqrt, sub, sum_all, vjp,
)


def rel_err(approx, exact):
    return abs(approx - exact) / (abs(exact) + 1e-12)


def fd_directional(f, x, u, eta=1e-5):
    """Centered finite difference of scalar f along direction u."""
    return (f(x + eta * u) - f(x - eta * u)) / (2 * eta)


def check_grad(build, x0, rng, n_dirs=3, tol=1e-5, eta=1e-5):
    """build(tape, x_var) -> scalar Var. Checks grad against centered FD."""
    tape = Tape()
    xv = tape.leaf(x0)
    out = build(tape, xv)
    (g,) = grad(tape, out, [xv])

    def f(x):
        t = Tape()
        return float(build(t, t.leaf(x)).value)

    for _ in range(n_dirs):
        u = rng.standard_normal(x0.shape)
        u /= np.linalg.norm(u)
        fd = fd_directional(f, x0, u, eta)
        an = float(np.vdot(u, g.value))
        assert rel_err(an, fd) < tol, f"analytic {an} vs fd {fd}"


RNG = np.random.default_rng(20240811)


# -- elementwise and reductions ---------------------------------------------

def test_add_mul_chain_fd():
    x0 = RNG.standard_normal((4, 3))

    def build(t, x):
        y = add(mul(x, x), scale(x, 3.0))
        return sum_all(y)

    check_grad(build, x0, RNG)


def test_div_sqrt_fd():
    x0 = RNG.uniform(0.5, 2.0, size=(5,))

    def build(t, x):
        c = t.leaf(np.full(5, 3.0))
        return sum_all(div(sqrt(x), c))

    check_grad(build, x0, RNG)


def test_relu_fd_away_from_kink():
    x0 = RNG.standard_normal((6, 6))
    x0[np.abs(x0) < 1e-2] = 0.3  # keep clear of the kink

    def build(t, x):
        return sum_all(relu(x))

    check_grad(build, x0, RNG)


def test_relu_subgradient_at_zero_is_zero():
    t = Tape()
    x = t.leaf(np.array([-1.0, 0.0, 2.0]))
    y = sum_all(relu(x))
    (g,) = grad(t, y, [x])
    assert np.array_equal(g.value, np.array([0.0, 0.0, 1.0]))


def test_maximum_fd():
    a0 = RNG.standard_normal(8)
    b0 = RNG.standard_normal(8)
    sep = np.abs(a0 - b0) < 1e-2
    a0[sep] += 0.5

    t = Tape()
    av, bv = t.leaf(a0), t.leaf(b0)
    out = sum_all(maximum(av, bv))
    ga, gb = grad(t, out, [av, bv])
    assert np.array_equal(ga.value, (a0 >= b0).astype(float))
    assert np.array_equal(gb.value, (a0 < b0).astype(float))


def test_dot_backward_closed_form():
    a0 = RNG.standard_normal(7)
    b0 = RNG.standard_normal(7)
    t = Tape()
    av, bv = t.leaf(a0), t.leaf(b0)
    ga, gb = grad(t, dot(av, bv), [av, bv])
    np.testing.assert_allclose(ga.value, b0, rtol=1e-12)
    np.testing.assert_allclose(gb.value, a0, rtol=1e-12)


def test_rows_scale_dot_rows_fd():
    x0 = RNG.standard_normal((3, 4))

    def build(t, x):
        v = t.leaf(np.array([0.5, -1.0, 2.0]))
        return sum_all(rows_scale(mul(x, x), v))

    check_grad(build, x0, RNG)


def test_dot_rows_matches_per_row_dots():
    a0 = RNG.standard_normal((4, 2, 3))
    b0 = RNG.standard_normal((4, 2, 3))
    t = Tape()
    out = dot_rows(t.leaf(a0), t.leaf(b0))
    expect = (a0 * b0).reshape(4, -1).sum(axis=1)
    np.testing.assert_allclose(out.value, expect, rtol=1e-12)


# -- dense / matmul ----------------------------------------------------------

def test_dense_backward_closed_form():
    w0 = RNG.standard_normal((3, 5))
    b0 = RNG.standard_normal(3)
    x0 = RNG.standard_normal(5)
    u = RNG.standard_normal(3)

    t = Tape()
    xv, wv, bv = t.leaf(x0), t.leaf(w0), t.leaf(b0)
    y = dense(xv, wv, bv)
    np.testing.assert_allclose(y.value, w0 @ x0 + b0, rtol=1e-12)

    gx, gw, gb = vjp(t, y, u, [xv, wv, bv])
    np.testing.assert_allclose(gx.value, w0.T @ u, rtol=1e-12)
    np.testing.assert_allclose(gw.value, np.outer(u, x0), rtol=1e-12)
    np.testing.assert_allclose(gb.value, u, rtol=1e-12)


def test_dense_batched_matches_loop():
    w0 = RNG.standard_normal((3, 5))
    b0 = RNG.standard_normal(3)
    x0 = RNG.standard_normal((4, 5))
    t = Tape()
    y = dense(t.leaf(x0), t.leaf(w0), t.leaf(b0))
    np.testing.assert_allclose(y.value, x0 @ w0.T + b0, rtol=1e-12)


def test_matmul_fd():
    x0 = RNG.standard_normal((3, 4))
    w0 = np.random.default_rng(7).standard_normal((4, 2))

    def build(t, x):
        w = t.leaf(w0)
        return sum_all(mul(matmul(x, w), matmul(x, w)))

    check_grad(build, x0, RNG)


# -- conv2d ------------------------------------------------------------------

def test_conv2d_forward_matches_direct():
    x0 = RNG.standard_normal((2, 5, 5))
    k0 = RNG.standard_normal((3, 2, 3, 3))
    b0 = RNG.standard_normal(3)
    t = Tape()
    y = conv2d(t.leaf(x0), t.leaf(k0), t.leaf(b0), padding=1)
    assert y.value.shape == (3, 5, 5)

    xp = np.pad(x0, ((0, 0), (1, 1), (1, 1)))
    ref = np.zeros((3, 5, 5))
    for o in range(3):
        for i in range(5):
            for j in range(5):
                ref[o, i, j] = np.vdot(xp[:, i:i + 3, j:j + 3], k0[o]) + b0[o]
    np.testing.assert_allclose(y.value, ref, rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("pad", [0, 1])
def test_conv2d_grads_fd(pad):
    x0 = RNG.standard_normal((2, 6, 6))
    k0 = RNG.standard_normal((3, 2, 3, 3)) * 0.3
    b0 = RNG.standard_normal(3) * 0.3

    def loss(x, k, b):
        t = Tape()
        y = conv2d(t.leaf(x), t.leaf(k), t.leaf(b), padding=pad)
        return float(sum_all(mul(y, y)).value)

    t = Tape()
    xv, kv, bv = t.leaf(x0), t.leaf(k0), t.leaf(b0)
    y = conv2d(xv, kv, bv, padding=pad)
    out = sum_all(mul(y, y))
    gx, gk, gb = grad(t, out, [xv, kv, bv])

    eta = 1e-5
    for arr, g, name in ((x0, gx, "x"), (k0, gk, "k"), (b0, gb, "b")):
        u = np.random.default_rng(3).standard_normal(arr.shape)
        u /= np.linalg.norm(u)
        if name == "x":
            fd = (loss(arr + eta * u, k0, b0) - loss(arr - eta * u, k0, b0)) / (2 * eta)
        elif name == "k":
            fd = (loss(x0, arr + eta * u, b0) - loss(x0, arr - eta * u, b0)) / (2 * eta)
        else:
            fd = (loss(x0, k0, arr + eta * u) - loss(x0, k0, arr - eta * u)) / (2 * eta)
        an = float(np.vdot(u, g.value))
        assert rel_err(an, fd) < 1e-5, f"{name}: {an} vs {fd}"


def test_conv2d_batched_matches_per_sample():
    # BLAS blocking may differ with row count, so equality is up to a few ulp.
    x0 = RNG.standard_normal((4, 2, 5, 5))
    k0 = RNG.standard_normal((3, 2, 3, 3))
    b0 = RNG.standard_normal(3)
    t = Tape()
    yb = conv2d(t.leaf(x0), t.leaf(k0), t.leaf(b0), padding=1)
    for n in range(4):
        t2 = Tape()
        y1 = conv2d(t2.leaf(x0[n]), t2.leaf(k0), t2.leaf(b0), padding=1)
        np.testing.assert_allclose(yb.value[n], y1.value, rtol=1e-13, atol=0)


def test_conv2d_channel_mismatch_raises():
    t = Tape()
    with pytest.raises(ShapeError):
        conv2d(t.leaf(np.zeros((2, 4, 4))), t.leaf(np.zeros((3, 5, 3, 3))),
               t.leaf(np.zeros(3)), padding=1)


# -- softmax cross-entropy ---------------------------------------------------

def test_xent_backward_is_softmax_minus_onehot():
    z0 = RNG.standard_normal(6)
    t = Tape()
    zv = t.leaf(z0)
    loss = softmax_cross_entropy(zv, 2)
    (g,) = grad(t, loss, [zv])
    p = np.exp(z0 - z0.max())
    p /= p.sum()
    p[2] -= 1.0
    np.testing.assert_allclose(g.value, p, rtol=1e-12, atol=1e-14)


def test_xent_stable_at_large_logits():
    t = Tape()
    z = t.leaf(np.array([1000.0, 0.0, -1000.0]))
    loss = softmax_cross_entropy(z, 0)
    assert np.isfinite(loss.value)
    assert float(loss.value) < 1e-8


def test_xent_batched_matches_scalar():
    z0 = RNG.standard_normal((5, 4))
    labels = np.array([0, 3, 1, 2, 2])
    t = Tape()
    out = softmax_cross_entropy(t.leaf(z0), labels)
    for n in range(5):
        t2 = Tape()
        s = softmax_cross_entropy(t2.leaf(z0[n]), int(labels[n]))
        np.testing.assert_allclose(out.value[n], s.value, rtol=1e-12)


def test_xent_second_order_fd():
    # d/dz of ||dL/dz||^2 must match finite differences: exercises
    # differentiating through a recorded backward pass.
    z0 = RNG.standard_normal(5)

    def gnorm2(z):
        t = Tape()
        zv = t.leaf(z)
        loss = softmax_cross_entropy(zv, 1)
        (g,) = grad(t, loss, [zv])
        return t, zv, dot(g, g)

    t, zv, out = gnorm2(z0)
    (h,) = grad(t, out, [zv])

    eta = 1e-5
    u = RNG.standard_normal(5)
    u /= np.linalg.norm(u)
    fplus = float(gnorm2(z0 + eta * u)[2].value)
    fminus = float(gnorm2(z0 - eta * u)[2].value)
    fd = (fplus - fminus) / (2 * eta)
    an = float(np.vdot(u, h.value))
    assert rel_err(an, fd) < 1e-4


def test_second_order_through_conv():
    x0 = RNG.standard_normal((1, 4, 4)) * 0.5
    k0 = RNG.standard_normal((1, 1, 3, 3)) * 0.5
    b0 = np.zeros(1)

    def gnorm2(k):
        t = Tape()
        xv, kv, bv = t.leaf(x0), t.leaf(k), t.leaf(b0)
        y = conv2d(xv, kv, bv, padding=1)
        out = sum_all(mul(y, y))
        (gx,) = grad(t, out, [xv])
        return t, kv, dot(gx, gx)

    t, kv, out = gnorm2(k0)
    (h,) = grad(t, out, [kv])

    eta = 1e-5
    u = RNG.standard_normal(k0.shape)
    u /= np.linalg.norm(u)
    fd = (float(gnorm2(k0 + eta * u)[2].value)
          - float(gnorm2(k0 - eta * u)[2].value)) / (2 * eta)
    an = float(np.vdot(u, h.value))
    assert rel_err(an, fd) < 1e-4


# -- vjp contract -------------------------------------------------------------

def test_vjp_linearity_in_cotangent():
    x0 = RNG.standard_normal(6)
    w0 = RNG.standard_normal((4, 6))
    b0 = RNG.standard_normal(4)
    u1 = RNG.standard_normal(4)
    u2 = RNG.standard_normal(4)
    a, b = 0.7, -2.3

    t = Tape()
    xv = t.leaf(x0)
    y = relu(dense(xv, t.leaf(w0), t.leaf(b0)))
    (g1,) = vjp(t, y, u1, [xv])
    (g2,) = vjp(t, y, u2, [xv])
    (gc,) = vjp(t, y, a * u1 + b * u2, [xv])
    np.testing.assert_allclose(gc.value, a * g1.value + b * g2.value,
                               rtol=1e-12, atol=1e-14)


def test_vjp_disconnected_leaf_yields_zeros():
    t = Tape()
    x = t.leaf(np.ones(3))
    z = t.leaf(np.ones((2, 2)))
    y = sum_all(mul(x, x))
    gz, = vjp(t, y, np.asarray(1.0), [z])
    assert np.array_equal(gz.value, np.zeros((2, 2)))


def test_vjp_multiple_wrt_order():
    t = Tape()
    a = t.leaf(np.array([1.0, 2.0]))
    b = t.leaf(np.array([3.0, 4.0]))
    y = dot(a, b)
    gb, ga = vjp(t, y, np.asarray(1.0), [b, a])
    np.testing.assert_array_equal(ga.value, b.value)
    np.testing.assert_array_equal(gb.value, a.value)


def test_vjp_foreign_tape_raises():
    t1, t2 = Tape(), Tape()
    x1 = t1.leaf(np.ones(2))
    x2 = t2.leaf(np.ones(2))
    y = sum_all(x1)
    with pytest.raises(TapeError):
        vjp(t1, y, np.asarray(1.0), [x2])
    with pytest.raises(TapeError):
        vjp(t2, y, np.asarray(1.0), [x2])


def test_vjp_cotangent_shape_mismatch_raises():
    t = Tape()
    x = t.leaf(np.ones(3))
    y = relu(x)
    with pytest.raises(ShapeError):
        vjp(t, y, np.ones(4), [x])


def test_grad_requires_scalar():
    t = Tape()
    x = t.leaf(np.ones(3))
    with pytest.raises(ShapeError):
        grad(t, relu(x), [x])


def test_reused_subexpression_accumulates():
    # y = x*x + x*x: adjoint must accumulate both paths
    t = Tape()
    x = t.leaf(np.array([3.0]))
    sq = mul(x, x)
    y = sum_all(add(sq, sq))
    (g,) = grad(t, y, [x])
    np.testing.assert_allclose(g.value, np.array([12.0]), rtol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=1, max_value=5), st.integers(min_value=0, max_value=2 ** 31 - 1))
def test_vjp_scaling_property(n, seed):
    r = np.random.default_rng(seed)
    x0 = r.standard_normal(n)
    u = r.standard_normal(n)
    c = float(r.uniform(-3, 3))
    t = Tape()
    xv = t.leaf(x0)
    y = mul(xv, xv)
    (g1,) = vjp(t, y, u, [xv])
    (g2,) = vjp(t, y, c * u, [xv])
    np.testing.assert_allclose(g2.value, c * g1.value, rtol=1e-9, atol=1e-12)


# -- replay -------------------------------------------------------------------

def test_tape_replay_bitwise():
    t = Tape()
    x = t.leaf(RNG.standard_normal((2, 4, 4)))
    k = t.leaf(RNG.standard_normal((3, 2, 3, 3)))
    b = t.leaf(RNG.standard_normal(3))
    y = conv2d(x, k, b, padding=1)
    h = reshape(relu(y), (48,))
    logits = dense(h, t.leaf(RNG.standard_normal((5, 48))), t.leaf(RNG.standard_normal(5)))
    out = softmax_cross_entropy(logits, 2)
    grad(t, out, [x, k, b])  # extend the tape with backward nodes too
    assert t.replay()


def test_float32_is_preserved():
    t = Tape()
    x = t.leaf(np.ones((2, 2), dtype=np.float32))
    y = mul(x, x)
    assert y.value.dtype == np.float32
