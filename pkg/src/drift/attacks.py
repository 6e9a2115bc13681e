"""White-box, black-box, and adaptive attacks on filtered pipelines.

All attacks work on a single image [C,H,W] or a batch [N,C,H,W]; batch rows
are independent (per-sample seed streams keyed by sample id, so results do
not depend on batching or scheduling). Perturbations start at zero (no
random restart), every iterate is projected onto the norm ball intersected
with the [0,1] pixel box, and non-finite oracle gradients are zeroed and
counted rather than aborting.

Gradient oracles package the threat model: base-only (the defense ignored),
a single fixed filter, or the EoT mixture over sampled filters, optionally
with the backward pass through the filter replaced by identity (BPDA).
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import BudgetError, DomainError
from .models import (
    base_apply, bind_params, filter_forward, filter_forward_np,
    sample_filter_index,
)
from .rng import rng_from
from .tape import Tape, cross_entropy_rows, grad, sum_all

EOT_TAG = 53
SQUARE_TAG = 61


@dataclass
class AttackSpec:
    kind: str = "pgd"
    norm: str = "linf"
    epsilon: float = 4 / 255
    steps: int = 40
    step_size: float = None
    momentum_decay: float = 1.0
    eot_samples: int = 0      # 0 = non-adaptive (oracle chosen by caller)
    bpda_identity: bool = False
    crn: bool = True
    query_budget: int = 5000
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("pgd", "mim", "square"):
            raise DomainError(f"unknown attack kind {self.kind!r}")
        if self.norm not in ("linf", "l2"):
            raise DomainError(f"unknown norm {self.norm!r}")
        if self.epsilon <= 0:
            raise DomainError("epsilon must be positive")
        if self.steps < 1:
            raise DomainError("steps must be at least 1")
        if self.step_size is None:
            self.step_size = self.epsilon / 10
        if self.step_size <= 0:
            raise DomainError("step_size must be positive")


@dataclass
class GradientOracle:
    """Callable (x, y, step) -> (per-sample loss [N], grad [N,...])."""
    kind: str
    fn: object
    _calls: list = field(default_factory=lambda: [0])

    def __call__(self, x, y, step):
        self._calls[0] += 1
        return self.fn(x, y, step, self._calls[0])


def _batchify(x, y=None):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    xb = x[None] if single else x
    if y is None:
        return xb, None, single
    yb = np.atleast_1d(np.asarray(y, dtype=np.int64))
    return xb, yb, single


def _pipeline_loss_grad(model, filt, x, y):
    """Per-sample CE and input gradient through (optional filter) + base."""
    tape = Tape()
    xv = tape.leaf(x)
    z = filter_forward(filt, xv) if filt is not None else xv
    logits = base_apply(bind_params(tape, model.params), z)
    ce = cross_entropy_rows(logits, y)
    (g,) = grad(tape, sum_all(ce), [xv])
    return ce.value.copy(), g.value


def _bpda_loss_grad(model, filt, x, y):
    """Forward through the filter, backward as if it were the identity."""
    u = filter_forward_np(filt, x) if filt is not None else x
    tape = Tape()
    uv = tape.leaf(u)
    logits = base_apply(bind_params(tape, model.params), uv)
    ce = cross_entropy_rows(logits, y)
    (g,) = grad(tape, sum_all(ce), [uv])
    return ce.value.copy(), g.value


def base_oracle(model):
    """Threat model: attacker differentiates the undefended base model."""
    def fn(x, y, step, ncall):
        return _pipeline_loss_grad(model, None, x, y)
    return GradientOracle("base", fn)


def filter_oracle(bank, model, index):
    """Threat model: attacker knows and differentiates one fixed filter."""
    if not 0 <= index < bank.k:
        raise DomainError(f"filter index {index} out of range")
    filt = bank.filters[index]

    def fn(x, y, step, ncall):
        return _pipeline_loss_grad(model, filt, x, y)
    return GradientOracle(f"filter[{index}]", fn)


def _eot_draw_indices(k, seed, sample_ids, step, j, crn, ncall):
    tail = (step, j) if crn else (step, j, ncall)
    return np.array([sample_filter_index(k, [seed, EOT_TAG, int(s), *tail])
                     for s in sample_ids])


def _grouped_grad(bank, model, x, y, idx, bpda):
    loss = np.empty(x.shape[0])
    g = np.empty_like(x)
    for i in range(bank.k):
        sel = idx == i
        if not sel.any():
            continue
        f = bank.filters[i]
        if bpda:
            loss[sel], g[sel] = _bpda_loss_grad(model, f, x[sel], y[sel])
        else:
            loss[sel], g[sel] = _pipeline_loss_grad(model, f, x[sel], y[sel])
    return loss, g


def eot_gradient(bank, model, x, y, K_samples, crn=True, seed=0, step=0,
                 sample_ids=None, bpda=False):
    """Monte-Carlo mean of the defended input gradient over filter draws.

    With crn the draws are a pure function of (seed, sample id, step, draw
    index), so repeated calls at the same point reuse the same filters.
    """
    if K_samples < 1:
        raise DomainError("need at least one EoT sample")
    xb, yb, single = _batchify(x, y)
    ids = np.arange(xb.shape[0]) if sample_ids is None else np.asarray(sample_ids)
    acc = np.zeros_like(xb)
    for j in range(K_samples):
        idx = _eot_draw_indices(bank.k, seed, ids, step, j, crn, 0)
        _, g = _grouped_grad(bank, model, xb, yb, idx, bpda)
        acc += g
    acc /= K_samples
    return acc[0] if single else acc


def bpda_gradient(bank, model, x, y, sampled_filter, surrogate="identity"):
    """Defended gradient with the filter's backward replaced by identity."""
    if surrogate != "identity":
        raise DomainError("only the identity surrogate is supported")
    xb, yb, single = _batchify(x, y)
    filt = bank.filters[sampled_filter] if isinstance(sampled_filter, int) else sampled_filter
    _, g = _bpda_loss_grad(model, filt, xb, yb)
    return g[0] if single else g


def eot_oracle(bank, model, eot_samples, crn=True, seed=0, sample_ids=None,
               bpda=False):
    """Adaptive threat model: EoT mixture gradient, optional BPDA backward."""
    def fn(x, y, step, ncall):
        ids = np.arange(x.shape[0]) if sample_ids is None else sample_ids
        acc = np.zeros_like(x)
        loss_acc = np.zeros(x.shape[0])
        for j in range(eot_samples):
            idx = _eot_draw_indices(bank.k, seed, ids, step, j, crn, ncall)
            loss, g = _grouped_grad(bank, model, x, y, idx, bpda)
            acc += g
            loss_acc += loss
        return loss_acc / eot_samples, acc / eot_samples
    name = f"eot{eot_samples}" + ("+bpda" if bpda else "")
    return GradientOracle(name, fn)


# ---------------------------------------------------------------------------
# First-order attacks
# ---------------------------------------------------------------------------

def _project(delta, x0, spec):
    if spec.norm == "linf":
        delta = np.clip(delta, -spec.epsilon, spec.epsilon)
    else:
        flat = delta.reshape(delta.shape[0], -1)
        norms = np.linalg.norm(flat, axis=1)
        factor = np.minimum(1.0, spec.epsilon / np.maximum(norms, 1e-300))
        delta = delta * factor.reshape(-1, *([1] * (delta.ndim - 1)))
    # the box clip can only shrink coordinates, so the ball constraint holds
    return np.clip(x0 + delta, 0.0, 1.0) - x0


def _check_inputs(x):
    if x.min() < -1e-12 or x.max() > 1 + 1e-12:
        raise DomainError("attack inputs must lie in [0,1]")


def pgd(oracle, x, y, spec, telemetry=None):
    """Projected gradient ascent on the oracle's loss; returns (x_adv, delta)."""
    xb, yb, single = _batchify(x, y)
    _check_inputs(xb)
    x0 = xb.copy()
    delta = np.zeros_like(x0)
    n_bad = 0
    for t in range(spec.steps):
        _, g = oracle(x0 + delta, yb, t)
        bad = ~np.isfinite(g)
        if bad.any():
            n_bad += int(bad.sum())
            g = np.where(bad, 0.0, g)
        if spec.norm == "linf":
            step = spec.step_size * np.sign(g)
        else:
            flat = g.reshape(g.shape[0], -1)
            norms = np.maximum(np.linalg.norm(flat, axis=1), 1e-300)
            step = spec.step_size * g / norms.reshape(-1, *([1] * (g.ndim - 1)))
        delta = _project(delta + step, x0, spec)
    if telemetry is not None:
        telemetry["n_nonfinite"] = telemetry.get("n_nonfinite", 0) + n_bad
    x_adv = x0 + delta
    return (x_adv[0], delta[0]) if single else (x_adv, delta)


def mim(oracle, x, y, spec, telemetry=None):
    """Momentum iterative method; l_inf stepping and projection only."""
    if spec.norm != "linf":
        raise DomainError("mim is defined for the linf norm")
    xb, yb, single = _batchify(x, y)
    _check_inputs(xb)
    x0 = xb.copy()
    delta = np.zeros_like(x0)
    m = np.zeros_like(x0)
    n_bad = 0
    for t in range(spec.steps):
        _, g = oracle(x0 + delta, yb, t)
        bad = ~np.isfinite(g)
        if bad.any():
            n_bad += int(bad.sum())
            g = np.where(bad, 0.0, g)
        flat = np.abs(g).reshape(g.shape[0], -1)
        l1 = np.maximum(flat.sum(axis=1), 1e-300)
        m = spec.momentum_decay * m + g / l1.reshape(-1, *([1] * (g.ndim - 1)))
        delta = _project(delta + spec.step_size * np.sign(m), x0, spec)
    if telemetry is not None:
        telemetry["n_nonfinite"] = telemetry.get("n_nonfinite", 0) + n_bad
    x_adv = x0 + delta
    return (x_adv[0], delta[0]) if single else (x_adv, delta)


# ---------------------------------------------------------------------------
# Square attack (black-box random search)
# ---------------------------------------------------------------------------

SQUARE_SIDE_FRACTIONS = (0.5, 0.25, 0.1, 0.05)
SQUARE_BREAKPOINTS = (0.0, 0.2, 0.5, 0.8)


def _square_side(q_frac, side):
    frac = SQUARE_SIDE_FRACTIONS[0]
    for f, bp in zip(SQUARE_SIDE_FRACTIONS, SQUARE_BREAKPOINTS):
        if q_frac >= bp:
            frac = f
    return max(1, int(round(frac * side)))


def square_attack(score_fn, x, y, spec, sample_ids=None):
    """Greedy random-square search against a (possibly stochastic) score.

    score_fn(x_rows, y_rows, row_seeds) returns the per-row margin
    (true-class logit minus best other); negative margin = misclassified.
    Accepts a proposal only when the margin strictly decreases. Returns
    (x_adv, success flags, queries_used).
    """
    if spec.norm != "linf":
        raise DomainError("square attack is defined for the linf norm")
    xb, yb, single = _batchify(x, y)
    _check_inputs(xb)
    n, c, h, w = xb.shape
    ids = np.arange(n) if sample_ids is None else np.asarray(sample_ids)
    if spec.query_budget < 1:
        empty = np.zeros(n, dtype=bool)
        zq = np.zeros(n, dtype=np.int64)
        return (xb[0], False, 0) if single else (xb.copy(), empty, zq)

    x0 = xb.copy()
    delta = np.zeros_like(x0)
    queries = np.ones(n, dtype=np.int64)
    margins = score_fn(x0, yb, [[spec.seed, SQUARE_TAG, int(s), 0] for s in ids])
    success = margins < 0
    active = ~success

    for q in range(1, spec.query_budget):
        if not active.any():
            break
        side = _square_side(q / spec.query_budget, min(h, w))
        rows = np.flatnonzero(active)
        props = np.empty((rows.size, c, h, w))
        for r, n_i in enumerate(rows):
            rng = rng_from(spec.seed, SQUARE_TAG, ids[n_i], q)
            top = int(rng.integers(0, h - side + 1))
            left = int(rng.integers(0, w - side + 1))
            signs = rng.integers(0, 2, size=c) * 2.0 - 1.0
            d = delta[n_i].copy()
            d[:, top:top + side, left:left + side] = (
                spec.epsilon * signs[:, None, None])
            props[r] = d
        x_prop = np.clip(x0[rows] + props, 0.0, 1.0)
        seeds = [[spec.seed, SQUARE_TAG, int(ids[i]), q] for i in rows]
        m_prop = score_fn(x_prop, yb[rows], seeds)
        queries[rows] += 1
        better = m_prop < margins[rows]
        take = rows[better]
        delta[take] = x_prop[better] - x0[take]
        margins[take] = m_prop[better]
        newly = margins < 0
        success |= newly
        active &= ~newly

    x_adv = np.clip(x0 + delta, 0.0, 1.0)
    if single:
        return x_adv[0], bool(success[0]), int(queries[0])
    return x_adv, success, queries


def base_margin_score(model):
    """Deterministic margin of the undefended base model."""
    def score(x, y, row_seeds):
        logits = model.forward_np(x)
        return _margins(logits, y)
    return score


def ensemble_margin_score(bank, model):
    """Stochastic defended margin: one filter draw per row per query."""
    def score(x, y, row_seeds):
        idx = np.array([sample_filter_index(bank.k, s) for s in row_seeds])
        out = np.empty((x.shape[0], model.k_classes))
        for i in range(bank.k):
            sel = idx == i
            if sel.any():
                out[sel] = model.forward_np(filter_forward_np(bank.filters[i], x[sel]))
        return _margins(out, y)
    return score


def _margins(logits, y):
    n = logits.shape[0]
    true = logits[np.arange(n), y]
    rest = logits.copy()
    rest[np.arange(n), y] = -np.inf
    return true - rest.max(axis=1)


def adaptive_attack(bank, model, x, y, spec, telemetry=None):
    """EoT (optionally BPDA) gradient attack on the defended ensemble."""
    if spec.eot_samples < 1:
        raise DomainError("adaptive attack needs eot_samples >= 1")
    if spec.kind not in ("pgd", "mim"):
        raise DomainError("adaptive attack drives pgd or mim")
    xb, _, single = _batchify(x)
    ids = np.arange(xb.shape[0])
    oracle = eot_oracle(bank, model, spec.eot_samples, crn=spec.crn,
                        seed=spec.seed, sample_ids=ids, bpda=spec.bpda_identity)
    runner = pgd if spec.kind == "pgd" else mim
    x_adv, delta = runner(oracle, xb, np.atleast_1d(y), spec, telemetry=telemetry)
    return (x_adv[0], delta[0]) if single else (x_adv, delta)


def check_budget(delta, spec):
    """Raise unless delta satisfies the spec's ball constraint exactly."""
    d = delta if delta.ndim == 4 else delta[None]
    if spec.norm == "linf":
        worst = np.abs(d).max()
        if worst > spec.epsilon * (1 + 1e-9):
            raise BudgetError(f"linf budget violated: {worst} > {spec.epsilon}")
    else:
        norms = np.linalg.norm(d.reshape(d.shape[0], -1), axis=1)
        if norms.max() > spec.epsilon * (1 + 1e-9):
            raise BudgetError(f"l2 budget violated: {norms.max()} > {spec.epsilon}")
