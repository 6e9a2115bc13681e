"""Frozen base classifier and the bank of dimension-preserving filters.

The base model M is a small conv-relu-conv-relu-flatten-dense network that is
pretrained once and then frozen (its arrays are made read-only and a checksum
is pinned). Filters are tiny shape-preserving nets placed in front of M; the
res_block variant initializes to the exact identity so the ensemble starts
at the base model's clean accuracy.

Every forward exists in two forms: a taped one (records on a Tape, used
wherever gradients are needed) and a tape-free numpy one for inference and
attack inner loops. Both call the same forward kernels, so their outputs are
bitwise identical.
"""

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError, DomainError, ShapeError
from .rng import rng_from
from .tape import Tape, Var, add, conv2d, cross_entropy_rows, dense, grad
from .tape import mean_all, relu, reshape
from .tape import _FORWARD

_np_conv = _FORWARD["conv2d"]

FILTER_ARCHS = ("single_conv", "res_block", "deep_conv")


def np_conv2d(x, kernel, bias, padding):
    """Tape-free conv forward; same kernel as the taped op, so bitwise equal."""
    single = x.ndim == 3
    xb = x[None] if single else x
    y = _np_conv([xb, kernel], int(padding))
    y = y + np.broadcast_to(bias[None, :, None, None], y.shape)
    return y[0] if single else y


def np_dense(x, w, b):
    single = x.ndim == 1
    xb = x[None] if single else x
    y = xb @ np.ascontiguousarray(w.T) + np.broadcast_to(b, (xb.shape[0], b.shape[0]))
    return y[0] if single else y


def param_checksum(params):
    """Order-independent digest of a name->array mapping."""
    h = hashlib.sha256()
    for name in sorted(params):
        arr = params[name]
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(str(arr.dtype).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def bind_params(tape, params):
    """Record each parameter as a leaf; returns name -> Var."""
    return {name: tape.leaf(params[name]) for name in sorted(params)}


# ---------------------------------------------------------------------------
# Base classifier
# ---------------------------------------------------------------------------

class BaseClassifier:
    """conv(3->c1) relu conv(c1->c2) relu flatten dense(K_classes)."""

    def __init__(self, image_shape, k_classes, params, seed, channels):
        self.image_shape = tuple(image_shape)
        self.k_classes = int(k_classes)
        self.params = params
        self.seed = int(seed)
        self.channels = tuple(channels)
        self.frozen = False
        self.frozen_checksum = None

    def checksum(self):
        return param_checksum(self.params)

    def freeze(self):
        for arr in self.params.values():
            arr.flags.writeable = False
        self.frozen = True
        self.frozen_checksum = self.checksum()
        return self

    def forward_np(self, x):
        p = self.params
        h = np.maximum(np_conv2d(x, p["conv1_w"], p["conv1_b"], 1), 0.0)
        h = np.maximum(np_conv2d(h, p["conv2_w"], p["conv2_b"], 1), 0.0)
        flat = h.reshape(-1) if x.ndim == 3 else h.reshape(h.shape[0], -1)
        return np_dense(flat, p["fc_w"], p["fc_b"])


def base_apply(pvars, x):
    """Taped base forward; x is a Var [C,H,W] or [N,C,H,W]."""
    h = relu(conv2d(x, pvars["conv1_w"], pvars["conv1_b"], 1))
    h = relu(conv2d(h, pvars["conv2_w"], pvars["conv2_b"], 1))
    if h.value.ndim == 3:
        flat = reshape(h, (h.value.size,))
    else:
        flat = reshape(h, (h.value.shape[0], int(np.prod(h.value.shape[1:]))))
    return dense(flat, pvars["fc_w"], pvars["fc_b"])


def build_base_model(image_shape, K_classes, seed, channels=(16, 32)):
    """Randomly initialized (unfrozen) classifier, deterministic per seed."""
    image_shape = tuple(int(s) for s in image_shape)
    if len(image_shape) != 3 or any(s < 1 for s in image_shape):
        raise DomainError(f"degenerate image shape {image_shape}")
    c, h, w = image_shape
    if K_classes < 2:
        raise DomainError("need at least 2 classes")
    c1, c2 = channels
    rng = rng_from(seed, 11)

    def he(shape, fan_in):
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)

    params = {
        "conv1_w": he((c1, c, 3, 3), c * 9),
        "conv1_b": np.zeros(c1),
        "conv2_w": he((c2, c1, 3, 3), c1 * 9),
        "conv2_b": np.zeros(c2),
        "fc_w": he((K_classes, c2 * h * w), c2 * h * w),
        "fc_b": np.zeros(K_classes),
    }
    return BaseClassifier(image_shape, K_classes, params, seed, channels)


def pretrain_and_freeze(model, dataset, epochs, lr, batch_size=100):
    """Train by plain cross-entropy (Adam), then freeze.

    dataset is (X [N,C,H,W], y [N]). With epochs=0 the parameters are left
    untouched and the model is frozen as-is.
    """
    x_all, y_all = dataset
    x_all = np.asarray(x_all, dtype=np.float64)
    y_all = np.asarray(y_all, dtype=np.int64)
    n = x_all.shape[0]
    if n == 0:
        raise DomainError("empty pretraining dataset")

    rng = rng_from(model.seed, 101)
    names = sorted(model.params)
    m_state = {k: np.zeros_like(model.params[k]) for k in names}
    v_state = {k: np.zeros_like(model.params[k]) for k in names}
    step = 0
    b1, b2, eps = 0.9, 0.999, 1e-8

    for _ in range(int(epochs)):
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = perm[start:start + batch_size]
            tape = Tape()
            pv = bind_params(tape, model.params)
            logits = base_apply(pv, tape.leaf(x_all[idx]))
            loss = mean_all(cross_entropy_rows(logits, y_all[idx]))
            if not np.isfinite(loss.value):
                raise DivergenceError("non-finite pretraining loss")
            gs = grad(tape, loss, [pv[k] for k in names])
            step += 1
            for k, g in zip(names, gs):
                gv = np.nan_to_num(g.value, nan=0.0, posinf=0.0, neginf=0.0)
                m_state[k] = b1 * m_state[k] + (1 - b1) * gv
                v_state[k] = b2 * v_state[k] + (1 - b2) * gv * gv
                mhat = m_state[k] / (1 - b1 ** step)
                vhat = v_state[k] / (1 - b2 ** step)
                model.params[k] = model.params[k] - lr * mhat / (np.sqrt(vhat) + eps)
    return model.freeze()


# ---------------------------------------------------------------------------
# Filters
# ---------------------------------------------------------------------------

@dataclass
class FilterArch:
    """Shape-preserving filter family; hidden width only used by res_block."""
    name: str = "res_block"
    hidden: int = 16

    def __post_init__(self):
        if self.name not in FILTER_ARCHS:
            raise DomainError(f"unknown filter arch {self.name!r}")


@dataclass
class Filter:
    arch: FilterArch
    params: dict = field(default_factory=dict)

    def checksum(self):
        return param_checksum(self.params)


def _delta_kernel(channels):
    k = np.zeros((channels, channels, 3, 3))
    for c in range(channels):
        k[c, c, 1, 1] = 1.0
    return k


def init_filter_identity(arch, seed, channels=3):
    """Filter that starts as the identity map (exactly for res_block).

    res_block zeroes its second conv, so f(x) == x bitwise. The other archs
    have no skip; they start at a delta kernel plus small zero-mean noise,
    which is the identity up to that noise (and exactly preserves
    nonnegative inputs through the ReLU).
    """
    if not isinstance(arch, FilterArch):
        arch = FilterArch(arch)
    rng = rng_from(seed, 23)

    def noise(shape, fan_in):
        a = 0.1 / np.sqrt(fan_in)
        return rng.uniform(-a, a, size=shape)

    c = channels
    if arch.name == "res_block":
        h = arch.hidden
        params = {
            "w1": noise((h, c, 3, 3), c * 9),
            "b1": np.zeros(h),
            "w2": np.zeros((c, h, 3, 3)),
            "b2": np.zeros(c),
        }
    elif arch.name == "single_conv":
        params = {
            "w1": _delta_kernel(c) + noise((c, c, 3, 3), c * 9),
            "b1": np.zeros(c),
        }
    else:  # deep_conv
        params = {}
        for i in range(1, 5):
            params[f"w{i}"] = _delta_kernel(c) + noise((c, c, 3, 3), c * 9)
            params[f"b{i}"] = np.zeros(c)
    return Filter(arch, params)


def filter_apply(arch, pvars, x):
    """Taped filter forward on Var x."""
    if arch.name == "res_block":
        h = relu(conv2d(x, pvars["w1"], pvars["b1"], 1))
        return add(x, conv2d(h, pvars["w2"], pvars["b2"], 1))
    if arch.name == "single_conv":
        return relu(conv2d(x, pvars["w1"], pvars["b1"], 1))
    h = x
    for i in range(1, 5):
        h = relu(conv2d(h, pvars[f"w{i}"], pvars[f"b{i}"], 1))
    return h


def filter_forward(filt, x, pvars=None):
    """Apply one filter to a taped Var; binds params fresh unless given."""
    if not isinstance(x, Var):
        raise ShapeError("filter_forward expects a taped Var; use filter_forward_np for arrays")
    if pvars is None:
        pvars = bind_params(x.tape, filt.params)
    return filter_apply(filt.arch, pvars, x)


def filter_forward_np(filt, x):
    p = filt.params
    if filt.arch.name == "res_block":
        h = np.maximum(np_conv2d(x, p["w1"], p["b1"], 1), 0.0)
        return x + np_conv2d(h, p["w2"], p["b2"], 1)
    if filt.arch.name == "single_conv":
        return np.maximum(np_conv2d(x, p["w1"], p["b1"], 1), 0.0)
    h = x
    for i in range(1, 5):
        h = np.maximum(np_conv2d(h, p[f"w{i}"], p[f"b{i}"], 1), 0.0)
    return h


def filter_param_count(filt):
    return sum(a.size for a in filt.params.values())


@dataclass
class FilterBank:
    filters: list
    seed: int = 0

    @property
    def k(self):
        return len(self.filters)

    def checksum(self):
        h = hashlib.sha256()
        for f in self.filters:
            h.update(f.checksum().encode())
        return h.hexdigest()


def build_filter_bank(arch, K, seed, channels=3):
    """K identity-initialized filters with per-filter seed streams."""
    if K < 1:
        raise DomainError("bank needs at least one filter")
    if not isinstance(arch, FilterArch):
        arch = FilterArch(arch)
    filters = [init_filter_identity(arch, [seed, i], channels) for i in range(K)]
    return FilterBank(filters, seed=int(seed))


def sample_filter_index(k, seed):
    """One inference-time draw, uniform over the K trained filters."""
    return int(rng_from(seed).integers(0, k))


def ensemble_forward(bank, model, x, mode="identity"):
    """Forward through one selected path then M (tape-free).

    mode: "identity" | ("index", i) | ("sample", seed). Sample mode draws
    uniformly over the K trained filters; the identity path never takes
    part in inference sampling. Batched x draws one filter per sample.
    """
    x = np.asarray(x, dtype=np.float64)
    if mode == "identity":
        return model.forward_np(x)
    kind, arg = mode
    if kind == "index":
        i = int(arg)
        if not 0 <= i < bank.k:
            raise DomainError(f"filter index {i} out of range for K={bank.k}")
        return model.forward_np(filter_forward_np(bank.filters[i], x))
    if kind == "sample":
        if x.ndim == 3:
            i = sample_filter_index(bank.k, arg)
            return model.forward_np(filter_forward_np(bank.filters[i], x))
        idx = rng_from(arg).integers(0, bank.k, size=x.shape[0])
        out = np.empty((x.shape[0], model.k_classes))
        for i in range(bank.k):
            sel = idx == i
            if sel.any():
                out[sel] = model.forward_np(filter_forward_np(bank.filters[i], x[sel]))
        return out
    raise DomainError(f"unknown ensemble_forward mode {mode!r}")
