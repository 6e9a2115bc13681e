"""Seeding discipline: every stream is a pure function of integer tags.

Streams are derived as default_rng([seed, tag, tag, ...]) so that adding or
reordering unrelated draws never perturbs an existing stream, and per-sample
or per-step streams can be reconstructed from their coordinates alone.
"""

import numpy as np


def seed_seq(*parts):
    out = []
    for p in parts:
        if isinstance(p, (list, tuple, np.ndarray)):
            out.extend(int(q) for q in p)
        else:
            out.append(int(p))
    return out


def rng_from(*parts):
    return np.random.default_rng(seed_seq(*parts))
