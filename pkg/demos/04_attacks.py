"""The attack suite: white-box PGD/MIM on the undefended model, the
black-box square attack on the defended ensemble, and the adaptive
EoT attack that differentiates through the random filter choice.

Also shows the two contract properties every attack obeys: the
perturbation stays inside the budget exactly, and outputs stay in [0,1].
"""

import numpy as np

from drift.attacks import (
    AttackSpec, adaptive_attack, base_oracle, ensemble_margin_score, mim, pgd,
    square_attack,
)
from drift.data import generate_synthetic_dataset
from drift.harness import stochastic_predict
from drift.models import build_base_model, build_filter_bank, pretrain_and_freeze

train, evl = generate_synthetic_dataset(classes=4, side=8, n_per_class=16, seed=2)
model = build_base_model((3, 8, 8), 4, seed=2, channels=(8, 16))
model = pretrain_and_freeze(model, (train.x, train.y), epochs=15, lr=1e-3)
bank = build_filter_bank("res_block", K=3, seed=2)
x, y, ids = evl.x, evl.y, evl.ids


def accuracy(x_try):
    preds, _ = stochastic_predict(bank, model, x_try, ids, seed=0)
    return 100 * float(np.mean(preds == y))


print(f"clean accuracy: {accuracy(x):.1f}%")

oracle = base_oracle(model)
for eps in (1 / 255, 2 / 255, 4 / 255, 8 / 255):
    spec = AttackSpec(kind="pgd", norm="linf", epsilon=eps, steps=20, seed=0)
    x_adv, _ = pgd(oracle, x, y, spec)
    assert np.abs(x_adv - x).max() <= eps + 1e-12
    assert x_adv.min() >= 0.0 and x_adv.max() <= 1.0
    print(f"pgd  linf eps={eps:.4f}: accuracy {accuracy(x_adv):5.1f}%")

spec = AttackSpec(kind="mim", norm="linf", epsilon=8 / 255, steps=20,
                  momentum_decay=1.0, seed=0)
x_adv, _ = mim(oracle, x, y, spec)
print(f"mim  linf eps=8/255:  accuracy {accuracy(x_adv):5.1f}%")

spec = AttackSpec(kind="square", norm="linf", epsilon=8 / 255, steps=1,
                  query_budget=300, seed=0)
x_adv, success, queries = square_attack(ensemble_margin_score(bank, model),
                                        x, y, spec, sample_ids=ids)
print(f"square (300 queries): accuracy {accuracy(x_adv):5.1f}%, "
      f"median queries used {int(np.median(queries))}")

# The adaptive attacker averages gradients over the filter draw (EoT).
for eot in (5, 10):
    spec = AttackSpec(kind="pgd", norm="linf", epsilon=8 / 255, steps=20,
                      eot_samples=eot, seed=0)
    x_adv, _ = adaptive_attack(bank, model, x, y, spec)
    print(f"adaptive pgd eot={eot:>2}:  accuracy {accuracy(x_adv):5.1f}%")
