"""Obfuscated-gradient forensics: does the analytic EoT gradient match
what finite differences see on the same randomized surface?

Common random numbers matter here. Both the gradient and the two-sided
loss evaluations reuse the same filter draws per sample, so the
comparison isolates geometry from sampling noise. A healthy defense
shows small mismatch; shattered or vanishing gradients would not.
"""

import numpy as np

from drift.data import Split, generate_synthetic_dataset
from drift.diagnostics import (
    directional_mismatch, gradient_norm_stats, loss_landscape, make_eot_ce_loss,
)
from drift.models import build_base_model, build_filter_bank, pretrain_and_freeze
from drift.rng import rng_from

train, evl = generate_synthetic_dataset(classes=4, side=8, n_per_class=12, seed=4)
model = build_base_model((3, 8, 8), 4, seed=4, channels=(8, 16))
model = pretrain_and_freeze(model, (train.x, train.y), epochs=12, lr=1e-3)
bank = build_filter_bank("res_block", K=3, seed=4)
for i, f in enumerate(bank.filters):
    f.params["w2"] += rng_from(5, i).normal(0.0, 0.03, size=f.params["w2"].shape)

sub = Split(evl.x[:8], evl.y[:8], evl.ids[:8])
stats = directional_mismatch(bank, model, sub, etas=(1e-2, 1e-3, 1e-4),
                             n_dirs=6, eot_k=64, seed=0)
print("directional mismatch |<v,g> - (L+ - L-)/(2 eta)|:")
for eta in sorted(stats.per_eta):
    row = stats.per_eta[eta]
    print(f"  eta={eta:g}: median {row['median']:.2e}  p95 {row['p95']:.2e}")

norms = gradient_norm_stats(bank, model, sub, eot_k=64, seed=0)
print(f"EoT gradient norms: median {norms['median']:.4f} "
      f"(p05 {norms['p05']:.4f}, p95 {norms['p95']:.4f})")

# A small loss surface around one input, over a random 2D plane. The
# same grid code draws the paper-style figure at tau=3/255, 41x41.
fn = make_eot_ce_loss(bank, model, evl.y[0], sample_id=int(evl.ids[0]),
                      eot_k=64, seed=0)
grid = loss_landscape(fn, evl.x[0], tau=4 / 255, grid_n=9, dir_seed=0, eot_k=64)
center = grid.grid[4, 4]
print(f"\nloss at center {center:.4f}; grid range "
      f"[{grid.grid.min():.4f}, {grid.grid.max():.4f}]")
print("surface (rows = direction u, cols = direction v):")
print(np.array2string(grid.grid, precision=3))
