"""Command-line surface: train, attack, diagnose, landscape, report.

Every subcommand that needs data rebuilds the eval split from metadata
stored in the checkpoint, so a .dtns file is self-contained. All outputs
land next to their inputs (checkpoint directory or --out).
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .attacks import AttackSpec
from .data import Split, generate_synthetic_dataset
from .diagnostics import (
    consensus, directional_mismatch, gradient_norm_stats, loss_landscape,
    make_eot_ce_loss, probe_variance_study, transfer_matrix,
)
from .dtns import checkpoint_meta, load_checkpoint
from .errors import DivergenceError, DomainError, NonFiniteLoss, StageError
from .harness import (
    attack_label, evaluate_robust_accuracy, load_config, run_experiment,
)

_USER_ERRORS = (DomainError, StageError, DivergenceError, NonFiniteLoss,
                OSError, json.JSONDecodeError)


def _load_for_eval(ckpt_path):
    """Checkpoint plus the eval split it was trained against."""
    bank, model = load_checkpoint(ckpt_path)
    meta = checkpoint_meta(ckpt_path)
    if meta["n_per_class"] < 1:
        raise DomainError(
            "checkpoint carries no dataset metadata; re-save it through "
            "run_experiment or save_checkpoint(..., n_per_class=...)")
    _, eval_split = generate_synthetic_dataset(
        meta["classes"], meta["side"], meta["n_per_class"], meta["data_seed"])
    return bank, model, eval_split


def _write_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=1)
    print(f"wrote {path}")


def cmd_train(args):
    config = load_config(args.config)
    config.out_dir = str(args.out)
    metrics = run_experiment(config)
    print(f"clean accuracy: {metrics.clean_accuracy:.2f}%")
    for name, acc in sorted(metrics.robust_accuracy.items()):
        if name != "none":
            print(f"robust accuracy [{name}]: {acc:.2f}%")
    print(f"artifacts in {config.out_dir}")
    return 0


def cmd_attack(args):
    bank, model, eval_split = _load_for_eval(args.checkpoint)
    spec = AttackSpec(kind=args.attack, norm=args.norm, epsilon=args.eps,
                      steps=args.steps, eot_samples=args.eot,
                      bpda_identity=args.bpda, seed=args.seed)
    out = Path(args.checkpoint).parent / f"attack_{attack_label(spec)}.csv"
    metrics = evaluate_robust_accuracy(bank, model, eval_split, [spec],
                                       inference_seed=args.seed,
                                       csv_path=out)
    label = attack_label(spec)
    print(f"clean accuracy: {metrics.clean_accuracy:.2f}%")
    print(f"robust accuracy [{label}]: {metrics.robust_accuracy[label]:.2f}%")
    print(f"wrote {out}")
    return 0


def cmd_diagnose(args):
    bank, model, eval_split = _load_for_eval(args.checkpoint)
    out_dir = Path(args.checkpoint).parent
    what = args.what
    if what == "consensus":
        report = consensus(bank, model, eval_split, mode="exact")
        report.save_json(out_dir / "consensus_exact.json")
        print(f"mean off-diagonal consensus: {report.mean_off_diagonal():.6f}")
        print(f"wrote {out_dir / 'consensus_exact.json'}")
    elif what == "mismatch":
        sub = Split(eval_split.x[:16], eval_split.y[:16], eval_split.ids[:16])
        stats = directional_mismatch(bank, model, sub, eot_k=128)
        stats.save_json(out_dir / "mismatch.json")
        for eta, row in sorted(stats.per_eta.items()):
            print(f"eta={eta:g}: median mismatch {row['median']:.6f}")
        print(f"wrote {out_dir / 'mismatch.json'}")
    elif what == "transfer":
        spec = AttackSpec(kind="pgd", norm="linf", epsilon=8 / 255, steps=10)
        mat = transfer_matrix(bank, model, eval_split, spec)
        np.savetxt(out_dir / "transfer.csv", mat, delimiter=",", fmt="%.6f")
        off = mat[~np.eye(bank.k, dtype=bool)].mean()
        diag = np.diag(mat).mean()
        print(f"accuracy under transfer: diag {diag:.2f}%, off-diag {off:.2f}%")
        print(f"wrote {out_dir / 'transfer.csv'}")
    elif what == "probes":
        rows = probe_variance_study(bank, eval_split.x[:4], trials=60)
        _write_json(rows, out_dir / "probes.json")
        for row in rows:
            print(f"P={row['P']}: variance {row['variance']:.3e}")
    else:
        stats = gradient_norm_stats(bank, model, eval_split, eot_k=32)
        _write_json(stats, out_dir / "gradnorm.json")
        print(f"median EoT gradient norm: {stats['median']:.6f}")
    return 0


def cmd_landscape(args):
    bank, model, eval_split = _load_for_eval(args.checkpoint)
    fn = make_eot_ce_loss(bank, model, eval_split.y[0],
                          sample_id=int(eval_split.ids[0]), eot_k=args.eot)
    grid = loss_landscape(fn, eval_split.x[0], tau=args.tau,
                          grid_n=args.grid, eot_k=args.eot)
    out = Path(args.checkpoint).parent / "landscape.csv"
    grid.save_csv(out)
    v = grid.grid
    print(f"loss range over the plane: [{v.min():.6f}, {v.max():.6f}]")
    print(f"wrote {out}")
    return 0


def cmd_report(args):
    run = Path(args.dir)
    rows = []

    def row(key, value):
        rows.append((key, value))

    manifest_path = run / "manifest.json"
    if manifest_path.exists():
        with open(manifest_path) as fh:
            manifest = json.load(fh)
        row("experiment", manifest.get("experiment_id", "?"))
        row("status", manifest.get("status", "?"))
    metrics_path = run / "metrics.json"
    if metrics_path.exists():
        with open(metrics_path) as fh:
            metrics = json.load(fh)
        row("seed", metrics["seed"])
        row("clean accuracy (%)", f"{metrics['clean_accuracy']:.2f}")
        for name, acc in sorted(metrics["robust_accuracy"].items()):
            if name != "none":
                row(f"robust (%) {name}", f"{acc:.2f}")
        gamma = metrics.get("consensus_mean_offdiag")
        if gamma is not None:
            row("mean off-diagonal consensus", f"{gamma:.6f}")
        for stage, secs in sorted(metrics.get("timings", {}).items()):
            row(f"time (s) {stage}", f"{secs:.2f}")
    attacks_path = run / "attacks.csv"
    if attacks_path.exists():
        n_rows = sum(1 for _ in open(attacks_path)) - 1
        row("attack rows", n_rows)
    extra = sorted(p.name for p in run.iterdir()
                   if p.suffix in (".json", ".csv")
                   and p.name not in ("metrics.json", "manifest.json",
                                      "attacks.csv"))
    if extra:
        row("other artifacts", ", ".join(extra))
    if not rows:
        raise DomainError(f"no run artifacts found under {run}")
    width = max(34, max(len(k) for k, _ in rows) + 2)
    print("\n".join(f"{k:<{width}}{v}" for k, v in rows))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="drift",
        description="Train, attack, and diagnose filter-ensemble defenses.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the full experiment pipeline")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("attack", help="evaluate one attack on a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--attack", required=True, choices=("pgd", "mim", "square"))
    p.add_argument("--norm", default="linf", choices=("linf", "l2"))
    p.add_argument("--eps", type=float, default=8 / 255)
    p.add_argument("--steps", type=int, default=40)
    p.add_argument("--eot", type=int, default=0)
    p.add_argument("--bpda", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_attack)

    p = sub.add_parser("diagnose", help="run one diagnostic on a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--what", required=True,
                   choices=("consensus", "mismatch", "transfer", "probes",
                            "gradnorm"))
    p.set_defaults(fn=cmd_diagnose)

    p = sub.add_parser("landscape", help="loss surface over a random plane")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tau", type=float, default=3 / 255)
    p.add_argument("--grid", type=int, default=41)
    p.add_argument("--eot", type=int, default=128)
    p.set_defaults(fn=cmd_landscape)

    p = sub.add_parser("report", help="summarize a finished run directory")
    p.add_argument("--dir", required=True)
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except _USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
