#!/usr/bin/env python3
"""Run the desk-scale learning experiment and print/save its summary.

    python3 scripts/desk_experiment.py --out results/desk.json --cache runs/desk

Trains subject-specific and mixed-sampling embeddings on the synthetic corpus,
calibrates them and a random initialisation on the held-out subjects, and
reports test angular error and embedding geometry per condition.
"""
import argparse
import json
import logging
from dataclasses import asdict
from pathlib import Path

from freegaze.experiment import ExperimentConfig, run_experiment


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--epochs", type=int, help="pretraining epochs (default from ExperimentConfig)")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--cache", help="directory for (re)using pretrained checkpoints")
    p.add_argument("--out", help="write a JSON summary here")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = ExperimentConfig(seed=args.seed)
    if args.epochs is not None:
        cfg.epochs = args.epochs
    r = run_experiment(cfg, checkpoint_dir=args.cache)

    print(f"{'condition':<18}{'test deg':>10}{'cross-subj':>12}{'cross-gaze':>12}{'ratio':>8}")
    for cond, err in r.test_error.items():
        cs, cg = r.geometry[cond]
        print(f"{cond:<18}{err:>10.3f}{cs:>12.4f}{cg:>12.4f}{cs / cg:>8.3f}")
    print(f"total {r.seconds / 60:.1f} min")

    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        summary = {
            "config": asdict(cfg),
            "test_error_deg": r.test_error,
            "per_subject_deg": r.per_subject,
            "geometry": {c: {"cross_subject": g[0], "cross_gaze": g[1]} for c, g in r.geometry.items()},
            "seconds": r.seconds,
        }
        out.write_text(json.dumps(summary, indent=2, default=str) + "\n", encoding="utf-8")


if __name__ == "__main__":
    main()
