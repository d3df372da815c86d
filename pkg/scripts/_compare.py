"""Shared driver for the two directional comparison scripts."""
from __future__ import annotations

import argparse
import csv
import dataclasses
from pathlib import Path

from stablequant.config import ExperimentConfig
from stablequant.experiments import compare_architectures, summarize
from stablequant.stability import comparison_csv


def parser(description: str, default_archs: tuple[str, str]) -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(description=description)
    ap.add_argument("--archs", nargs=2, default=list(default_archs), metavar=("NONSYM", "SYM"))
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--epochs", type=int, default=None, help="override the layout's epoch count")
    ap.add_argument("--bits-a", type=int, default=4, help="activation bits for the paired trace")
    ap.add_argument("--out", type=Path, required=True)
    return ap


def run(base: ExperimentConfig, args) -> dict:
    if args.epochs is not None:
        base = dataclasses.replace(base, epochs=args.epochs)
    archs = tuple(args.archs)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "config.txt").write_text(base.to_text())

    def progress(r):
        print(f"seed {r.seed} {r.arch}: acc {r.accuracy:.3f} final mse {r.report.final:.4g} "
              f"({r.seconds:.0f}s)", flush=True)

    rows = compare_architectures(base, archs, seeds=tuple(args.seeds), bits_a=args.bits_a,
                                 progress=progress)
    for r in rows:
        seed = r[archs[0]].seed
        (args.out / f"layers_seed{seed}.csv").write_text(
            comparison_csv(r[archs[0]].report, r[archs[1]].report))
    with open(args.out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", f"acc_{archs[0]}", f"acc_{archs[1]}", f"final_{archs[0]}", f"final_{archs[1]}"])
        for r in rows:
            a, b = r[archs[0]], r[archs[1]]
            w.writerow([a.seed, a.accuracy, b.accuracy, a.report.final, b.report.final])
    s = summarize(rows, archs)
    print(f"median final mse {archs[0]} {s['median_' + archs[0]]:.4g}, {archs[1]} "
          f"{s['median_' + archs[1]]:.4g}; {archs[1]} lower in {s['wins']}/{len(rows)} seeds; "
          f"max accuracy gap {s['max_acc_gap']:.3f}")
    return s
