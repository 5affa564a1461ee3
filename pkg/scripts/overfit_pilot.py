#!/usr/bin/env python3
"""Pilot for the overfit sanity gate: sweep learning rates on the seeded
8-image synthetic corpus and report how fast training Dice crosses 0.95.

Usage: python3 scripts/overfit_pilot.py [--rates 3e-4 1e-3 3e-3]
"""

import argparse
import sys
import tempfile
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from stageseg.data import SynthConfig, synth_generate
from stageseg.network import NetworkConfig
from stageseg.pipeline import TrainConfig, read_curves, train_phase1


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--rates", nargs="+", type=float, default=[3e-4, 1e-3, 3e-3])
    ap.add_argument("--epochs", type=int, default=200)
    args = ap.parse_args()

    root = Path(tempfile.mkdtemp(prefix="pilot_"))
    manifest = synth_generate(root / "corpus", SynthConfig(n=8, extents=(64, 64), seed=0))
    cfg = NetworkConfig(levels=3, stages=2, base_channels=8, dims=2,
                        input_extents=(64, 64), variant="full")

    for lr in args.rates:
        tc = TrainConfig(epochs=args.epochs, batch_size=8, lr=lr, seed=0, val_fraction=0.0)
        run = root / f"lr{lr:g}"
        t0 = time.time()
        train_phase1(cfg, manifest, tc, run_dir=run)
        wall = time.time() - t0
        rows = [r for r in read_curves(run / "curves.csv") if r["split"] == "train"]
        crossed = next((r["epoch"] + 1 for r in rows if r["dice"] >= 0.95), None)
        best = max(r["dice"] for r in rows)
        print(f"lr={lr:g}: best dice {best:.4f}, crossed 0.95 at iter "
              f"{crossed if crossed else '-'}, {wall:.1f}s for {args.epochs} iters")
    return 0


if __name__ == "__main__":
    sys.exit(main())
