#!/usr/bin/env python3
"""Pilot for the hybrid gate: train phase 1 + phase 2 on the 12-volume
synthetic corpus and compare held-out Dice of the gated pair against the
slice-only baseline.

Usage: python3 scripts/hybrid_pilot.py [--epochs1 40 --epochs2 15]
"""

import argparse
import sys
import tempfile
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

import torch

from stageseg.data import SynthConfig, load_pair, synth_generate
from stageseg.metrics import evaluate_pair
from stageseg.network import NetworkConfig
from stageseg.pipeline import (HybridConfig, TrainConfig, predict,
                               predict_volume_slicewise, train_phase1, train_phase2)


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--epochs1", type=int, default=40)
    ap.add_argument("--epochs2", type=int, default=15)
    ap.add_argument("--lr1", type=float, default=1e-3)
    ap.add_argument("--lr2", type=float, default=3e-4)
    ap.add_argument("--batch1", type=int, default=16)
    ap.add_argument("--batch2", type=int, default=2)
    args = ap.parse_args()

    root = Path(tempfile.mkdtemp(prefix="hybrid_"))
    manifest = synth_generate(root / "corpus",
                              SynthConfig(n=12, extents=(8, 64, 64), seed=0))
    held_out = {"case009", "case010", "case011"}
    train_samples = [s for s in manifest.samples if s.subject not in held_out]
    test_samples = [s for s in manifest.samples if s.subject in held_out]

    cfg2d = NetworkConfig(levels=3, stages=2, base_channels=8, dims=2,
                          input_extents=(64, 64), variant="full")
    cfg3d = NetworkConfig(levels=2, stages=2, base_channels=8, dims=3,
                          input_extents=(8, 64, 64), variant="full")
    hybrid = HybridConfig(cfg2d=cfg2d, cfg3d=cfg3d)

    t0 = time.time()
    ck1 = train_phase1(cfg2d, manifest,
                       TrainConfig(epochs=args.epochs1, lr=args.lr1,
                                   batch_size=args.batch1,
                                   seed=0, val_fraction=0.1, early_stop_dice=0.97),
                       samples=train_samples)
    t1 = time.time()
    print(f"phase1: {t1 - t0:.0f}s, best {ck1.meta['best_metric']:.4f} at epoch {ck1.epoch}")

    c2, c3 = train_phase2(ck1, hybrid, manifest,
                          TrainConfig(epochs=args.epochs2, lr=args.lr2,
                                      batch_size=args.batch2,
                                      seed=0, val_fraction=0.1),
                          samples=train_samples)
    t2 = time.time()
    print(f"phase2: {t2 - t1:.0f}s, best {c3.meta['best_metric']:.4f} at epoch {c3.epoch}")

    m2d_base = ck1.build_model()
    pair = (c2.build_model(), c3.build_model())
    base_scores, hybrid_scores = [], []
    for s in test_samples:
        img, gt = load_pair(s, cfg3d.input_extents, depth=8)
        gt_np = gt[0].numpy() > 0.5
        base = predict_volume_slicewise(m2d_base, img)
        hyb = predict(pair, img)
        base_scores.append(evaluate_pair(base.mask.numpy(), gt_np)["dice"])
        hybrid_scores.append(evaluate_pair(hyb.mask.numpy(), gt_np)["dice"])
    b = sum(base_scores) / len(base_scores)
    h = sum(hybrid_scores) / len(hybrid_scores)
    print(f"held-out dice: 2D-only {b:.4f} vs hybrid {h:.4f} (margin {h - b:+.4f})")
    print(f"total wall: {time.time() - t0:.0f}s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
