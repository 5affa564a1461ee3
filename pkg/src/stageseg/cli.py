"""Command-line surface: training, evaluation, prediction, ablation sweeps,
parameter audits, plots, and synthetic-corpus generation.

Configs are flat ``key=value`` text files with dotted namespaces, e.g.::

    network.levels=3
    network.input_extents=64,64
    train.epochs=40
    data.root=runs/corpus

Overrides stack as: built-in defaults < ``--desk`` profile < ``--config``
file < ``--set key=value``. Every command writes the effective configuration
to ``<out>/config.snapshot`` before doing any work, so a run can be replayed
exactly. Exit codes: 0 success, 2 usage error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import re
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import (
    DatasetManifest,
    SynthConfig,
    load_manifest,
    make_folds,
    preprocess,
    read_image,
    read_mask,
    read_volume,
    synth_generate,
    write_mask,
    write_volume,
)
from .errors import ConfigError, StagesegError, TrainingDiverged
from .losses import LossConfig
from .metrics import rank_sum_test
from .network import (
    VARIANT_FLAGS,
    NetworkConfig,
    build,
    count_parameters,
    per_module_breakdown,
)
from .pipeline import (
    Checkpoint,
    HybridConfig,
    TrainConfig,
    evaluate,
    predict,
    read_curves,
    train_phase1,
    train_phase2,
    train_volume,
)

# published totals (millions) for the reference table, keyed by (dims, levels, stages)
PUBLISHED_PARAMS_M = {
    (2, 2, 2): 0.37, (2, 3, 2): 1.60, (2, 4, 2): 6.70, (2, 5, 2): 27.0,
    (3, 2, 2): 1.1, (3, 3, 2): 4.6, (3, 4, 2): 19.0,
}

DESK_PROFILE = {
    "network.levels": 3,
    "network.stages": 2,
    "network.base_channels": 8,
    "network.input_extents": (64, 64),
    "network3d.levels": 2,
    "network3d.stages": 2,
    "network3d.base_channels": 8,
    "network3d.dims": 3,
    "network3d.input_extents": (8, 64, 64),
    "train.epochs": 40,
    "train.batch_size": 16,
    "train.lr": 1e-3,
    "synth.n": 12,
    "synth.extents": (64, 64),
}

# sections whose keys do not come from a dataclass
EXTRA_KEYS = {
    "train.mode": ("2d", "3d", "hybrid"),
    "train.init2d": None,
    "train.batch3d": None,
    "data.root": None,
    "data.dims": None,
    "data.folds": None,
    "data.task": None,
    "data.num_classes": None,
    "hybrid.lambda2d": None,
    "hybrid.finetune2d": None,
    "predict.checkpoint": None,
    "predict.checkpoint3d": None,
    "predict.input": None,
    "predict.mask": None,
    "predict.threshold": None,
    "plot.run": None,
    "plot.image": None,
    "plot.pred": None,
    "plot.gt": None,
    "ablate.variants": None,
    "ablate.levels": None,
    "ablate.stages": None,
    "params.levels": None,
    "params.stages": None,
    "params.dims": None,
    "params.breakdown": None,
}

_DATACLASS_SECTIONS = {
    "network": NetworkConfig,
    "network3d": NetworkConfig,
    "train": TrainConfig,
    "loss": LossConfig,
    "synth": SynthConfig,
}


class UsageError(Exception):
    """Bad invocation: unknown key, missing required setting, malformed value."""


def _parse_value(text: str) -> Any:
    text = text.strip()
    if "," in text:
        return tuple(_parse_value(part) for part in text.split(","))
    lowered = text.lower()
    if lowered in ("none", "null"):
        return None
    if lowered == "true":
        return True
    if lowered == "false":
        return False
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text


def _check_key(key: str) -> None:
    if key in EXTRA_KEYS:
        return
    section, _, name = key.partition(".")
    cls = _DATACLASS_SECTIONS.get(section)
    if cls is not None:
        allowed = {f.name for f in fields(cls)}
        allowed.discard("loss")  # nested: spelled loss.<field>
        if name in allowed:
            return
        raise UsageError(f"unknown key '{key}' (section '{section}' accepts: "
                         f"{', '.join(sorted(allowed))})")
    raise UsageError(f"unknown key '{key}'")


def parse_config_file(path: Path) -> Dict[str, Any]:
    if not path.exists():
        raise UsageError(f"config file not found: {path}")
    out: Dict[str, Any] = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got '{raw.strip()}'")
        key, value = line.split("=", 1)
        key = key.strip()
        _check_key(key)
        out[key] = _parse_value(value)
    return out


@dataclass
class RunSpec:
    """One CLI invocation, resolved."""

    command: str
    settings: Dict[str, Any] = field(default_factory=dict)
    out: Optional[Path] = None
    seed: Optional[int] = None

    def get(self, key: str, default: Any = None) -> Any:
        return self.settings.get(key, default)

    def require(self, key: str) -> Any:
        if key not in self.settings:
            raise UsageError(f"missing required setting '{key}' "
                             f"(pass --set {key}=... or put it in --config)")
        return self.settings[key]

    def out_dir(self) -> Path:
        if self.out is None:
            raise UsageError("this command needs --out")
        self.out.mkdir(parents=True, exist_ok=True)
        return self.out

    def snapshot(self, directory: Path) -> Path:
        lines = [f"# command: {self.command}"]
        for key in sorted(self.settings):
            value = self.settings[key]
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            lines.append(f"{key}={value}")
        path = directory / "config.snapshot"
        path.write_text("\n".join(lines) + "\n")
        return path


def resolve_spec(args: argparse.Namespace) -> RunSpec:
    settings: Dict[str, Any] = {}
    if args.desk:
        settings.update(DESK_PROFILE)
    if args.config:
        settings.update(parse_config_file(Path(args.config)))
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got '{item}'")
        key, value = item.split("=", 1)
        key = key.strip()
        _check_key(key)
        settings[key] = _parse_value(value)
    if args.seed is not None:
        settings["train.seed"] = args.seed
        settings["synth.seed"] = args.seed
    return RunSpec(command=args.command, settings=settings,
                   out=Path(args.out) if args.out else None, seed=args.seed)


def _section_kwargs(spec: RunSpec, section: str) -> Dict[str, Any]:
    prefix = section + "."
    return {key[len(prefix):]: value for key, value in spec.settings.items()
            if key.startswith(prefix) and key not in EXTRA_KEYS}


def _build_dataclass(cls, kwargs: Dict[str, Any], where: str):
    try:
        return cls(**kwargs)
    except TypeError as exc:
        m = re.search(r"argument: '(\w+)'", str(exc))
        if m:
            raise UsageError(f"{where}.{m.group(1)} is required") from None
        raise UsageError(f"bad {where} settings: {exc}") from None


def network_config_from(spec: RunSpec, section: str = "network") -> NetworkConfig:
    return _build_dataclass(NetworkConfig, _section_kwargs(spec, section), section)


def train_config_from(spec: RunSpec) -> TrainConfig:
    kwargs = _section_kwargs(spec, "train")
    kwargs.pop("mode", None)
    kwargs.pop("init2d", None)
    loss_kwargs = _section_kwargs(spec, "loss")
    if loss_kwargs:
        kwargs["loss"] = _build_dataclass(LossConfig, loss_kwargs, "loss")
    return _build_dataclass(TrainConfig, kwargs, "train")


def synth_config_from(spec: RunSpec) -> SynthConfig:
    return _build_dataclass(SynthConfig, _section_kwargs(spec, "synth"), "synth")


def _manifest_from(spec: RunSpec) -> DatasetManifest:
    root = Path(spec.require("data.root"))
    manifest_path = root / "manifest.json"
    if manifest_path.exists():
        return DatasetManifest.load(manifest_path)
    return load_manifest(root,
                         dims=spec.get("data.dims", 2),
                         task=spec.get("data.task", "binary"),
                         num_classes=spec.get("data.num_classes", 1))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(spec: RunSpec) -> int:
    out = spec.out_dir()
    spec.snapshot(out)
    cfg = synth_config_from(spec)
    manifest = synth_generate(out, cfg)
    kinds = "slices" if len(cfg.extents) == 2 else "volumes"
    print(f"wrote {len(manifest.samples)} {kinds} under {out}")
    return 0


def cmd_train(spec: RunSpec) -> int:
    out = spec.out_dir()
    spec.snapshot(out)
    manifest = _manifest_from(spec)
    train_cfg = train_config_from(spec)
    mode = spec.get("train.mode", "2d")
    if mode == "2d":
        cfg = network_config_from(spec)
        ckpt = train_phase1(cfg, manifest, train_cfg, run_dir=out)
        print(f"best checkpoint at epoch {ckpt.epoch} "
              f"(selection dice {ckpt.meta['best_metric']}) -> {out / 'checkpoints'}")
    elif mode == "3d":
        cfg = network_config_from(spec, "network3d" if any(
            k.startswith("network3d.") for k in spec.settings) else "network")
        ckpt = train_volume(cfg, manifest, train_cfg, run_dir=out)
        print(f"best checkpoint at epoch {ckpt.epoch} -> {out / 'checkpoints'}")
    elif mode == "hybrid":
        hybrid = HybridConfig(
            cfg2d=network_config_from(spec),
            cfg3d=network_config_from(spec, "network3d"),
            lambda2d=spec.get("hybrid.lambda2d", 0.2),
            finetune2d=spec.get("hybrid.finetune2d", True))
        init2d = spec.get("train.init2d")
        if init2d:
            ckpt1 = Checkpoint.load(Path(init2d))
        else:
            ckpt1 = train_phase1(hybrid.cfg2d, manifest, train_cfg,
                                 run_dir=out / "phase1")
        # phase 2 batches whole volumes, so the slice batch size does not
        # carry over; train.batch3d overrides the dims default (2)
        phase2_cfg = replace(train_cfg, batch_size=spec.get("train.batch3d"))
        c2, c3 = train_phase2(ckpt1, hybrid, manifest, phase2_cfg,
                              run_dir=out / "phase2")
        print(f"phase-2 checkpoints (epoch {c3.epoch}) -> {out / 'phase2' / 'checkpoints'}")
    else:
        raise UsageError(f"train.mode must be 2d, 3d, or hybrid, got '{mode}'")
    return 0


def cmd_evaluate(spec: RunSpec) -> int:
    out = spec.out_dir()
    spec.snapshot(out)
    manifest = _manifest_from(spec)
    cfg = network_config_from(spec)
    train_cfg = train_config_from(spec)
    k = spec.get("data.folds", 5)
    report = evaluate(cfg, manifest, k=k, train_cfg=train_cfg, run_dir=out)
    print(f"{'metric':<14} {'mean':>8} {'std':>8}")
    for name, scores in report.summary().items():
        print(f"{name:<14} {scores.mean:>8.4f} {scores.std:>8.4f}")
    print(f"report -> {out / 'report.json'}")
    return 0


def _load_input_tensor(path: Path, cfg: NetworkConfig):
    import torch

    if cfg.dims == 2:
        arr = preprocess(read_image(path), cfg.input_extents)
    else:
        raw = read_volume(path).astype(np.float32)
        arr = preprocess(raw, cfg.input_extents)
    return torch.from_numpy(arr)[None].float()


def cmd_predict(spec: RunSpec) -> int:
    out = spec.out_dir()
    spec.snapshot(out)
    ckpt = Checkpoint.load(Path(spec.require("predict.checkpoint")))
    threshold = spec.get("predict.threshold", 0.5)
    input_path = Path(spec.require("predict.input"))
    ck3_path = spec.get("predict.checkpoint3d")
    if ck3_path:
        ck3 = Checkpoint.load(Path(ck3_path))
        cfg = ck3.network_config()
        model = (ckpt.build_model(), ck3.build_model())
    else:
        cfg = ckpt.network_config()
        model = ckpt.build_model()
    x = _load_input_tensor(input_path, cfg)
    result = predict(model, x, threshold=threshold)
    mask = result.mask.numpy()
    if cfg.dims == 2:
        mask_path = out / "mask.png"
        write_mask(mask_path, mask.astype(np.uint8))
    else:
        mask_path = out / "mask.nii.gz"
        write_volume(mask_path, mask.astype(np.uint8))
    np.save(out / "probs.npy", result.probs.numpy())
    gt_path = spec.get("predict.mask")
    if gt_path and cfg.dims == 2:
        gt = preprocess(read_mask(Path(gt_path)), cfg.input_extents, is_mask=True)
        img = x[0].numpy()
        _save_overlay(out / "overlay.png", img, mask > 0, gt > 0)
    print(f"mask -> {mask_path} (threshold {threshold}); probabilities -> probs.npy")
    return 0


def cmd_params(spec: RunSpec) -> int:
    levels = spec.get("params.levels", (2, 3, 4, 5))
    stages = spec.get("params.stages", 2)
    dims_req = spec.get("params.dims", (2, 3))
    breakdown = spec.get("params.breakdown", False)
    levels = levels if isinstance(levels, tuple) else (levels,)
    stages = stages if isinstance(stages, tuple) else (stages,)
    dims_req = dims_req if isinstance(dims_req, tuple) else (dims_req,)
    for d in dims_req:
        if d not in (2, 3):
            raise UsageError(f"params.dims entries must be 2 or 3, got {d}")

    print(f"{'dims':<5} {'L':<3} {'S':<3} {'params':>12} {'M':>8} "
          f"{'published':>10} {'dev':>7}")
    rows = []
    for d in dims_req:
        for L in levels:
            if d == 3 and L > 4:
                continue
            for S in stages:
                extents = (512, 512) if d == 2 else (32, 256, 256)
                cfg = NetworkConfig(levels=L, stages=S, base_channels=16, dims=d,
                                    input_extents=extents)
                model = build(cfg)
                total = count_parameters(model)
                published = PUBLISHED_PARAMS_M.get((d, L, S))
                if published is None:
                    note = "-"
                else:
                    deviation = total / 1e6 / published - 1.0
                    note = f"{deviation:+.1%}" + (" !" if abs(deviation) > 0.20 else "")
                print(f"{d:<5} {L:<3} {S:<3} {total:>12,} {total / 1e6:>8.2f} "
                      f"{published if published is not None else '-':>10} {note:>7}")
                rows.append((d, L, S, total))
                if breakdown:
                    for name, count in per_module_breakdown(model).items():
                        print(f"    {name:<28} {count:>12,}")
    if spec.out is not None:
        out = spec.out_dir()
        spec.snapshot(out)
        lines = ["dims,levels,stages,params"]
        lines += [f"{d},{L},{S},{n}" for d, L, S, n in rows]
        (out / "params.csv").write_text("\n".join(lines) + "\n")
    return 0


def cmd_ablate(spec: RunSpec) -> int:
    out = spec.out_dir()
    spec.snapshot(out)
    variants_raw = spec.get("ablate.variants", ())
    if isinstance(variants_raw, str):
        variants_raw = (variants_raw,)
    variants = [v.strip().lower() for v in variants_raw if str(v).strip()]
    grid_levels = spec.get("ablate.levels")
    grid_stages = spec.get("ablate.stages")
    if not variants and not (grid_levels and grid_stages):
        raise UsageError("ablate needs ablate.variants=v1,v7,... and/or "
                         "ablate.levels=...*ablate.stages=...")
    for v in variants:
        if v not in VARIANT_FLAGS:
            raise UsageError(f"unknown variant '{v}' "
                             f"(choose from {', '.join(sorted(VARIANT_FLAGS))})")

    if "data.root" in spec.settings:
        manifest = _manifest_from(spec)
    else:
        manifest = synth_generate(out / "corpus", synth_config_from(spec))
    k = spec.get("data.folds", 2)
    train_cfg = train_config_from(spec)
    manifest = make_folds(manifest, k=k, seed=train_cfg.seed)
    base = _section_kwargs(spec, "network")
    base.pop("variant", None)

    lines = []
    if variants:
        fold_dice: Dict[str, List[float]] = {}
        summaries = {}
        for tag in variants:
            cfg = _build_dataclass(NetworkConfig, dict(base, variant=tag), "network")
            report = evaluate(cfg, manifest, k=k, train_cfg=train_cfg,
                              run_dir=out / tag)
            fold_dice[tag] = report.folds_for("dice")
            summaries[tag] = report.summary()
        reference = "v1" if "v1" in variants else variants[0]
        header = (f"{'variant':<8} {'dice':>15} {'iou':>15} {'sensitivity':>15} "
                  f"{'specificity':>15} {'p vs ' + reference:>12}")
        lines.append(header)
        for tag in variants:
            s = summaries[tag]
            cells = [f"{s[m + '/c0'].mean:.4f}±{s[m + '/c0'].std:.4f}"
                     for m in ("dice", "iou", "sensitivity", "specificity")]
            if tag == reference:
                p_txt = "-"
            else:
                p = rank_sum_test(fold_dice[tag], fold_dice[reference]).p_value
                p_txt = f"{p:.4f}"
            lines.append(f"{tag:<8} " + " ".join(f"{c:>15}" for c in cells)
                         + f" {p_txt:>12}")

    if grid_levels and grid_stages:
        grid_levels = grid_levels if isinstance(grid_levels, tuple) else (grid_levels,)
        grid_stages = grid_stages if isinstance(grid_stages, tuple) else (grid_stages,)
        lines.append("")
        lines.append("dice grid (rows=levels, cols=stages)")
        lines.append("L\\S  " + " ".join(f"{s:>8}" for s in grid_stages))
        for L in grid_levels:
            cells = []
            for S in grid_stages:
                cfg = _build_dataclass(NetworkConfig,
                                       dict(base, levels=L, stages=S), "network")
                report = evaluate(cfg, manifest, k=k, train_cfg=train_cfg,
                                  run_dir=out / f"L{L}S{S}")
                cells.append(f"{report.summary()['dice/c0'].mean:>8.4f}")
            lines.append(f"L={L}  " + " ".join(cells))

    table = "\n".join(lines)
    print(table)
    (out / "ablation.txt").write_text(table + "\n")
    return 0


# ---------------------------------------------------------------------------
# plotting
# ---------------------------------------------------------------------------

OVERLAY_TP = (255, 255, 0)   # yellow
OVERLAY_FN = (255, 0, 0)     # red
OVERLAY_FP = (0, 0, 255)     # blue


def overlay_mask(image: np.ndarray, pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Color-code agreement over a grayscale base: TP yellow, FN red, FP blue.

    Pure function of the (pred, gt) pixel pair; background keeps the image.
    """
    if image.shape != pred.shape or image.shape != gt.shape:
        raise StagesegError(f"overlay shapes disagree: {image.shape}, "
                            f"{pred.shape}, {gt.shape}")
    base = np.clip(image, 0.0, 1.0)
    rgb = np.stack([base, base, base], axis=-1) * 255.0
    pred_b = pred.astype(bool)
    gt_b = gt.astype(bool)
    rgb[pred_b & gt_b] = OVERLAY_TP
    rgb[~pred_b & gt_b] = OVERLAY_FN
    rgb[pred_b & ~gt_b] = OVERLAY_FP
    return rgb.astype(np.uint8)


def _save_overlay(path: Path, image: np.ndarray, pred: np.ndarray,
                  gt: np.ndarray) -> None:
    from PIL import Image

    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(overlay_mask(image, pred, gt), mode="RGB").save(path)


def plot_curves(curves_path: Path, out_dir: Path) -> List[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = read_curves(curves_path)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for quantity in ("loss", "dice"):
        fig, ax = plt.subplots(figsize=(6, 4))
        for split in ("train", "val"):
            series = [(r["epoch"], r[quantity]) for r in rows if r["split"] == split]
            if series:
                xs, ys = zip(*series)
                ax.plot(xs, ys, label=split)
        ax.set_xlabel("epoch")
        ax.set_ylabel(quantity)
        ax.legend()
        fig.tight_layout()
        target = out_dir / f"{quantity}.png"
        fig.savefig(target, dpi=110)
        plt.close(fig)
        written.append(target)
    return written


def cmd_plot(spec: RunSpec) -> int:
    out = spec.out_dir()
    spec.snapshot(out)
    did_anything = False
    run = spec.get("plot.run")
    if run:
        curves = Path(run) / "curves.csv"
        if not curves.exists():
            raise UsageError(f"no curves.csv under {run}")
        for path in plot_curves(curves, out):
            print(f"wrote {path}")
        did_anything = True
    image_path = spec.get("plot.image")
    if image_path:
        pred_path = spec.require("plot.pred")
        gt_path = spec.require("plot.gt")
        image = read_image(Path(image_path))
        pred = read_mask(Path(pred_path)) > 0
        gt = read_mask(Path(gt_path)) > 0
        target = out / "overlay.png"
        _save_overlay(target, image, pred, gt)
        print(f"wrote {target}")
        did_anything = True
    if not did_anything:
        raise UsageError("plot needs plot.run=<run dir> and/or "
                         "plot.image/plot.pred/plot.gt")
    return 0


COMMANDS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "ablate": cmd_ablate,
    "params": cmd_params,
    "plot": cmd_plot,
    "synth": cmd_synth,
}


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one setting (repeatable)")
    common.add_argument("--out", help="output directory for this run")
    common.add_argument("--seed", type=int, help="seed for training and synthesis")
    common.add_argument("--desk", action="store_true",
                        help="CPU-sized profile: 64x64 slices, 8-slice volumes, base 8")
    parser = argparse.ArgumentParser(
        prog="stageseg",
        description="Multi-stage segmentation networks: train, evaluate, inspect.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common],
                   help="phase-1 slice training, single 3D training, or the hybrid pair")
    sub.add_parser("evaluate", parents=[common], help="k-fold cross-validation")
    sub.add_parser("predict", parents=[common], help="segment one image or volume")
    sub.add_parser("ablate", parents=[common],
                   help="train variants / level-stage grids, compare with rank sums")
    sub.add_parser("params", parents=[common],
                   help="parameter counts vs the published reference table")
    sub.add_parser("plot", parents=[common], help="training curves and overlays")
    sub.add_parser("synth", parents=[common], help="generate a synthetic corpus")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        spec = resolve_spec(args)
        return COMMANDS[args.command](spec)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 3
    except StagesegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
