"""Two-phase training, prediction, and cross-validated evaluation.

Phase 1 fits the 2D network on slices. Phase 2 couples a trained 2D network
to a shallow 3D network: each slice of a volume is gated by the 2D
probability map (elementwise product), the gated volume feeds the 3D
network, and a joint objective (scaled slice loss + volume loss) trains
both together. Everything runs on CPU at desk scale.

Run directory layout:

    runs/<name>/
        config.snapshot      (written by the CLI)
        checkpoints/*.pt
        curves.csv           epoch, split, loss, dice, iou, sensitivity, specificity, lr
        report.json
        overlays/*.png
"""

from __future__ import annotations

import copy
import csv
import math
import random
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from .data import DatasetManifest, SliceSample, load_pair, make_folds
from .errors import ConfigError, ContractError, ShapeError, TrainingDiverged
from .losses import LossConfig, joint_objective, loss_2d, loss_3d
from .metrics import EvaluationReport, confusion, dice, evaluate_pair, iou, sensitivity, specificity
from .network import NetworkConfig, SegNet, build

CURVE_COLUMNS = ["epoch", "split", "loss", "dice", "iou", "sensitivity", "specificity", "lr"]


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings shared by both phases.

    batch_size None picks the per-dims default (32 for 2D, 2 for 3D).
    The learning rate decays by `decay` every `decay_every` epochs.
    """

    epochs: int = 50
    batch_size: Optional[int] = None
    lr: float = 1e-5
    decay: float = 0.99
    decay_every: int = 10
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    checkpoint_every: int = 0
    val_fraction: float = 0.1
    early_stop_dice: Optional[float] = None

    def __post_init__(self):
        problems = []
        if self.epochs < 0:
            problems.append(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size is not None and self.batch_size < 1:
            problems.append(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr > 0:
            problems.append(f"lr must be > 0, got {self.lr}")
        if not 0.0 < self.decay <= 1.0:
            problems.append(f"decay must be in (0, 1], got {self.decay}")
        if self.decay_every < 1:
            problems.append(f"decay_every must be >= 1, got {self.decay_every}")
        if not 0.0 <= self.val_fraction < 1.0:
            problems.append(f"val_fraction must be in [0, 1), got {self.val_fraction}")
        if self.checkpoint_every < 0:
            problems.append("checkpoint_every must be >= 0")
        if self.early_stop_dice is not None and not 0.0 < self.early_stop_dice <= 1.0:
            problems.append(f"early_stop_dice must be in (0, 1], got {self.early_stop_dice}")
        if problems:
            raise ConfigError("; ".join(problems))

    def batch_for(self, dims: int) -> int:
        return self.batch_size if self.batch_size is not None else (32 if dims == 2 else 2)

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.decay ** (epoch // self.decay_every)


def _default_2d() -> NetworkConfig:
    return NetworkConfig(levels=4, stages=2, input_extents=(512, 512))


def _default_3d() -> NetworkConfig:
    return NetworkConfig(levels=2, stages=2, dims=3, input_extents=(32, 512, 512))


@dataclass(frozen=True)
class HybridConfig:
    """Shapes of the coupled pair: deep 2D network, shallow 3D network."""

    cfg2d: NetworkConfig = field(default_factory=_default_2d)
    cfg3d: NetworkConfig = field(default_factory=_default_3d)
    lambda2d: float = 0.2
    finetune2d: bool = True

    def __post_init__(self):
        if self.cfg2d.dims != 2 or self.cfg3d.dims != 3:
            raise ConfigError("cfg2d must be 2D and cfg3d must be 3D")
        if tuple(self.cfg2d.input_extents) != tuple(self.cfg3d.input_extents[1:]):
            raise ConfigError(
                f"slice extents disagree: 2D {self.cfg2d.input_extents} vs "
                f"3D {self.cfg3d.input_extents[1:]}")
        if self.lambda2d < 0:
            raise ConfigError("lambda2d must be >= 0")


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    """Everything needed to rebuild a model and resume or replay it."""

    config: Dict[str, Any]
    model_state: Dict[str, torch.Tensor]
    optimizer_state: Optional[dict] = None
    epoch: int = 0
    rng_state: Optional[dict] = None
    meta: Dict[str, Any] = field(default_factory=dict)

    def network_config(self) -> NetworkConfig:
        return NetworkConfig.from_dict(self.config)

    def build_model(self) -> SegNet:
        model = SegNet(self.network_config())
        model.load_state_dict(self.model_state)
        return model

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(
            {
                "config": self.config,
                "model_state": self.model_state,
                "optimizer_state": self.optimizer_state,
                "epoch": self.epoch,
                "rng_state": self.rng_state,
                "meta": self.meta,
            },
            path,
        )
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Checkpoint":
        # trusted local artifacts; rng/optimizer states need full unpickling
        payload = torch.load(Path(path), map_location="cpu", weights_only=False)
        return cls(**payload)


def _snapshot_state(model: torch.nn.Module) -> Dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def _rng_snapshot() -> dict:
    return {
        "torch": torch.get_rng_state(),
        "python": random.getstate(),
        "numpy": np.random.get_state(),
    }


def _seed_all(seed: int) -> None:
    torch.manual_seed(seed)
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------


def schedule_lr(optimizer: torch.optim.Optimizer, epoch: int, cfg: TrainConfig) -> float:
    """Set this epoch's learning rate and verify the optimizer really holds it."""
    expected = cfg.lr_at(epoch)
    for group in optimizer.param_groups:
        group["lr"] = expected
    for group in optimizer.param_groups:
        if not math.isclose(group["lr"], expected, rel_tol=1e-12):
            raise ContractError(
                f"optimizer lr {group['lr']} drifted from schedule {expected} at epoch {epoch}")
    return expected


# ---------------------------------------------------------------------------
# data plumbing
# ---------------------------------------------------------------------------


def _split_validation(samples: Sequence, fraction: float,
                      seed: int) -> Tuple[list, list]:
    """Hold out ~`fraction` of subjects (at least one when possible)."""
    samples = list(samples)
    if fraction <= 0.0 or not samples:
        return samples, []
    subjects = sorted({s.subject for s in samples})
    if len(subjects) < 2:
        return samples, []
    n_val = max(1, round(len(subjects) * fraction))
    if n_val >= len(subjects):
        n_val = len(subjects) - 1
    rng = random.Random(seed)
    shuffled = subjects[:]
    rng.shuffle(shuffled)
    val_subjects = set(shuffled[:n_val])
    train = [s for s in samples if s.subject not in val_subjects]
    val = [s for s in samples if s.subject in val_subjects]
    return train, val


def _load_slices(samples: Sequence, extents: Sequence[int]) -> Tuple[torch.Tensor, torch.Tensor]:
    """Stack 2D training pairs; volume samples contribute one pair per slice."""
    images, masks = [], []
    for s in samples:
        if isinstance(s, SliceSample):
            img, mask = load_pair(s, extents)
            images.append(img)
            masks.append(mask)
        else:
            from .data import read_volume  # local import keeps module load light
            raw = read_volume(s.volume_path).astype(np.float32)
            vol_extents = (raw.shape[0],) + tuple(extents)
            img, mask = load_pair(s, vol_extents)
            images.extend(img[0, d][None] for d in range(img.shape[1]))
            masks.extend(mask[0, d][None] for d in range(mask.shape[1]))
    if not images:
        raise ContractError("no training slices")
    return torch.stack(list(images)), torch.stack(list(masks))


def _load_volumes(samples: Sequence, extents: Sequence[int]) -> Tuple[torch.Tensor, torch.Tensor]:
    pairs = [load_pair(s, extents, depth=extents[0]) for s in samples]
    if not pairs:
        raise ContractError("no training volumes")
    return torch.stack([p[0] for p in pairs]), torch.stack([p[1] for p in pairs])


class _Meter:
    """Running confusion + loss accumulator for one epoch of one split."""

    def __init__(self):
        self.loss_sum = 0.0
        self.n = 0
        self.tp = self.fp = self.fn = self.tn = 0

    def update(self, loss: float, pred: torch.Tensor, gt: torch.Tensor, count: int) -> None:
        self.loss_sum += loss * count
        self.n += count
        with torch.no_grad():
            p = (pred > 0.5)
            g = (gt > 0.5)
            self.tp += int((p & g).sum())
            self.fp += int((p & ~g).sum())
            self.fn += int((~p & g).sum())
            self.tn += int((~p & ~g).sum())

    def row(self, epoch: int, split: str, lr: float) -> Dict[str, Any]:
        from .metrics import ConfusionCounts
        c = ConfusionCounts(self.tp, self.fp, self.fn, self.tn)
        return {
            "epoch": epoch,
            "split": split,
            "loss": self.loss_sum / max(self.n, 1),
            "dice": dice(c),
            "iou": iou(c),
            "sensitivity": sensitivity(c),
            "specificity": specificity(c),
            "lr": lr,
        }


def write_curves(rows: List[Dict[str, Any]], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CURVE_COLUMNS)
        writer.writeheader()
        for row in rows:
            out = dict(row)
            for key in ("loss", "dice", "iou", "sensitivity", "specificity", "lr"):
                out[key] = f"{out[key]:.10g}"
            writer.writerow(out)
    return path


def read_curves(path: Union[str, Path]) -> List[Dict[str, Any]]:
    with open(path, newline="") as fh:
        rows = []
        for row in csv.DictReader(fh):
            parsed: Dict[str, Any] = {"epoch": int(row["epoch"]), "split": row["split"]}
            for key in ("loss", "dice", "iou", "sensitivity", "specificity", "lr"):
                parsed[key] = float(row[key])
            rows.append(parsed)
        return rows


def _diverged(run_dir: Optional[Path], ckpt: Checkpoint, rows: List[dict],
              where: str) -> TrainingDiverged:
    if run_dir is not None:
        ckpt.save(Path(run_dir) / "checkpoints" / "diverged.pt")
        write_curves(rows, Path(run_dir) / "curves.csv")
    return TrainingDiverged(f"non-finite loss at {where}")


# ---------------------------------------------------------------------------
# phase 1 / single-network training
# ---------------------------------------------------------------------------


def train_phase1(cfg: NetworkConfig, manifest: DatasetManifest, train_cfg: TrainConfig,
                 run_dir: Optional[Union[str, Path]] = None,
                 samples: Optional[Sequence] = None) -> Checkpoint:
    """Slice-wise training of the 2D network. Returns the best checkpoint."""
    if cfg.dims != 2:
        raise ConfigError("train_phase1 expects a 2D network config")
    return _train_single(cfg, manifest, train_cfg, run_dir, samples)


def train_volume(cfg: NetworkConfig, manifest: DatasetManifest, train_cfg: TrainConfig,
                 run_dir: Optional[Union[str, Path]] = None,
                 samples: Optional[Sequence] = None) -> Checkpoint:
    """Standalone volumetric training of the 3D network (no 2D gating)."""
    if cfg.dims != 3:
        raise ConfigError("train_volume expects a 3D network config")
    return _train_single(cfg, manifest, train_cfg, run_dir, samples)


def _train_single(cfg: NetworkConfig, manifest: DatasetManifest, train_cfg: TrainConfig,
                  run_dir: Optional[Union[str, Path]], samples: Optional[Sequence]) -> Checkpoint:
    run_dir = Path(run_dir) if run_dir is not None else None
    _seed_all(train_cfg.seed)
    model = build(cfg, seed=train_cfg.seed)
    loss_fn = loss_2d if cfg.dims == 2 else loss_3d

    pool = list(samples) if samples is not None else list(manifest.samples)
    train_samples, val_samples = _split_validation(pool, train_cfg.val_fraction, train_cfg.seed)
    if cfg.dims == 2:
        X, Y = _load_slices(train_samples, cfg.input_extents)
        XV, YV = _load_slices(val_samples, cfg.input_extents) if val_samples else (None, None)
    else:
        X, Y = _load_volumes(train_samples, cfg.input_extents)
        XV, YV = _load_volumes(val_samples, cfg.input_extents) if val_samples else (None, None)

    opt = torch.optim.Adam(model.parameters(), lr=train_cfg.lr)
    batch = train_cfg.batch_for(cfg.dims)
    shuffler = random.Random(train_cfg.seed)
    rows: List[dict] = []
    best_score = -math.inf
    best_state = _snapshot_state(model)
    best_epoch = 0

    def make_ckpt(state, epoch, score):
        return Checkpoint(
            config=cfg.to_dict(),
            model_state=state,
            optimizer_state=copy.deepcopy(opt.state_dict()),
            epoch=epoch,
            rng_state=_rng_snapshot(),
            meta={"best_metric": score if score > -math.inf else None},
        )

    for epoch in range(train_cfg.epochs):
        lr = schedule_lr(opt, epoch, train_cfg)
        model.train()
        meter = _Meter()
        order = list(range(X.shape[0]))
        shuffler.shuffle(order)
        for start in range(0, len(order), batch):
            idx = torch.tensor(order[start:start + batch])
            xb, yb = X[idx], Y[idx]
            opt.zero_grad()
            pred = model(xb)
            loss = loss_fn(pred, yb, train_cfg.loss)
            if not torch.isfinite(loss):
                raise _diverged(run_dir, make_ckpt(_snapshot_state(model), epoch, best_score),
                                rows, f"epoch {epoch}, batch {start // batch}")
            loss.backward()
            opt.step()
            meter.update(float(loss.detach()), pred.detach(), yb, len(idx))
        train_row = meter.row(epoch, "train", lr)
        rows.append(train_row)

        score = train_row["dice"]
        if XV is not None:
            val_meter = _Meter()
            model.eval()
            with torch.no_grad():
                for start in range(0, XV.shape[0], batch):
                    xb = XV[start:start + batch]
                    yb = YV[start:start + batch]
                    pred = model(xb)
                    vloss = loss_fn(pred, yb, train_cfg.loss)
                    val_meter.update(float(vloss), pred, yb, xb.shape[0])
            val_row = val_meter.row(epoch, "val", lr)
            rows.append(val_row)
            score = val_row["dice"]
        if score > best_score:
            best_score = score
            best_state = _snapshot_state(model)
            best_epoch = epoch + 1
        if run_dir is not None:
            write_curves(rows, run_dir / "curves.csv")
            if train_cfg.checkpoint_every and (epoch + 1) % train_cfg.checkpoint_every == 0:
                make_ckpt(_snapshot_state(model), epoch + 1, best_score).save(
                    run_dir / "checkpoints" / f"epoch{epoch + 1:04d}.pt")
        if train_cfg.early_stop_dice is not None and score >= train_cfg.early_stop_dice:
            break

    best = make_ckpt(best_state, best_epoch, best_score)
    if run_dir is not None:
        write_curves(rows, run_dir / "curves.csv")
        best.save(run_dir / "checkpoints" / "best.pt")
        epochs_run = rows[-1]["epoch"] + 1 if rows else 0
        make_ckpt(_snapshot_state(model), epochs_run, best_score).save(
            run_dir / "checkpoints" / "last.pt")
    return best


# ---------------------------------------------------------------------------
# phase 2: gated hybrid
# ---------------------------------------------------------------------------


def roi_enhance(volume: torch.Tensor, model2d: torch.nn.Module,
                return_probs: bool = False):
    """Gate each slice by the 2D probability map: x' = x * p, p in [0, 1].

    Accepts (D,H,W) or (1,D,H,W); returns the same shape. Differentiable in
    both the volume and the 2D parameters, so the volume loss can fine-tune
    the slice model. |x'| <= |x| voxelwise because p never exceeds 1.
    """
    squeeze = volume.ndim == 3
    vol = volume[None] if squeeze else volume
    if vol.ndim != 4 or vol.shape[0] != 1:
        raise ShapeError(f"expected (D,H,W) or (1,D,H,W), got {tuple(volume.shape)}")
    d = vol.shape[1]
    slices = vol.permute(1, 0, 2, 3)  # (D,1,H,W)
    probs = model2d(slices)
    if probs.shape[1] != 1:
        raise ContractError("gating expects a single-probability 2D model")
    if probs.shape[-2:] != vol.shape[-2:]:
        raise ShapeError(f"2D model output {tuple(probs.shape[-2:])} does not match "
                         f"slice extents {tuple(vol.shape[-2:])}")
    gated = vol * probs.permute(1, 0, 2, 3)
    if squeeze:
        gated = gated[0]
        probs = probs[:, 0]
    if return_probs:
        return gated, probs
    return gated


def train_phase2(ckpt2d: Checkpoint, hybrid: HybridConfig, manifest: DatasetManifest,
                 train_cfg: TrainConfig, run_dir: Optional[Union[str, Path]] = None,
                 samples: Optional[Sequence] = None) -> Tuple[Checkpoint, Checkpoint]:
    """Joint optimization of the gated pair. Returns (finetuned 2D, 3D).

    The phase-1 checkpoint object/file is never mutated; the fine-tuned 2D
    weights come back as a new checkpoint.
    """
    run_dir = Path(run_dir) if run_dir is not None else None
    _seed_all(train_cfg.seed)
    model2d = ckpt2d.build_model()
    if model2d.cfg.input_extents != hybrid.cfg2d.input_extents:
        raise ConfigError(
            f"phase-1 checkpoint extents {model2d.cfg.input_extents} do not match "
            f"hybrid 2D config {hybrid.cfg2d.input_extents}")
    model3d = build(hybrid.cfg3d, seed=train_cfg.seed)
    model2d.train(hybrid.finetune2d)
    for p in model2d.parameters():
        p.requires_grad_(hybrid.finetune2d)

    params = list(model3d.parameters())
    if hybrid.finetune2d:
        params += list(model2d.parameters())
    opt = torch.optim.Adam(params, lr=train_cfg.lr)

    pool = list(samples) if samples is not None else list(manifest.samples)
    train_samples, val_samples = _split_validation(pool, train_cfg.val_fraction, train_cfg.seed)
    X, Y = _load_volumes(train_samples, hybrid.cfg3d.input_extents)
    XV, YV = (_load_volumes(val_samples, hybrid.cfg3d.input_extents)
              if val_samples else (None, None))

    loss_cfg = replace(train_cfg.loss, lambda_2d=hybrid.lambda2d)
    batch = train_cfg.batch_for(3)
    shuffler = random.Random(train_cfg.seed)
    rows: List[dict] = []
    best_score = -math.inf
    best_pair = (_snapshot_state(model2d), _snapshot_state(model3d))
    best_epoch = 0

    def make_pair(pair, epoch, score):
        meta = {"best_metric": score if score > -math.inf else None, "phase": 2}
        c2 = Checkpoint(config=model2d.cfg.to_dict(), model_state=pair[0],
                        epoch=epoch, rng_state=_rng_snapshot(), meta=meta)
        c3 = Checkpoint(config=hybrid.cfg3d.to_dict(), model_state=pair[1],
                        optimizer_state=copy.deepcopy(opt.state_dict()),
                        epoch=epoch, rng_state=_rng_snapshot(), meta=meta)
        return c2, c3

    def volume_objective(x, y):
        """x (1,D,H,W), y (1,D,H,W) -> joint scalar plus the 3D prediction."""
        gated, probs = roi_enhance(x, model2d, return_probs=True)
        slice_losses = [
            loss_2d(probs[d][None], y[:, d][None], loss_cfg)
            for d in range(x.shape[1])
        ]
        pred3d = model3d(gated[None])
        vol_loss = loss_3d(pred3d, y[None], loss_cfg)
        return joint_objective(slice_losses, vol_loss, loss_cfg), pred3d

    for epoch in range(train_cfg.epochs):
        lr = schedule_lr(opt, epoch, train_cfg)
        model3d.train()
        model2d.train(hybrid.finetune2d)
        meter = _Meter()
        order = list(range(X.shape[0]))
        shuffler.shuffle(order)
        for start in range(0, len(order), batch):
            idx = order[start:start + batch]
            opt.zero_grad()
            objectives = []
            for i in idx:
                obj, pred3d = volume_objective(X[i], Y[i])
                objectives.append(obj)
                meter.update(float(obj.detach()), pred3d.detach(), Y[i][None], 1)
            total = torch.stack(objectives).mean()
            if not torch.isfinite(total):
                c2, _ = make_pair((_snapshot_state(model2d), _snapshot_state(model3d)),
                                  epoch, best_score)
                raise _diverged(run_dir, c2, rows, f"epoch {epoch}, batch {start // batch}")
            total.backward()
            opt.step()
        train_row = meter.row(epoch, "train", lr)
        rows.append(train_row)

        score = train_row["dice"]
        if XV is not None:
            val_meter = _Meter()
            model2d.eval()
            model3d.eval()
            with torch.no_grad():
                for i in range(XV.shape[0]):
                    obj, pred3d = volume_objective(XV[i], YV[i])
                    val_meter.update(float(obj), pred3d, YV[i][None], 1)
            val_row = val_meter.row(epoch, "val", lr)
            rows.append(val_row)
            score = val_row["dice"]
        if score > best_score:
            best_score = score
            best_pair = (_snapshot_state(model2d), _snapshot_state(model3d))
            best_epoch = epoch + 1
        if run_dir is not None:
            write_curves(rows, run_dir / "curves.csv")

    c2, c3 = make_pair(best_pair, best_epoch, best_score)
    if run_dir is not None:
        write_curves(rows, run_dir / "curves.csv")
        c2.save(run_dir / "checkpoints" / "best2d.pt")
        c3.save(run_dir / "checkpoints" / "best3d.pt")
    return c2, c3


# ---------------------------------------------------------------------------
# prediction
# ---------------------------------------------------------------------------


class Prediction(NamedTuple):
    mask: torch.Tensor   # uint8 labels, spatial shape only
    probs: torch.Tensor  # (C, *spatial) float


ModelOrPair = Union[torch.nn.Module, Tuple[torch.nn.Module, torch.nn.Module]]


def predict(model: ModelOrPair, x: torch.Tensor, threshold: float = 0.5) -> Prediction:
    """Binarize the probability output at `threshold` (strictly greater-than).

    `model` may be a single network or a (2D, 3D) pair; the pair runs the
    gated path: slices -> 2D probabilities -> gated volume -> 3D network.
    Multi-class outputs take the argmax instead of a threshold.
    """
    if isinstance(model, tuple):
        model2d, model3d = model
        model2d.eval()
        model3d.eval()
        with torch.no_grad():
            vol = x if x.ndim == 4 else x[None]
            gated = roi_enhance(vol, model2d)
            return _finalize(model3d(gated[None])[0], threshold)
    model.eval()
    with torch.no_grad():
        expected = model.cfg.dims + 1  # channel + spatial
        xin = x if x.ndim == expected else x[None]
        out = model(xin[None])[0]
    return _finalize(out, threshold)


def _finalize(probs: torch.Tensor, threshold: float) -> Prediction:
    if probs.shape[0] == 1:
        mask = (probs[0] > threshold).to(torch.uint8)
    else:
        mask = probs.argmax(dim=0).to(torch.uint8)
    return Prediction(mask=mask, probs=probs)


def predict_volume_slicewise(model2d: torch.nn.Module, volume: torch.Tensor,
                             threshold: float = 0.5) -> Prediction:
    """2D-only volumetric baseline: segment each slice, restack in order."""
    vol = volume if volume.ndim == 4 else volume[None]
    model2d.eval()
    with torch.no_grad():
        probs = model2d(vol.permute(1, 0, 2, 3))  # (D,C,H,W)
    probs = probs.permute(1, 0, 2, 3)  # (C,D,H,W)
    return _finalize(probs, threshold)


# ---------------------------------------------------------------------------
# cross-validated evaluation
# ---------------------------------------------------------------------------

REPORT_METRICS = ("dice", "iou", "sensitivity", "specificity")


def evaluate(cfg: NetworkConfig, manifest: DatasetManifest, k: int = 5,
             train_cfg: TrainConfig = TrainConfig(),
             run_dir: Optional[Union[str, Path]] = None,
             checkpoints: Optional[Sequence[Checkpoint]] = None,
             threshold: float = 0.5) -> EvaluationReport:
    """k-fold cross-validation: train (or reuse `checkpoints`) per fold,
    score the held-out subjects, aggregate mean and std per metric."""
    if not manifest.folds:
        manifest = make_folds(manifest, k=k, seed=train_cfg.seed)
    folds = sorted(set(manifest.folds.values()))
    if len(folds) != k:
        raise ContractError(f"manifest has {len(folds)} folds, expected {k}")
    if checkpoints is not None and len(checkpoints) != k:
        raise ContractError(f"need one checkpoint per fold, got {len(checkpoints)}")

    report = EvaluationReport()
    trainer = train_phase1 if cfg.dims == 2 else train_volume
    for fold in folds:
        if checkpoints is None:
            fold_dir = Path(run_dir) / f"fold{fold}" if run_dir is not None else None
            ckpt = trainer(cfg, manifest, train_cfg,
                           run_dir=fold_dir,
                           samples=manifest.samples_for(fold, train=True))
        else:
            ckpt = checkpoints[fold]
        model = ckpt.build_model()
        scores = score_fold(model, manifest.samples_for(fold, train=False),
                            cfg.input_extents, threshold)
        for metric in REPORT_METRICS:
            report.add(metric, scores[metric], fold=fold)
    if run_dir is not None:
        out = Path(run_dir) / "report.json"
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(report.to_json())
    return report


def score_fold(model: ModelOrPair, samples: Sequence, extents: Sequence[int],
               threshold: float = 0.5) -> Dict[str, float]:
    """Mean per-sample metrics over a held-out sample list."""
    if not samples:
        raise ContractError("empty evaluation fold")
    totals = {m: 0.0 for m in REPORT_METRICS}
    for s in samples:
        depth = extents[0] if len(extents) == 3 else None
        img, gt = load_pair(s, extents, depth=depth)
        pred = predict(model, img, threshold=threshold)
        pair = evaluate_pair(pred.mask.numpy(), gt[0].numpy() > 0.5)
        for m in REPORT_METRICS:
            totals[m] += pair[m]
    return {m: v / len(samples) for m, v in totals.items()}
