import hashlib
import math
from types import SimpleNamespace

import pytest
import torch

from stageseg.data import SynthConfig, make_folds, synth_generate, write_image, write_mask
from stageseg.data import load_manifest
from stageseg.errors import ConfigError, ContractError, ShapeError, TrainingDiverged
from stageseg.losses import LossConfig
from stageseg.network import NetworkConfig, build
from stageseg.pipeline import (
    Checkpoint,
    HybridConfig,
    TrainConfig,
    evaluate,
    predict,
    predict_volume_slicewise,
    read_curves,
    roi_enhance,
    schedule_lr,
    score_fold,
    train_phase1,
    train_phase2,
    train_volume,
    write_curves,
)

import numpy as np


TINY2D = NetworkConfig(levels=2, stages=1, base_channels=4, dims=2,
                       input_extents=(16, 16), variant="v1")
TINY3D = NetworkConfig(levels=2, stages=1, base_channels=4, dims=3,
                       input_extents=(4, 16, 16), variant="v1")


@pytest.fixture(scope="module")
def corpus2d(tmp_path_factory):
    root = tmp_path_factory.mktemp("c2d")
    return synth_generate(root, SynthConfig(n=6, extents=(16, 16), seed=0))


@pytest.fixture(scope="module")
def corpus3d(tmp_path_factory):
    root = tmp_path_factory.mktemp("c3d")
    return synth_generate(root, SynthConfig(n=4, extents=(4, 16, 16), seed=1))


def fast_cfg(**kw):
    kw.setdefault("epochs", 2)
    kw.setdefault("lr", 1e-3)
    kw.setdefault("batch_size", 4)
    kw.setdefault("val_fraction", 0.0)
    kw.setdefault("seed", 0)
    return TrainConfig(**kw)


# ---------------------------------------------------------------------------
# configs and schedule
# ---------------------------------------------------------------------------


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=-1)
    with pytest.raises(ConfigError):
        TrainConfig(lr=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(val_fraction=1.0)
    with pytest.raises(ConfigError):
        TrainConfig(decay=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(early_stop_dice=0.0)


def test_batch_defaults_per_dims():
    tc = TrainConfig()
    assert tc.batch_for(2) == 32
    assert tc.batch_for(3) == 2
    assert TrainConfig(batch_size=7).batch_for(2) == 7


def test_lr_schedule_formula():
    tc = TrainConfig()
    for epoch in range(45):
        assert tc.lr_at(epoch) == pytest.approx(1e-5 * 0.99 ** (epoch // 10), rel=1e-12)
    assert tc.lr_at(0) == 1e-5
    assert tc.lr_at(9) == 1e-5
    assert tc.lr_at(10) == pytest.approx(1e-5 * 0.99)


def test_schedule_lr_sets_optimizer_state():
    w = torch.nn.Parameter(torch.zeros(3))
    opt = torch.optim.Adam([w], lr=123.0)
    tc = TrainConfig()
    for epoch in (0, 5, 10, 25):
        lr = schedule_lr(opt, epoch, tc)
        assert opt.param_groups[0]["lr"] == lr == tc.lr_at(epoch)


def test_hybrid_config_validation():
    with pytest.raises(ConfigError, match="slice extents"):
        HybridConfig(cfg2d=TINY2D,
                     cfg3d=NetworkConfig(levels=2, stages=1, base_channels=4, dims=3,
                                         input_extents=(4, 32, 32), variant="v1"))
    with pytest.raises(ConfigError):
        HybridConfig(cfg2d=TINY3D, cfg3d=TINY3D)
    hy = HybridConfig(cfg2d=TINY2D, cfg3d=TINY3D)
    assert hy.lambda2d == pytest.approx(0.2)
    assert hy.finetune2d


# ---------------------------------------------------------------------------
# phase 1
# ---------------------------------------------------------------------------


def test_zero_epochs_checkpoint_equals_initialization(corpus2d):
    tc = fast_cfg(epochs=0, seed=5)
    ckpt = train_phase1(TINY2D, corpus2d, tc)
    init = build(TINY2D, seed=5)
    for name, tensor in init.state_dict().items():
        assert torch.equal(ckpt.model_state[name], tensor), name


def test_fixed_seed_identical_curves(corpus2d, tmp_path):
    tc = fast_cfg(epochs=2, seed=3, val_fraction=0.2)
    train_phase1(TINY2D, corpus2d, tc, run_dir=tmp_path / "a")
    train_phase1(TINY2D, corpus2d, tc, run_dir=tmp_path / "b")
    a = (tmp_path / "a" / "curves.csv").read_bytes()
    b = (tmp_path / "b" / "curves.csv").read_bytes()
    assert hashlib.sha256(a).hexdigest() == hashlib.sha256(b).hexdigest()


def test_curves_have_expected_shape_and_lr_trace(corpus2d, tmp_path):
    tc = TrainConfig(epochs=12, lr=1e-5, batch_size=8, val_fraction=0.2, seed=0)
    train_phase1(TINY2D, corpus2d, tc, run_dir=tmp_path / "run")
    rows = read_curves(tmp_path / "run" / "curves.csv")
    train_rows = [r for r in rows if r["split"] == "train"]
    val_rows = [r for r in rows if r["split"] == "val"]
    assert len(train_rows) == 12 and len(val_rows) == 12
    for r in train_rows:
        assert r["lr"] == pytest.approx(1e-5 * 0.99 ** (r["epoch"] // 10), rel=1e-9)
        assert math.isfinite(r["loss"])
        assert 0.0 <= r["dice"] <= 1.0


def test_training_reduces_loss(corpus2d):
    tc = fast_cfg(epochs=8, seed=1)
    ckpt = train_phase1(TINY2D, corpus2d, tc, run_dir=None)
    assert ckpt.meta["best_metric"] is not None
    assert ckpt.epoch >= 1


def test_divergence_aborts_with_snapshot(corpus2d, tmp_path, monkeypatch):
    import stageseg.pipeline as pl

    calls = {"n": 0}
    real = pl.loss_2d

    def poisoned(pred, gt, cfg=LossConfig()):
        calls["n"] += 1
        if calls["n"] >= 2:
            return torch.tensor(float("nan"), requires_grad=True)
        return real(pred, gt, cfg)

    monkeypatch.setattr(pl, "loss_2d", poisoned)
    with pytest.raises(TrainingDiverged, match="non-finite"):
        train_phase1(TINY2D, corpus2d, fast_cfg(epochs=3, batch_size=2),
                     run_dir=tmp_path / "run")
    assert (tmp_path / "run" / "checkpoints" / "diverged.pt").exists()


def test_early_stop_halts_training(corpus2d, tmp_path):
    tc = fast_cfg(epochs=50, early_stop_dice=1e-6)
    train_phase1(TINY2D, corpus2d, tc, run_dir=tmp_path / "run")
    rows = read_curves(tmp_path / "run" / "curves.csv")
    assert rows[-1]["epoch"] == 0  # any positive dice satisfies the target


def test_checkpoint_cadence(corpus2d, tmp_path):
    tc = fast_cfg(epochs=4, checkpoint_every=2)
    train_phase1(TINY2D, corpus2d, tc, run_dir=tmp_path / "run")
    names = sorted(p.name for p in (tmp_path / "run" / "checkpoints").glob("*.pt"))
    assert names == ["best.pt", "epoch0002.pt", "epoch0004.pt", "last.pt"]


def test_train_phase1_rejects_3d_config(corpus3d):
    with pytest.raises(ConfigError):
        train_phase1(TINY3D, corpus3d, fast_cfg())
    with pytest.raises(ConfigError):
        train_volume(TINY2D, corpus3d, fast_cfg())


def test_train_volume_runs(corpus3d):
    ckpt = train_volume(TINY3D, corpus3d, fast_cfg(epochs=1, batch_size=2))
    assert ckpt.network_config().dims == 3


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def test_checkpoint_round_trip_bitwise(corpus2d, tmp_path):
    ckpt = train_phase1(TINY2D, corpus2d, fast_cfg(epochs=1))
    path = ckpt.save(tmp_path / "ck.pt")
    back = Checkpoint.load(path)
    torch.manual_seed(0)
    x = torch.rand(1, 16, 16)
    a = predict(ckpt.build_model(), x)
    b = predict(back.build_model(), x)
    assert torch.equal(a.probs, b.probs)
    assert torch.equal(a.mask, b.mask)
    for name, tensor in ckpt.model_state.items():
        assert torch.equal(back.model_state[name], tensor)
    assert back.epoch == ckpt.epoch
    assert back.config == ckpt.config


def test_phase2_never_touches_phase1_file(corpus2d, corpus3d, tmp_path):
    ckpt = train_phase1(TINY2D, corpus2d, fast_cfg(epochs=1))
    path = ckpt.save(tmp_path / "phase1.pt")
    digest = hashlib.sha256(path.read_bytes()).hexdigest()
    hy = HybridConfig(cfg2d=TINY2D, cfg3d=TINY3D)
    loaded = Checkpoint.load(path)
    train_phase2(loaded, hy, corpus3d, fast_cfg(epochs=1, batch_size=2))
    assert hashlib.sha256(path.read_bytes()).hexdigest() == digest


# ---------------------------------------------------------------------------
# gating
# ---------------------------------------------------------------------------


class _ConstProb(torch.nn.Module):
    """Stub slice model emitting a constant probability map."""

    def __init__(self, value: float):
        super().__init__()
        self.value = value
        self.cfg = SimpleNamespace(dims=2)

    def forward(self, x):
        return torch.full((x.shape[0], 1) + x.shape[2:], self.value)


def test_roi_enhance_identity_and_annihilator():
    vol = torch.rand(1, 3, 16, 16)
    assert torch.equal(roi_enhance(vol, _ConstProb(1.0)), vol)
    assert torch.equal(roi_enhance(vol, _ConstProb(0.0)), torch.zeros_like(vol))


def test_roi_enhance_never_amplifies(corpus2d):
    model = build(TINY2D, seed=0)
    vol = torch.randn(1, 4, 16, 16)  # signed values: check magnitudes
    out = roi_enhance(vol, model)
    assert out.shape == vol.shape
    assert bool((out.abs() <= vol.abs() + 1e-12).all())


def test_roi_enhance_matches_elementwise_loop():
    model = build(TINY2D, seed=1)
    vol = torch.rand(3, 16, 16)
    with torch.no_grad():
        gated, probs = roi_enhance(vol, model, return_probs=True)
    assert gated.shape == vol.shape and probs.shape == vol.shape
    for d in range(3):
        for i in range(16):
            for j in range(0, 16, 5):
                expected = float(vol[d, i, j]) * float(probs[d, i, j])
                assert float(gated[d, i, j]) == pytest.approx(expected, rel=1e-6)


def test_roi_enhance_rejects_bad_shapes():
    model = _ConstProb(1.0)
    with pytest.raises(ShapeError):
        roi_enhance(torch.rand(2, 3, 16, 16), model)  # batch of volumes unsupported
    with pytest.raises(ShapeError):
        roi_enhance(torch.rand(16, 16), model)


# ---------------------------------------------------------------------------
# phase 2
# ---------------------------------------------------------------------------


def test_phase2_returns_coupled_checkpoints(corpus2d, corpus3d, tmp_path):
    ckpt = train_phase1(TINY2D, corpus2d, fast_cfg(epochs=1))
    hy = HybridConfig(cfg2d=TINY2D, cfg3d=TINY3D)
    c2, c3 = train_phase2(ckpt, hy, corpus3d, fast_cfg(epochs=2, batch_size=2),
                          run_dir=tmp_path / "run")
    assert c2.network_config().dims == 2
    assert c3.network_config().dims == 3
    assert c2.meta["phase"] == 2
    assert (tmp_path / "run" / "checkpoints" / "best2d.pt").exists()
    assert (tmp_path / "run" / "checkpoints" / "best3d.pt").exists()
    rows = read_curves(tmp_path / "run" / "curves.csv")
    assert all(math.isfinite(r["loss"]) for r in rows)


def test_phase2_frozen_2d_weights_unchanged(corpus2d, corpus3d):
    ckpt = train_phase1(TINY2D, corpus2d, fast_cfg(epochs=1))
    hy = HybridConfig(cfg2d=TINY2D, cfg3d=TINY3D, lambda2d=0.0, finetune2d=False)
    c2, _ = train_phase2(ckpt, hy, corpus3d, fast_cfg(epochs=1, batch_size=2))
    for name, tensor in ckpt.model_state.items():
        assert torch.equal(c2.model_state[name], tensor), name


def test_phase2_finetune_updates_2d_weights(corpus2d, corpus3d):
    ckpt = train_phase1(TINY2D, corpus2d, fast_cfg(epochs=1))
    hy = HybridConfig(cfg2d=TINY2D, cfg3d=TINY3D)  # finetune on
    c2, _ = train_phase2(ckpt, hy, corpus3d, fast_cfg(epochs=2, batch_size=2))
    changed = any(not torch.equal(c2.model_state[n], t)
                  for n, t in ckpt.model_state.items())
    assert changed


# ---------------------------------------------------------------------------
# prediction
# ---------------------------------------------------------------------------


def test_predict_threshold_semantics(corpus2d):
    model = build(TINY2D, seed=0)
    x = torch.rand(1, 16, 16)
    at_zero = predict(model, x, threshold=0.0)
    assert torch.equal(at_zero.mask.bool(), at_zero.probs[0] > 0)
    at_one = predict(model, x, threshold=1.0)
    assert int(at_one.mask.sum()) == 0
    again = predict(model, x, threshold=0.0)
    assert torch.equal(at_zero.mask, again.mask)


def test_predict_multiclass_argmax():
    cfg = NetworkConfig(levels=2, stages=1, base_channels=4, dims=2,
                        input_extents=(16, 16), num_classes=3, variant="v1")
    model = build(cfg, seed=0)
    pred = predict(model, torch.rand(1, 16, 16))
    assert pred.probs.shape == (3, 16, 16)
    assert set(pred.mask.unique().tolist()) <= {0, 1, 2}


def test_predict_volume_slicewise_shapes():
    model = build(TINY2D, seed=0)
    pred = predict_volume_slicewise(model, torch.rand(1, 5, 16, 16))
    assert pred.mask.shape == (5, 16, 16)
    assert pred.probs.shape == (1, 5, 16, 16)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def _identity_prob_corpus(root, n=4):
    """Images that literally equal their masks, so thresholding the input
    reproduces ground truth exactly."""
    rng = np.random.default_rng(0)
    for i in range(n):
        mask = (rng.uniform(size=(16, 16)) > 0.7).astype(np.uint8)
        write_image(root / "images" / f"case{i}_000.png", mask.astype(np.float32))
        write_mask(root / "masks" / f"case{i}_000.png", mask)
    return load_manifest(root, dims=2)


class _IdentityModel(torch.nn.Module):
    def __init__(self):
        super().__init__()
        self.cfg = SimpleNamespace(dims=2)

    def forward(self, x):
        return x


def test_perfect_oracle_scores_ones(tmp_path):
    manifest = _identity_prob_corpus(tmp_path)
    scores = score_fold(_IdentityModel(), manifest.samples, (16, 16))
    for metric, value in scores.items():
        assert value == pytest.approx(1.0), metric


def test_evaluate_fills_report(corpus2d, tmp_path):
    rep = evaluate(TINY2D, corpus2d, k=2, train_cfg=fast_cfg(epochs=1),
                   run_dir=tmp_path / "ev")
    summary = rep.summary()
    assert set(summary) == {"dice/c0", "iou/c0", "sensitivity/c0", "specificity/c0"}
    for scores in summary.values():
        assert len(rep.folds_for(scores.metric.split("/")[0] if "/" in scores.metric
                                 else scores.metric)) == 2
    assert (tmp_path / "ev" / "report.json").exists()
    assert (tmp_path / "ev" / "fold0" / "curves.csv").exists()


def test_evaluate_with_prebuilt_checkpoints(corpus2d):
    folded = make_folds(corpus2d, k=2, seed=0)
    cks = [train_phase1(TINY2D, folded, fast_cfg(epochs=1),
                        samples=folded.samples_for(f, train=True)) for f in range(2)]
    rep = evaluate(TINY2D, folded, k=2, train_cfg=fast_cfg(), checkpoints=cks)
    assert len(rep.folds_for("dice")) == 2
    with pytest.raises(ContractError):
        evaluate(TINY2D, folded, k=2, train_cfg=fast_cfg(), checkpoints=cks[:1])


def test_score_fold_empty_rejected():
    with pytest.raises(ContractError):
        score_fold(_IdentityModel(), [], (16, 16))


def test_curves_round_trip(tmp_path):
    rows = [
        {"epoch": 0, "split": "train", "loss": 0.5, "dice": 0.25, "iou": 0.2,
         "sensitivity": 0.3, "specificity": 0.4, "lr": 1e-5},
        {"epoch": 0, "split": "val", "loss": 0.6, "dice": 0.2, "iou": 0.15,
         "sensitivity": 0.25, "specificity": 0.35, "lr": 1e-5},
    ]
    path = write_curves(rows, tmp_path / "curves.csv")
    back = read_curves(path)
    assert back == rows
