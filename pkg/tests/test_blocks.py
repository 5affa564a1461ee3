import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings
from hypothesis import strategies as st

from param_oracle import cell_params, conv_params, dt_params, ut_params
from stageseg.blocks import (
    ConvUnit,
    DenseCell,
    DownTransition,
    FeatureSpec,
    Stem,
    UnitCellConfig,
    UpTransition,
    max_pool,
    upsample,
)
from stageseg.errors import ConfigError, ContractError, ShapeError


def n_params(m: nn.Module) -> int:
    return sum(p.numel() for p in m.parameters())


def zero_all(m: nn.Module) -> nn.Module:
    with torch.no_grad():
        for p in m.parameters():
            p.zero_()
        for b in m.buffers():
            if b.dtype.is_floating_point:
                b.zero_()
            elif b.numel() == 1:  # batch counters
                b.fill_(1)
    return m


# ---------------------------------------------------------------------------
# FeatureSpec
# ---------------------------------------------------------------------------


def test_feature_spec_basics():
    fs = FeatureSpec(16, (64, 64))
    assert fs.dims == 2
    assert fs.scaled(0.5).extents == (32, 32)
    assert fs.scaled(2).extents == (128, 128)
    assert fs.with_channels(8).channels == 8
    with pytest.raises(ShapeError):
        FeatureSpec(16, (6, 6)).scaled(0.25)
    with pytest.raises(ConfigError):
        FeatureSpec(0, (8, 8))
    with pytest.raises(ConfigError):
        FeatureSpec(4, (8,))


def test_feature_spec_validate():
    fs = FeatureSpec(3, (8, 8))
    fs.validate(torch.zeros(2, 3, 8, 8))
    with pytest.raises(ShapeError):
        fs.validate(torch.zeros(2, 4, 8, 8), where="here")


# ---------------------------------------------------------------------------
# Stem
# ---------------------------------------------------------------------------


def test_stem_shapes_2d_and_3d():
    s = Stem(2, 1, 16)
    assert s(torch.randn(2, 1, 64, 64)).shape == (2, 16, 64, 64)
    s3 = Stem(3, 1, 8)
    assert s3(torch.randn(1, 1, 8, 16, 16)).shape == (1, 8, 8, 16, 16)


def test_stem_param_count_matches_arithmetic():
    # conv 3x3, 1 -> 16 with bias: 3*3*1*16 + 16 = 160; norm adds 2*16
    s = Stem(2, 1, 16)
    assert n_params(s) == conv_params(3, 1, 16, 2) == 160 + 32


def test_stem_zero_propagation():
    s = zero_all(Stem(2, 1, 8)).eval()
    out = s(torch.zeros(1, 1, 16, 16))
    assert torch.all(out == 0)


# ---------------------------------------------------------------------------
# Dense unit cell
# ---------------------------------------------------------------------------


def test_cell_config_validation():
    with pytest.raises(ConfigError):
        UnitCellConfig(channels=18, pairs=4, dims=2)
    with pytest.raises(ConfigError):
        UnitCellConfig(channels=16, pairs=4, dims=4)
    cfg = UnitCellConfig(channels=16, pairs=4, dims=2)
    assert cfg.growth == 4


def test_cell_preserves_shape():
    cfg = UnitCellConfig(channels=32, pairs=4, dims=2)
    cell = DenseCell(cfg, in_ch=32)
    out = cell(torch.randn(2, 32, 16, 16))
    assert out.shape == (2, 32, 16, 16)
    # 3D flavor with its own pair count
    cfg3 = UnitCellConfig(channels=16, pairs=2, dims=3, bottleneck_mult=6)
    cell3 = DenseCell(cfg3, in_ch=16)
    assert cell3(torch.randn(1, 16, 4, 8, 8)).shape == (1, 16, 4, 8, 8)


def test_cell_param_count_matches_arithmetic():
    cfg = UnitCellConfig(channels=16, pairs=4, dims=2, bottleneck_mult=4)
    cell = DenseCell(cfg, in_ch=16)
    assert n_params(cell) == cell_params(16, 4, 4, 2)
    wide = DenseCell(cfg, in_ch=48)  # concatenated vertical+lateral input
    assert n_params(wide) == cell_params(16, 4, 4, 2, in_ch=48)


def test_cell_zero_propagation():
    cfg = UnitCellConfig(channels=8, pairs=4, dims=2)
    cell = zero_all(DenseCell(cfg, in_ch=8)).eval()
    assert torch.all(cell(torch.zeros(1, 8, 8, 8)) == 0)


def test_cell_rejects_wrong_channels():
    cfg = UnitCellConfig(channels=8, pairs=4, dims=2)
    cell = DenseCell(cfg, in_ch=8, name="enc1.l0")
    with pytest.raises(ShapeError, match="enc1.l0"):
        cell(torch.randn(1, 4, 8, 8))


def test_cell_dense_gradient_reach():
    # gradient flows from the output back to the FIRST internal layer even
    # though later layers sit in between (dense concatenation shortcut)
    cfg = UnitCellConfig(channels=8, pairs=4, dims=2)
    cell = DenseCell(cfg, in_ch=8)
    out = cell(torch.randn(2, 8, 8, 8, dtype=torch.float32))
    loss = out.square().mean()
    loss.backward()
    g = cell.layers[0].pw.conv.weight.grad
    assert g is not None and g.abs().sum() > 0


def test_cell_layer_input_widths_grow_by_growth():
    cfg = UnitCellConfig(channels=16, pairs=4, dims=2)
    cell = DenseCell(cfg, in_ch=16)
    widths = [layer.pw.conv.weight.shape[1] for layer in cell.layers]
    assert widths == [16, 20, 24, 28]


# ---------------------------------------------------------------------------
# Pool / upsample helpers
# ---------------------------------------------------------------------------


def test_max_pool_and_upsample_round_trip_extents():
    x = torch.randn(1, 4, 16, 16)
    down = max_pool(x, 4)
    assert down.shape == (1, 4, 4, 4)
    up = upsample(down, 4)
    assert up.shape == x.shape


def test_max_pool_rejects_indivisible():
    with pytest.raises(ShapeError):
        max_pool(torch.randn(1, 1, 6, 6), 4)


def test_upsample_preserves_constants():
    x = torch.full((1, 3, 4, 4), 2.5)
    for f in (2, 4):
        out = upsample(x, f)
        assert torch.allclose(out, torch.full_like(out, 2.5), atol=1e-6)
    x3 = torch.full((1, 2, 2, 4, 4), -1.25)
    assert torch.allclose(upsample(x3, 2), torch.full((1, 2, 4, 8, 8), -1.25),
                          atol=1e-6)


# ---------------------------------------------------------------------------
# Down transition
# ---------------------------------------------------------------------------


def _level_feats(ch, extent, dims, levels, batch=1):
    feats = []
    for lev in range(levels):
        e = extent // (2 ** lev)
        shape = (batch, ch[lev]) + (e,) * dims
        feats.append(torch.randn(*shape))
    return feats


def test_down_transition_aggregates_and_halves():
    ch = [16, 32, 64, 128]
    dt = DownTransition(2, ch, level=2)
    feats = _level_feats(ch, 32, 2, 3)
    out = dt(feats)
    assert out.shape == (1, 128, 4, 4)
    # aggregate width before the strided conv: 16+32+64
    assert dt.reduce.conv.weight.shape[1] == 112


def test_down_transition_single_input_boundary():
    ch = [16, 32]
    dt = DownTransition(2, ch, level=0)
    out = dt([torch.randn(1, 16, 16, 16)])
    assert out.shape == (1, 32, 8, 8)


def test_down_transition_param_count():
    ch = [16, 32, 64]
    dt = DownTransition(2, ch, level=1)
    assert n_params(dt) == dt_params(ch, 1, 2) == conv_params(2, 48, 64, 2)


def test_down_transition_contract_errors():
    ch = [16, 32, 64]
    with pytest.raises(ConfigError):
        DownTransition(2, ch, level=2)  # no deeper level
    dt = DownTransition(2, ch, level=1)
    with pytest.raises(ContractError):
        dt([torch.randn(1, 16, 16, 16)])  # missing level-1 output
    bad = [torch.randn(1, 16, 10, 10), torch.randn(1, 32, 5, 5)]
    with pytest.raises(ShapeError):
        dt(bad)  # 5 not divisible for the 2x pool window... pooling the 10


def test_down_transition_3d():
    ch = [8, 16, 32]
    dt = DownTransition(3, ch, level=1)
    feats = [torch.randn(1, 8, 8, 16, 16), torch.randn(1, 16, 4, 8, 8)]
    assert dt(feats).shape == (1, 32, 2, 4, 4)


# ---------------------------------------------------------------------------
# Up transition
# ---------------------------------------------------------------------------


def test_up_transition_aggregates_and_doubles():
    ch = [16, 32, 64, 128, 256]
    ut = UpTransition(2, ch, level=2)
    # decoder outputs at levels 2,3,4 with extents 8,4,2
    feats = [torch.randn(1, 64, 8, 8), torch.randn(1, 128, 4, 4),
             torch.randn(1, 256, 2, 2)]
    out = ut(feats)
    assert out.shape == (1, 32, 16, 16)
    assert ut.expand.conv.weight.shape[0] == 64 + 128 + 256


def test_up_transition_bottom_boundary():
    ch = [16, 32, 64]
    ut = UpTransition(2, ch, level=2)
    out = ut([torch.randn(1, 64, 4, 4)])
    assert out.shape == (1, 32, 8, 8)


def test_up_transition_param_count():
    ch = [16, 32, 64]
    ut = UpTransition(2, ch, level=1)
    assert n_params(ut) == ut_params(ch, 1, 2) == conv_params(2, 96, 16, 2)


def test_up_transition_contract_errors():
    ch = [16, 32, 64]
    with pytest.raises(ConfigError):
        UpTransition(2, ch, level=0)
    ut = UpTransition(2, ch, level=1)
    with pytest.raises(ContractError):
        ut([torch.randn(1, 32, 8, 8)])  # deeper level missing


def test_down_then_up_restores_schedule():
    ch = [16, 32]
    dt = DownTransition(2, ch, level=0)
    ut = UpTransition(2, ch, level=1)
    x = torch.randn(1, 16, 16, 16)
    down = dt([x])
    up = ut([down])
    assert up.shape == x.shape


# ---------------------------------------------------------------------------
# property tests: schedules hold for arbitrary legal configs
# ---------------------------------------------------------------------------


@given(
    base=st.sampled_from([4, 8, 16]),
    levels=st.integers(2, 4),
    extent_pow=st.integers(4, 6),
)
@settings(max_examples=20, deadline=None)
def test_transition_schedules_property(base, levels, extent_pow):
    ch = [base * 2 ** i for i in range(levels)]
    extent = 2 ** extent_pow
    feats = _level_feats(ch, extent, 2, levels)
    for lev in range(levels - 1):
        dt = DownTransition(2, ch, level=lev)
        out = dt(feats[: lev + 1])
        assert out.shape[1] == ch[lev + 1]
        assert out.shape[2] == extent // (2 ** (lev + 1))
    for lev in range(levels - 1, 0, -1):
        ut = UpTransition(2, ch, level=lev)
        out = ut(feats[lev:])
        assert out.shape[1] == ch[lev - 1]
        assert out.shape[2] == extent // (2 ** (lev - 1))


@given(cin=st.sampled_from([8, 16, 24]), extra=st.sampled_from([0, 8, 16]))
@settings(max_examples=15, deadline=None)
def test_cell_param_arithmetic_property(cin, extra):
    cfg = UnitCellConfig(channels=cin, pairs=4, dims=2)
    cell = DenseCell(cfg, in_ch=cin + extra)
    assert n_params(cell) == cell_params(cin, 4, 4, 2, in_ch=cin + extra)
