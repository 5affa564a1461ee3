"""Full segmentation network: stem -> S x (encoder, decoder) -> fused head.

Modules run in the order E1, D1, E2, D2, ...; a fusion connector sits between
every consecutive pair and draws from all modules before it. Ablation
variants differ only in which transition/fusion flavors are instantiated, so
parameter names nest across variants (v1 names are a subset of v4's, v6's of
v7's).
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn

from .blocks import (
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
from .errors import ConfigError, ShapeError
from .fusion import MsfUnit, PointwiseFusion, PyramidFusion

# (use_down_transitions, use_up_transitions, fusion flavor)
VARIANT_FLAGS: Dict[str, Tuple[bool, bool, str]] = {
    "v1": (False, False, "skip"),
    "v2": (True, False, "skip"),
    "v3": (False, True, "skip"),
    "v4": (True, True, "skip"),
    "v5": (False, False, "msf_pw"),
    "v6": (False, False, "msf_pf"),
    "v7": (True, True, "msf_pf"),
    "full": (True, True, "msf_pf"),
}


@dataclass(frozen=True)
class NetworkConfig:
    levels: int = 5
    stages: int = 2
    base_channels: int = 16
    dims: int = 2
    input_extents: Tuple[int, ...] = (512, 512)
    input_channels: int = 1
    num_classes: int = 1
    variant: str = "full"
    pairs_per_cell: Optional[int] = None   # default: 4 in 2D, 2 in 3D
    bottleneck_mult: Optional[int] = None  # default: 4 in 2D, 6 in 3D

    def __post_init__(self):
        problems = []
        if self.levels < 2:
            problems.append("levels must be >= 2")
        if self.stages < 1:
            problems.append("stages must be >= 1")
        if self.base_channels < 4 or self.base_channels % 4:
            problems.append("base_channels must be a positive multiple of 4")
        if self.dims not in (2, 3):
            problems.append("dims must be 2 or 3")
        if len(self.input_extents) != self.dims:
            problems.append(f"input_extents must have {self.dims} entries")
        shrink = 2 ** (self.levels - 1)
        for e in self.input_extents:
            if e % shrink:
                problems.append(f"input extent {e} not divisible by 2^(levels-1)={shrink}")
            elif e // shrink < 2:
                problems.append(f"input extent {e} leaves the deepest level below 2")
        if self.input_channels < 1:
            problems.append("input_channels must be >= 1")
        if self.num_classes < 1:
            problems.append("num_classes must be >= 1")
        if self.variant not in VARIANT_FLAGS:
            problems.append(f"unknown variant {self.variant!r} "
                            f"(expected one of {sorted(VARIANT_FLAGS)})")
        if self.pairs and self.base_channels % self.pairs:
            problems.append("base_channels must divide evenly into cell pairs")
        if problems:
            raise ConfigError("; ".join(problems))

    @property
    def pairs(self) -> int:
        if self.pairs_per_cell is not None:
            return self.pairs_per_cell
        return 4 if self.dims == 2 else 2

    @property
    def mult(self) -> int:
        if self.bottleneck_mult is not None:
            return self.bottleneck_mult
        return 4 if self.dims == 2 else 6

    @property
    def flags(self) -> Tuple[bool, bool, str]:
        return VARIANT_FLAGS[self.variant]

    @property
    def level_channels(self) -> List[int]:
        return [self.base_channels * 2 ** i for i in range(self.levels)]

    def level_extents(self, level: int) -> Tuple[int, ...]:
        return tuple(e // 2 ** level for e in self.input_extents)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_extents"] = list(self.input_extents)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        d["input_extents"] = tuple(d["input_extents"])
        return cls(**d)


def _vertical_width(cfg: NetworkConfig, module_idx: int, level: int) -> int:
    use_dt, use_ut, _ = cfg.flags
    ch = cfg.level_channels
    if module_idx % 2 == 0:  # encoder
        if level == 0:
            return ch[0]
        return ch[level] if use_dt else ch[level - 1]
    if level == cfg.levels - 1:  # decoder entry from same-stage encoder
        return ch[level]
    return ch[level] if use_ut else ch[level + 1]


class StageModule(nn.Module):
    """One encoder or decoder: a cell per level plus its transitions."""

    def __init__(self, cfg: NetworkConfig, module_idx: int):
        super().__init__()
        self.cfg = cfg
        self.module_idx = module_idx
        self.is_encoder = module_idx % 2 == 0
        use_dt, use_ut, _ = cfg.flags
        ch = cfg.level_channels
        role = "enc" if self.is_encoder else "dec"
        stage = module_idx // 2 + 1
        cells = []
        for lev in range(cfg.levels):
            cell_cfg = UnitCellConfig(channels=ch[lev], pairs=cfg.pairs,
                                      dims=cfg.dims, bottleneck_mult=cfg.mult)
            in_ch = _vertical_width(cfg, module_idx, lev)
            if module_idx >= 1:
                in_ch += ch[lev]  # lateral path
            cells.append(DenseCell(cell_cfg, in_ch,
                                   name=f"{role}{stage}.level{lev}"))
        self.cells = nn.ModuleList(cells)
        if self.is_encoder and use_dt:
            self.down = nn.ModuleList(
                DownTransition(cfg.dims, ch, level=lev)
                for lev in range(cfg.levels - 1))
        if not self.is_encoder and use_ut:
            self.up = nn.ModuleList(
                UpTransition(cfg.dims, ch, level=lev)
                for lev in range(cfg.levels - 1, 0, -1))

    def forward(self, entry: torch.Tensor,
                laterals: Optional[Sequence[torch.Tensor]]) -> List[torch.Tensor]:
        use_dt, use_ut, _ = self.cfg.flags
        L = self.cfg.levels
        outputs: List[Optional[torch.Tensor]] = [None] * L
        order = range(L) if self.is_encoder else range(L - 1, -1, -1)
        vertical = entry
        for step, lev in enumerate(order):
            x = vertical
            if laterals is not None:
                x = torch.cat([x, laterals[lev]], dim=1)
            outputs[lev] = self.cells[lev](x)
            if step == L - 1:
                break
            if self.is_encoder:
                if use_dt:
                    vertical = self.down[lev]([outputs[k] for k in range(lev + 1)])
                else:
                    vertical = max_pool(outputs[lev], 2)
            else:
                if use_ut:
                    ut = self.up[L - 1 - lev]
                    vertical = ut([outputs[k] for k in range(lev, L)])
                else:
                    vertical = upsample(outputs[lev], 2)
        return outputs  # type: ignore[return-value]


class SegNet(nn.Module):
    """Multi-stage encoder-decoder with fused head; output in [0, 1]."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        use_dt, use_ut, fusion = cfg.flags
        ch = cfg.level_channels
        self.stem = Stem(cfg.dims, cfg.input_channels, cfg.base_channels)
        self.modules_ = nn.ModuleList(
            StageModule(cfg, m) for m in range(2 * cfg.stages))
        if fusion in ("msf_pf", "msf_pw"):
            mode = "pf" if fusion == "msf_pf" else "pw"
            connectors = []
            for j in range(1, 2 * cfg.stages):
                per_level = nn.ModuleList(
                    MsfUnit(cfg.dims, ch, target_level=lev, n_modules=j,
                            mode=mode, min_extent=min(cfg.level_extents(lev)))
                    for lev in range(cfg.levels))
                connectors.append(per_level)
            self.connectors = nn.ModuleList(connectors)
        head_in = cfg.stages * cfg.base_channels
        if fusion == "msf_pf":
            self.head_fuse = PyramidFusion(cfg.dims, head_in, cfg.base_channels,
                                           min_extent=min(cfg.input_extents))
        else:
            self.head_fuse = PointwiseFusion(cfg.dims, head_in, cfg.base_channels)
        self.mask = ConvUnit(cfg.dims, cfg.base_channels, cfg.num_classes,
                             kernel=3, norm=False, act=False)

    def _check_input(self, x: torch.Tensor) -> None:
        want = (self.cfg.input_channels, *self.cfg.input_extents)
        if x.ndim != self.cfg.dims + 2 or tuple(x.shape[1:]) != want:
            raise ShapeError(f"expected input (N,{','.join(map(str, want))}), "
                             f"got {tuple(x.shape)}")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self._check_input(x)
        _, _, fusion = self.cfg.flags
        stem_out = self.stem(x)
        history: List[List[torch.Tensor]] = []
        for m, module in enumerate(self.modules_):
            if m == 0:
                entry, laterals = stem_out, None
            else:
                prev = history[m - 1]
                entry = prev[0] if module.is_encoder else prev[-1]
                if fusion == "skip":
                    laterals = prev
                else:
                    laterals = [self.connectors[m - 1][lev](history)
                                for lev in range(self.cfg.levels)]
            history.append(module(entry, laterals))
        top = torch.cat([history[2 * s + 1][0] for s in range(self.cfg.stages)],
                        dim=1)
        logits = self.mask(self.head_fuse(top))
        if self.cfg.num_classes == 1:
            return torch.sigmoid(logits)
        return torch.softmax(logits, dim=1)


def build(cfg: NetworkConfig, seed: Optional[int] = None) -> SegNet:
    """Construct a network; seeding makes initialization reproducible."""
    if seed is not None:
        torch.manual_seed(seed)
    model = SegNet(cfg)
    for m in model.modules():
        if isinstance(m, (nn.Conv2d, nn.Conv3d, nn.ConvTranspose2d,
                          nn.ConvTranspose3d)):
            nn.init.kaiming_normal_(m.weight, mode="fan_in",
                                    nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
    return model


def build_variant(tag: str, cfg: NetworkConfig,
                  seed: Optional[int] = None) -> SegNet:
    """Same config, different wiring flavor (v1..v7 / full)."""
    tag = tag.lower()
    if tag not in VARIANT_FLAGS:
        raise ConfigError(f"unknown variant {tag!r}")
    return build(NetworkConfig(**{**cfg.to_dict(), "variant": tag}), seed=seed)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def per_module_breakdown(model: SegNet) -> Dict[str, int]:
    """Parameter count per top-level piece; values sum to the total."""
    out: Dict[str, int] = {}
    for name, child in model.named_children():
        n = count_parameters(child)
        if isinstance(child, nn.ModuleList):
            for i, sub in enumerate(child):
                out[f"{name}.{i}"] = count_parameters(sub)
        else:
            out[name] = n
    return out


# ---------------------------------------------------------------------------
# analytic shape planning (no tensors, any extent)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PlanEntry:
    name: str          # e.g. "enc1.level0", "dt1.level2", "fuse2.level1"
    kind: str          # stem/cell/dt/ut/fuse/head
    spec: FeatureSpec


def plan_shapes(cfg: NetworkConfig) -> List[PlanEntry]:
    """Every named intermediate output's planned (channels, extents)."""
    use_dt, use_ut, fusion = cfg.flags
    ch = cfg.level_channels
    L, S = cfg.levels, cfg.stages
    entries = [PlanEntry("stem", "stem",
                         FeatureSpec(cfg.base_channels, cfg.input_extents))]
    for m in range(2 * S):
        stage = m // 2 + 1
        role = "enc" if m % 2 == 0 else "dec"
        for lev in range(L):
            entries.append(PlanEntry(
                f"{role}{stage}.level{lev}", "cell",
                FeatureSpec(ch[lev], cfg.level_extents(lev))))
        if role == "enc" and use_dt:
            for lev in range(L - 1):
                entries.append(PlanEntry(
                    f"dt{stage}.level{lev}", "dt",
                    FeatureSpec(ch[lev + 1], cfg.level_extents(lev + 1))))
        if role == "dec" and use_ut:
            for lev in range(L - 1, 0, -1):
                entries.append(PlanEntry(
                    f"ut{stage}.level{lev}", "ut",
                    FeatureSpec(ch[lev - 1], cfg.level_extents(lev - 1))))
    if fusion in ("msf_pf", "msf_pw"):
        for j in range(1, 2 * S):
            for lev in range(L):
                entries.append(PlanEntry(
                    f"fuse{j}.level{lev}", "fuse",
                    FeatureSpec(ch[lev], cfg.level_extents(lev))))
    entries.append(PlanEntry("head", "head",
                             FeatureSpec(cfg.num_classes, cfg.input_extents)))
    return entries


def verify_shapes(model: SegNet, batch: int = 1) -> List[str]:
    """Run a real forward pass and check every module output against the plan.

    Returns the list of verified plan-entry names; raises ShapeError on the
    first mismatch. Meant for desk-scale extents.
    """
    cfg = model.cfg
    plan = {e.name: e.spec for e in plan_shapes(cfg)}
    seen: Dict[str, Tuple[int, ...]] = {}
    hooks = []

    def grab(name):
        def hook(_mod, _inp, out):
            seen[name] = tuple(out.shape[1:])
        return hook

    hooks.append(model.stem.register_forward_hook(grab("stem")))
    for m, module in enumerate(model.modules_):
        stage = m // 2 + 1
        role = "enc" if m % 2 == 0 else "dec"
        for lev, cell in enumerate(module.cells):
            hooks.append(cell.register_forward_hook(
                grab(f"{role}{stage}.level{lev}")))
        if hasattr(module, "down"):
            for lev, dt in enumerate(module.down):
                hooks.append(dt.register_forward_hook(
                    grab(f"dt{stage}.level{lev}")))
        if hasattr(module, "up"):
            for k, ut in enumerate(module.up):
                lev = cfg.levels - 1 - k
                hooks.append(ut.register_forward_hook(
                    grab(f"ut{stage}.level{lev}")))
    if hasattr(model, "connectors"):
        for j, per_level in enumerate(model.connectors, start=1):
            for lev, unit in enumerate(per_level):
                hooks.append(unit.register_forward_hook(
                    grab(f"fuse{j}.level{lev}")))

    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            x = torch.zeros(batch, cfg.input_channels, *cfg.input_extents)
            out = model(x)
        seen["head"] = tuple(out.shape[1:])
    finally:
        for h in hooks:
            h.remove()
        model.train(was_training)

    verified = []
    for name, shape in seen.items():
        want = (plan[name].channels, *plan[name].extents)
        if shape != want:
            raise ShapeError(f"{name}: planned {want}, observed {shape}")
        verified.append(name)
    missing = set(plan) - set(seen)
    if missing:
        raise ShapeError(f"plan entries never observed: {sorted(missing)}")
    return verified
