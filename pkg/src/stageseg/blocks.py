"""Building blocks: stem, densely connected unit cells, and level transitions.

Everything here is shape-preserving or moves exactly one level up/down the
resolution pyramid. Channels at level l (0-based) follow base * 2**l; spatial
extents halve per level. Blocks work for 2D (N,C,H,W) and 3D (N,C,D,H,W)
according to their `dims`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ContractError, ShapeError


@dataclass(frozen=True)
class FeatureSpec:
    """Planned shape of a feature map: channel count + spatial extents."""

    channels: int
    extents: Tuple[int, ...]

    def __post_init__(self):
        if self.channels < 1:
            raise ConfigError("channels must be >= 1")
        if len(self.extents) not in (2, 3) or any(e < 1 for e in self.extents):
            raise ConfigError(f"bad spatial extents {self.extents}")

    @property
    def dims(self) -> int:
        return len(self.extents)

    def scaled(self, factor: float) -> "FeatureSpec":
        """Extents multiplied by a (possibly fractional) power of two."""
        new = []
        for e in self.extents:
            v = e * factor
            if v < 1 or v != int(v):
                raise ShapeError(f"extent {e} cannot be scaled by {factor}")
            new.append(int(v))
        return FeatureSpec(self.channels, tuple(new))

    def with_channels(self, channels: int) -> "FeatureSpec":
        return FeatureSpec(channels, self.extents)

    def validate(self, t: torch.Tensor, where: str = "") -> None:
        want = (self.channels, *self.extents)
        if tuple(t.shape[1:]) != want:
            raise ShapeError(f"{where or 'tensor'}: expected (N,{','.join(map(str, want))}), "
                             f"got {tuple(t.shape)}")


def _conv_cls(dims: int, transposed: bool = False):
    if dims == 2:
        return nn.ConvTranspose2d if transposed else nn.Conv2d
    if dims == 3:
        return nn.ConvTranspose3d if transposed else nn.Conv3d
    raise ConfigError(f"dims must be 2 or 3, got {dims}")


def _norm_cls(dims: int):
    return nn.BatchNorm2d if dims == 2 else nn.BatchNorm3d


class ConvUnit(nn.Module):
    """Convolution + per-channel batch norm + ReLU (norm/act optional)."""

    def __init__(self, dims: int, in_ch: int, out_ch: int, kernel: int,
                 stride: int = 1, transposed: bool = False,
                 norm: bool = True, act: bool = True):
        super().__init__()
        cls = _conv_cls(dims, transposed)
        padding = kernel // 2 if not transposed and stride == 1 else 0
        self.conv = cls(in_ch, out_ch, kernel_size=kernel, stride=stride,
                        padding=padding, bias=True)
        self.norm = _norm_cls(dims)(out_ch) if norm else None
        self.act = act

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.conv(x)
        if self.norm is not None:
            x = self.norm(x)
        if self.act:
            x = F.relu(x, inplace=True)
        return x


def max_pool(x: torch.Tensor, window: int) -> torch.Tensor:
    """Non-overlapping max pooling; extents must divide evenly."""
    for e in x.shape[2:]:
        if e % window:
            raise ShapeError(f"extent {e} not divisible by pool window {window}")
    fn = F.max_pool2d if x.ndim == 4 else F.max_pool3d
    return fn(x, kernel_size=window, stride=window)


def upsample(x: torch.Tensor, factor: int) -> torch.Tensor:
    """Bilinear/trilinear upsampling by an integer factor."""
    mode = "bilinear" if x.ndim == 4 else "trilinear"
    return F.interpolate(x, scale_factor=float(factor), mode=mode,
                         align_corners=False)


@dataclass(frozen=True)
class UnitCellConfig:
    channels: int
    pairs: int
    dims: int
    bottleneck_mult: int = 4  # width of each pointwise layer, in units of c

    def __post_init__(self):
        if self.channels % self.pairs:
            raise ConfigError(
                f"channels ({self.channels}) must divide evenly into "
                f"pairs ({self.pairs})")
        if self.dims not in (2, 3):
            raise ConfigError("dims must be 2 or 3")
        if self.bottleneck_mult < 1:
            raise ConfigError("bottleneck_mult must be >= 1")

    @property
    def growth(self) -> int:
        return self.channels // self.pairs


class DenseLayer(nn.Module):
    """One (pointwise bottleneck, spatial conv) pair emitting `growth` channels."""

    def __init__(self, cfg: UnitCellConfig, in_ch: int):
        super().__init__()
        wide = cfg.bottleneck_mult * cfg.channels
        self.pw = ConvUnit(cfg.dims, in_ch, wide, kernel=1)
        self.spatial = ConvUnit(cfg.dims, wide, cfg.growth, kernel=3)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.spatial(self.pw(x))


class DenseCell(nn.Module):
    """Shape-preserving densely connected cell.

    The input (vertical path, optionally concatenated with a lateral path by
    the caller) is first projected to the schedule width c; each internal
    layer then sees the concatenation of that projection and every previous
    layer's output, and the cell output is the concatenation of all layer
    outputs (c channels total).
    """

    def __init__(self, cfg: UnitCellConfig, in_ch: int, name: str = "cell"):
        super().__init__()
        self.cfg = cfg
        self.name = name
        self.in_channels = in_ch
        self.in_proj = ConvUnit(cfg.dims, in_ch, cfg.channels, kernel=1)
        layers = []
        for k in range(cfg.pairs):
            layers.append(DenseLayer(cfg, cfg.channels + k * cfg.growth))
        self.layers = nn.ModuleList(layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.in_channels:
            raise ShapeError(f"{self.name}: expected {self.in_channels} input "
                             f"channels, got {x.shape[1]}")
        feats = [self.in_proj(x)]
        outs = []
        for layer in self.layers:
            y = layer(torch.cat(feats, dim=1))
            feats.append(y)
            outs.append(y)
        return torch.cat(outs, dim=1)


class Stem(nn.Module):
    """Maps raw input channels to the level-0 schedule width, 3x3, same extent."""

    def __init__(self, dims: int, in_ch: int, out_ch: int):
        super().__init__()
        self.unit = ConvUnit(dims, in_ch, out_ch, kernel=3)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.unit(x)


class DownTransition(nn.Module):
    """Level l -> l+1: aggregate all encoder outputs of levels <= l, then
    halve extents with a strided convolution.

    Shallower outputs are max-pooled with window 2**gap so every term lands
    at the level-l extent before channel concatenation.
    """

    def __init__(self, dims: int, level_channels: Sequence[int], level: int):
        super().__init__()
        if not 0 <= level < len(level_channels) - 1:
            raise ConfigError(f"down transition needs a deeper level to exist "
                              f"(level={level}, L={len(level_channels)})")
        self.level = level
        agg = sum(level_channels[: level + 1])
        self.reduce = ConvUnit(dims, agg, level_channels[level + 1],
                               kernel=2, stride=2)

    def forward(self, outputs: List[torch.Tensor]) -> torch.Tensor:
        if len(outputs) != self.level + 1:
            raise ContractError(f"need outputs for levels 0..{self.level}, "
                                f"got {len(outputs)}")
        parts = []
        for k, f in enumerate(outputs):
            gap = self.level - k
            parts.append(max_pool(f, 2 ** gap) if gap else f)
        agg = torch.cat(parts, dim=1)
        if any(e % 2 for e in agg.shape[2:]):
            raise ShapeError(f"down transition at level {self.level}: extents "
                             f"{tuple(agg.shape[2:])} do not halve cleanly")
        return self.reduce(agg)


class UpTransition(nn.Module):
    """Level l -> l-1: aggregate decoder outputs of levels >= l, then double
    extents with a transposed convolution.

    Deeper outputs are upsampled by 2**gap before concatenation.
    """

    def __init__(self, dims: int, level_channels: Sequence[int], level: int):
        super().__init__()
        if not 0 < level < len(level_channels):
            raise ConfigError(f"up transition needs a shallower level to exist "
                              f"(level={level})")
        self.level = level
        self.num_levels = len(level_channels)
        agg = sum(level_channels[level:])
        self.expand = ConvUnit(dims, agg, level_channels[level - 1],
                               kernel=2, stride=2, transposed=True)

    def forward(self, outputs: List[torch.Tensor]) -> torch.Tensor:
        # outputs[k] is the decoder output at level (self.level + k)
        if len(outputs) != self.num_levels - self.level:
            raise ContractError(f"need outputs for levels {self.level}.."
                                f"{self.num_levels - 1}, got {len(outputs)}")
        parts = []
        for k, f in enumerate(outputs):
            parts.append(upsample(f, 2 ** k) if k else f)
        return self.expand(torch.cat(parts, dim=1))


def assert_finite(t: torch.Tensor, where: str) -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise ShapeError(f"{where}: non-finite values in feature map")
    return t
