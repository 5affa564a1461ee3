"""Inter-stage multi-scale fusion and the pyramid fusion bottleneck.

An MSF connector sits between two consecutive encoder/decoder modules. For a
target level it concatenates the same-level outputs of every preceding
module, rescales each level's aggregate to the target level's extent
(max-pool finer levels, interpolate coarser ones), channel-concatenates the
lot, and squeezes the result back to the schedule width — either through the
four-path pyramid fusion block or through a single pointwise convolution.
"""

from __future__ import annotations

import warnings
from typing import List, Optional, Sequence

import torch
import torch.nn as nn

from .blocks import ConvUnit, max_pool, upsample
from .errors import ConfigError, ContractError, ShapeError

PF_FACTORS = (0.25, 0.5, 2, 4)


class PfPath(nn.Module):
    """Scale by `factor`, convolve to out_ch/4..., undo the scaling.

    Down paths pool then interpolate back; up paths interpolate then pool
    back, so extents are restored exactly for any factor in PF_FACTORS.
    """

    def __init__(self, dims: int, channels: int, factor: float):
        super().__init__()
        if factor not in (0.25, 0.5, 2.0, 4.0, 2, 4):
            raise ConfigError(f"unsupported pyramid factor {factor}")
        self.factor = float(factor)
        self.conv = ConvUnit(dims, channels, channels // 4, kernel=3)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.factor < 1:
            window = int(round(1 / self.factor))
            y = self.conv(max_pool(x, window))
            return upsample(y, window)
        window = int(self.factor)
        y = self.conv(upsample(x, window))
        return max_pool(y, window)


class PyramidFusion(nn.Module):
    """Reduce to `out_ch`, run four parallel scale paths, fuse back.

    The concatenation of the four path outputs (out_ch/4 each) with the
    reduced map always carries exactly 2*out_ch channels. When the planned
    spatial extent is too small for the 1/4 path (< 4), that path is
    replaced by an extra, independently parameterized 1/2 path.
    """

    def __init__(self, dims: int, in_ch: int, out_ch: int,
                 min_extent: Optional[int] = None):
        super().__init__()
        if out_ch % 4:
            raise ConfigError(f"pyramid fusion width {out_ch} must divide by 4")
        factors = list(PF_FACTORS)
        if min_extent is not None and min_extent < 4:
            if min_extent < 2:
                raise ConfigError("pyramid fusion needs spatial extents >= 2")
            factors[0] = 0.5
            warnings.warn(
                f"pyramid fusion at extent {min_extent}: 1/4-scale path "
                f"replaced by a second 1/2-scale path", RuntimeWarning)
        self.reduce = ConvUnit(dims, in_ch, out_ch, kernel=1)
        self.paths = nn.ModuleList(PfPath(dims, out_ch, f) for f in factors)
        self.project = ConvUnit(dims, 2 * out_ch, out_ch, kernel=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        base = self.reduce(x)
        parts = [path(base) for path in self.paths]
        parts.append(base)
        return self.project(torch.cat(parts, dim=1))


class PointwiseFusion(nn.Module):
    """The cheap alternative: a single pointwise squeeze of the aggregate."""

    def __init__(self, dims: int, in_ch: int, out_ch: int,
                 min_extent: Optional[int] = None):
        super().__init__()
        self.fuse = ConvUnit(dims, in_ch, out_ch, kernel=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fuse(x)


def msf_aggregate(module_outputs: Sequence[Sequence[torch.Tensor]],
                  target_level: int) -> torch.Tensor:
    """Gather all preceding modules' per-level outputs at one level's scale.

    module_outputs[m][l] is module m's output at level l. Per level, maps
    are channel-concatenated across modules, rescaled to the target level's
    extent (window 2**|level gap|), and finally concatenated across levels.
    """
    if not module_outputs:
        raise ContractError("fusion needs at least one preceding module")
    n_levels = len(module_outputs[0])
    if any(len(levels) != n_levels for levels in module_outputs):
        raise ContractError("every preceding module must supply every level")
    if not 0 <= target_level < n_levels:
        raise ContractError(f"target level {target_level} out of range")
    parts = []
    for lev in range(n_levels):
        same_scale = torch.cat([m[lev] for m in module_outputs], dim=1)
        gap = target_level - lev
        if gap > 0:
            same_scale = max_pool(same_scale, 2 ** gap)
        elif gap < 0:
            same_scale = upsample(same_scale, 2 ** (-gap))
        parts.append(same_scale)
    ref = parts[target_level].shape[2:]
    for p in parts:
        if p.shape[2:] != ref:
            raise ShapeError("aggregated levels disagree on spatial extents; "
                             "inputs are not a power-of-two pyramid")
    return torch.cat(parts, dim=1)


class MsfUnit(nn.Module):
    """One fusion connector output at one level: aggregate then squeeze."""

    def __init__(self, dims: int, level_channels: Sequence[int],
                 target_level: int, n_modules: int, mode: str = "pf",
                 min_extent: Optional[int] = None):
        super().__init__()
        if n_modules < 1:
            raise ConfigError("connector needs at least one preceding module")
        if mode not in ("pf", "pw"):
            raise ConfigError(f"unknown fusion mode {mode!r}")
        self.target_level = target_level
        self.n_modules = n_modules
        agg_ch = n_modules * sum(level_channels)
        fuse_cls = PyramidFusion if mode == "pf" else PointwiseFusion
        self.fuse = fuse_cls(dims, agg_ch, level_channels[target_level],
                             min_extent=min_extent)

    def forward(self, module_outputs: Sequence[Sequence[torch.Tensor]]) -> torch.Tensor:
        if len(module_outputs) != self.n_modules:
            raise ContractError(f"connector expects {self.n_modules} preceding "
                                f"modules, got {len(module_outputs)}")
        return self.fuse(msf_aggregate(module_outputs, self.target_level))
