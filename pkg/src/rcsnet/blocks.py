"""Composite units: RCS (split / RepVGG half / concat / shuffle) and
RCS-OSA (n stacked RCS with exactly three feature cascades aggregated once).
"""

from dataclasses import dataclass, replace

import numpy as np

from .errors import ShapeError, StateError
from .reparam import DEPLOYED, TRAIN, RepVGGBlock, block_forward, deploy_block
from .tensor_ops import (
    ConvParams,
    activation,
    channel_shuffle,
    channel_split,
    concat_channels,
    conv2d,
)


@dataclass(frozen=True)
class RCSUnit:
    """Channel-preserving unit: RepVGG on one split half, shuffle groups=2."""

    block: RepVGGBlock
    shuffle_groups: int = 2

    def __post_init__(self):
        if self.block.stride != 1:
            raise ShapeError("RCS block must have stride 1")
        if self.block.c_in != self.block.c_out:
            raise ShapeError("RCS block must preserve channel count")

    @property
    def channels(self) -> int:
        """Unit input/output channel count (twice the block's width)."""
        return 2 * self.block.c_in

    @property
    def mode(self) -> str:
        return self.block.mode

    @property
    def size(self) -> int:
        return self.block.size


@dataclass(frozen=True)
class OSAModule:
    """n stacked RCS units plus a 1x1 aggregation conv over three cascades.

    The cascade taps are the module input, the midpoint unit output
    (unit max(1, n//2), 1-based; for n=1 the midpoint and final coincide)
    and the final unit output, so the aggregate conv always sees 3c
    channels and maps back to c.
    """

    units: tuple[RCSUnit, ...]
    aggregate: ConvParams

    def __post_init__(self):
        if len(self.units) < 1:
            raise ShapeError("OSA module needs n >= 1 stacked units")
        c = self.units[0].channels
        if any(u.channels != c for u in self.units):
            raise ShapeError("OSA units disagree on channel count")
        if self.aggregate.k != 1 or self.aggregate.stride != 1 or self.aggregate.padding != 0:
            raise ShapeError("aggregate conv must be 1x1, stride 1, padding 0")
        if self.aggregate.c_in != 3 * c or self.aggregate.c_out != c:
            raise ShapeError(
                f"aggregate conv must map 3*{c} -> {c}, got "
                f"{self.aggregate.c_in} -> {self.aggregate.c_out}"
            )
        modes = {u.mode for u in self.units}
        if len(modes) != 1:
            raise StateError("OSA units must share a mode")

    @property
    def n(self) -> int:
        return len(self.units)

    @property
    def channels(self) -> int:
        return self.units[0].channels

    @property
    def midpoint(self) -> int:
        """1-based index of the midpoint cascade tap."""
        return max(1, self.n // 2)

    @property
    def mode(self) -> str:
        return self.units[0].mode

    @property
    def size(self) -> int:
        return sum(u.size for u in self.units) + self.aggregate.size


def rcs_forward(x: np.ndarray, unit: RCSUnit) -> np.ndarray:
    """Split, RepVGG+activation on the first half, concat, shuffle."""
    if x.shape[1] != unit.channels:
        raise ShapeError(f"input has {x.shape[1]} channels, unit expects {unit.channels}")
    a, b = channel_split(x)
    a = activation(block_forward(a, unit.block))
    return channel_shuffle(concat_channels(a, b), unit.shuffle_groups)


def rcs_osa_forward(x: np.ndarray, mod: OSAModule) -> np.ndarray:
    """Run the unit stack, aggregate the three cascade taps once."""
    if x.shape[1] != mod.channels:
        raise ShapeError(f"input has {x.shape[1]} channels, module expects {mod.channels}")
    taps = [x]
    feat = x
    for i, unit in enumerate(mod.units, start=1):
        feat = rcs_forward(feat, unit)
        if i == mod.midpoint:
            taps.append(feat)
    taps.append(feat)  # n=1: midpoint == final, tapped twice by design
    cascade = concat_channels(concat_channels(taps[0], taps[1]), taps[2])
    return activation(conv2d(cascade, mod.aggregate))


def downsample_forward(x: np.ndarray, blk: RepVGGBlock) -> np.ndarray:
    """Stride-2 RepVGG (no identity branch) with activation; spatial ceil-halved."""
    if blk.stride != 2:
        raise ShapeError("downsample block must have stride 2")
    if blk.mode == TRAIN and blk.branch_id is not None:
        raise ShapeError("downsample block must not carry an identity branch")
    return activation(block_forward(x, blk))


def convert_to_deployed(obj):
    """Fuse every embedded RepVGG block; returns a new value of the same type."""
    if isinstance(obj, RepVGGBlock):
        return deploy_block(obj)
    if isinstance(obj, RCSUnit):
        if obj.mode == DEPLOYED:
            raise StateError("unit is already deployed")
        return replace(obj, block=deploy_block(obj.block))
    if isinstance(obj, OSAModule):
        if obj.mode == DEPLOYED:
            raise StateError("module is already deployed")
        return replace(obj, units=tuple(replace(u, block=deploy_block(u.block)) for u in obj.units))
    raise TypeError(f"cannot convert {type(obj).__name__}")
