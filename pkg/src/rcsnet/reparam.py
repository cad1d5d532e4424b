"""Structural reparameterization: collapse a three-branch training block
(3x3 conv+BN, 1x1 conv+BN, optional identity BN) into one 3x3 conv whose
forward output matches the branch sum.

All folding arithmetic runs in float64 and is rounded to float32 once at
the end; the forwards themselves stay float32. Branch summation order is
fixed (3x3, then 1x1, then identity) for bit reproducibility.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ShapeError, StateError
from .tensor_ops import BNParams, ConvParams, batchnorm_infer, conv2d

TRAIN = "train"
DEPLOYED = "deployed"


@dataclass(frozen=True)
class RepVGGBlock:
    """Dual-mode unit: three parallel branches when training-shaped, a single
    fused 3x3 conv once deployed.

    The identity branch exists exactly when c_in == c_out and stride == 1;
    stride-2 blocks (downsampling) never carry one. Deployed blocks drop the
    branch fields and keep only ``fused``.
    """

    branch3x3: Optional[tuple[ConvParams, BNParams]]
    branch1x1: Optional[tuple[ConvParams, BNParams]]
    branch_id: Optional[BNParams]
    stride: int = 1
    mode: str = TRAIN
    fused: Optional[ConvParams] = None

    def __post_init__(self):
        if self.mode == TRAIN:
            if self.branch3x3 is None or self.branch1x1 is None:
                raise ShapeError("train-mode block needs 3x3 and 1x1 branches")
            if self.fused is not None:
                raise StateError("train-mode block must not carry a fused conv")
            c3, b3 = self.branch3x3
            c1, b1 = self.branch1x1
            if c3.k != 3 or c3.padding != 1:
                raise ShapeError("3x3 branch must have k=3, padding=1")
            if c1.k != 1 or c1.padding != 0:
                raise ShapeError("1x1 branch must have k=1, padding=0")
            if (c3.c_in, c3.c_out) != (c1.c_in, c1.c_out):
                raise ShapeError("branches disagree on channel counts")
            if c3.stride != self.stride or c1.stride != self.stride:
                raise ShapeError("branches disagree on stride")
            if b3.c != c3.c_out or b1.c != c1.c_out:
                raise ShapeError("branch BN width does not match conv c_out")
            wants_id = c3.c_in == c3.c_out and self.stride == 1
            if wants_id != (self.branch_id is not None):
                raise ShapeError(
                    "identity branch present iff c_in == c_out and stride == 1"
                )
            if self.branch_id is not None and self.branch_id.c != c3.c_out:
                raise ShapeError("identity BN width does not match c_out")
        elif self.mode == DEPLOYED:
            if self.fused is None:
                raise StateError("deployed block needs a fused conv")
            if self.fused.k != 3 or self.fused.padding != 1:
                raise ShapeError("fused conv must be k=3, padding=1")
        else:
            raise StateError(f"unknown block mode {self.mode!r}")

    @property
    def c_in(self) -> int:
        if self.mode == DEPLOYED:
            return self.fused.c_in
        return self.branch3x3[0].c_in

    @property
    def c_out(self) -> int:
        if self.mode == DEPLOYED:
            return self.fused.c_out
        return self.branch3x3[0].c_out

    @property
    def size(self) -> int:
        """Stored reals across all live branches."""
        if self.mode == DEPLOYED:
            return self.fused.size
        total = sum(c.size + b.size for c, b in (self.branch3x3, self.branch1x1))
        if self.branch_id is not None:
            total += self.branch_id.size
        return total


def _fold_scale(b: BNParams) -> np.ndarray:
    return b.gamma.astype(np.float64) / np.sqrt(b.var.astype(np.float64) + b.eps)


def fuse_conv_bn(p: ConvParams, b: BNParams) -> ConvParams:
    """Fold BN statistics into the preceding conv.

    kernel'[o] = kernel[o] * gamma[o]/sqrt(var[o]+eps)
    bias'[o]   = beta[o] + (bias[o] - mean[o]) * gamma[o]/sqrt(var[o]+eps)

    conv2d(x, result) == batchnorm_infer(conv2d(x, p), b) for any x.
    """
    if p.c_out != b.c:
        raise ShapeError(f"conv c_out {p.c_out} does not match BN width {b.c}")
    scale = _fold_scale(b)
    kernel = (p.kernel.astype(np.float64) * scale[:, None, None, None]).astype(np.float32)
    bias = (
        b.beta.astype(np.float64)
        + (p.bias.astype(np.float64) - b.mean.astype(np.float64)) * scale
    ).astype(np.float32)
    return ConvParams(kernel, bias, stride=p.stride, padding=p.padding)


def pad_1x1_to_3x3(p: ConvParams) -> ConvParams:
    """Embed a 1x1 kernel at the center of a zero 3x3 kernel.

    The result, run with padding bumped by 1, is forward-equivalent to the
    original at any stride.
    """
    if p.k != 1:
        raise ShapeError(f"pad_1x1_to_3x3 needs a 1x1 kernel, got k={p.k}")
    kernel = np.zeros((p.c_out, p.c_in, 3, 3), dtype=np.float32)
    kernel[:, :, 1, 1] = p.kernel[:, :, 0, 0]
    return ConvParams(kernel, p.bias.copy(), stride=p.stride, padding=p.padding + 1)


def identity_to_3x3(c: int, b: BNParams) -> ConvParams:
    """Express an identity branch's BN as a Dirac-center 3x3 conv."""
    if b.c != c:
        raise ShapeError(f"identity BN width {b.c} does not match channels {c}")
    scale = _fold_scale(b)
    kernel = np.zeros((c, c, 3, 3), dtype=np.float32)
    kernel[np.arange(c), np.arange(c), 1, 1] = scale.astype(np.float32)
    bias = (b.beta.astype(np.float64) - b.mean.astype(np.float64) * scale).astype(np.float32)
    return ConvParams(kernel, bias, stride=1, padding=1)


def fuse_block(blk: RepVGGBlock) -> ConvParams:
    """Sum the three lifted branches into one 3x3 conv (pre-activation
    forward equivalent to the branch sum)."""
    if blk.mode != TRAIN:
        raise StateError("block is already deployed")
    f3 = fuse_conv_bn(*blk.branch3x3)
    f1 = pad_1x1_to_3x3(fuse_conv_bn(*blk.branch1x1))
    kernel = f3.kernel.astype(np.float64) + f1.kernel.astype(np.float64)
    bias = f3.bias.astype(np.float64) + f1.bias.astype(np.float64)
    if blk.branch_id is not None:
        fid = identity_to_3x3(blk.c_out, blk.branch_id)
        kernel += fid.kernel.astype(np.float64)
        bias += fid.bias.astype(np.float64)
    return ConvParams(
        kernel.astype(np.float32), bias.astype(np.float32), stride=blk.stride, padding=1
    )


def deploy_block(blk: RepVGGBlock) -> RepVGGBlock:
    """Return the deployed twin: fused conv only, branches discarded."""
    fused = fuse_block(blk)  # raises StateError if already deployed
    return RepVGGBlock(None, None, None, stride=blk.stride, mode=DEPLOYED, fused=fused)


def block_forward(x: np.ndarray, blk: RepVGGBlock) -> np.ndarray:
    """Pre-activation forward through the block in its own mode."""
    if blk.mode == DEPLOYED:
        return conv2d(x, blk.fused)
    c3, b3 = blk.branch3x3
    c1, b1 = blk.branch1x1
    out = batchnorm_infer(conv2d(x, c3), b3)
    out = out + batchnorm_infer(conv2d(x, c1), b1)
    if blk.branch_id is not None:
        out = out + batchnorm_infer(x, blk.branch_id)
    return out


def make_block(
    c_in: int,
    c_out: int,
    stride: int,
    conv3: ConvParams,
    bn3: BNParams,
    conv1: ConvParams,
    bn1: BNParams,
    bn_id: Optional[BNParams],
) -> RepVGGBlock:
    """Assemble a train-mode block, shape-checked by the dataclass."""
    blk = RepVGGBlock(
        branch3x3=(conv3, bn3), branch1x1=(conv1, bn1), branch_id=bn_id, stride=stride
    )
    if (blk.c_in, blk.c_out) != (c_in, c_out):
        raise ShapeError(
            f"block built for {c_in}->{c_out} but branches give {blk.c_in}->{blk.c_out}"
        )
    return blk
