"""Shared randomized fixtures for block/unit/module construction.

Distribution contract (keeps the 1e-4 fusion tolerance meaningful):
conv weights and biases uniform in [-1, 1]; BN gamma/beta/mean uniform in
[-1, 1]; BN var uniform in [0.04, 2.0], comfortably above the 1e-3 floor
so per-channel scales stay O(1).
"""

import numpy as np

from rcsnet.blocks import OSAModule, RCSUnit
from rcsnet.model import ModelConfig, nano_config
from rcsnet.analysis import AnchorSet
from rcsnet.model import PAPER_ANCHORS
from rcsnet.reparam import RepVGGBlock
from rcsnet.tensor_ops import BNParams, ConvParams

VAR_RANGE = (0.04, 2.0)


def rand_tensor(rng, n, c, h, w, lo=-1.0, hi=1.0):
    return rng.uniform(lo, hi, (n, c, h, w)).astype(np.float32)


def rand_conv(rng, ci, co, k, stride=1, padding=None):
    if padding is None:
        padding = 1 if k == 3 else 0
    kernel = rng.uniform(-1, 1, (co, ci, k, k)).astype(np.float32)
    bias = rng.uniform(-1, 1, co).astype(np.float32)
    return ConvParams(kernel, bias, stride=stride, padding=padding)


def rand_bn(rng, c):
    return BNParams(
        gamma=rng.uniform(-1, 1, c).astype(np.float32),
        beta=rng.uniform(-1, 1, c).astype(np.float32),
        mean=rng.uniform(-1, 1, c).astype(np.float32),
        var=rng.uniform(*VAR_RANGE, c).astype(np.float32),
    )


def identity_bn(c, eps=1e-5):
    """Statistics that make inference BN the identity map."""
    return BNParams(
        gamma=np.ones(c, np.float32),
        beta=np.zeros(c, np.float32),
        mean=np.zeros(c, np.float32),
        var=np.full(c, 1.0 - eps, np.float32),
        eps=eps,
    )


def zero_conv(ci, co, k, stride=1, padding=None):
    if padding is None:
        padding = 1 if k == 3 else 0
    return ConvParams(
        np.zeros((co, ci, k, k), np.float32), np.zeros(co, np.float32),
        stride=stride, padding=padding,
    )


def rand_block(rng, ci, co, stride=1):
    bn_id = rand_bn(rng, co) if (ci == co and stride == 1) else None
    return RepVGGBlock(
        branch3x3=(rand_conv(rng, ci, co, 3, stride=stride), rand_bn(rng, co)),
        branch1x1=(rand_conv(rng, ci, co, 1, stride=stride), rand_bn(rng, co)),
        branch_id=bn_id,
        stride=stride,
    )


def scaled_conv(rng, ci, co, k, stride=1, padding=None):
    """Fan-in-scaled weights, as the model initializer draws them."""
    if padding is None:
        padding = 1 if k == 3 else 0
    bound = 1.0 / np.sqrt(ci * k * k)
    kernel = rng.uniform(-bound, bound, (co, ci, k, k)).astype(np.float32)
    bias = rng.uniform(-bound, bound, co).astype(np.float32)
    return ConvParams(kernel, bias, stride=stride, padding=padding)


def scaled_bn(rng, c):
    """Trained-network-like statistics: scales stay O(1)."""
    return BNParams(
        gamma=rng.uniform(0.5, 1.5, c).astype(np.float32),
        beta=rng.uniform(-0.5, 0.5, c).astype(np.float32),
        mean=rng.uniform(-0.5, 0.5, c).astype(np.float32),
        var=rng.uniform(0.25, 2.0, c).astype(np.float32),
    )


def scaled_block(rng, ci, co, stride=1):
    """Block whose activations stay O(1) through deep stacks; the absolute
    composite tolerances assume this regime."""
    bn_id = scaled_bn(rng, co) if (ci == co and stride == 1) else None
    return RepVGGBlock(
        branch3x3=(scaled_conv(rng, ci, co, 3, stride=stride), scaled_bn(rng, co)),
        branch1x1=(scaled_conv(rng, ci, co, 1, stride=stride), scaled_bn(rng, co)),
        branch_id=bn_id,
        stride=stride,
    )


def rand_unit(rng, channels):
    return RCSUnit(scaled_block(rng, channels // 2, channels // 2, stride=1))


def rand_osa(rng, channels, n):
    units = tuple(rand_unit(rng, channels) for _ in range(n))
    return OSAModule(units, scaled_conv(rng, 3 * channels, channels, 1))


def tiny_config(input_size=64):
    """nano channel plan at a small input size for fast end-to-end tests."""
    return ModelConfig(
        stage_channels=(16, 32, 64, 128, 256),
        osa_depths=(1, 1, 2, 2),
        num_classes=1,
        anchors=AnchorSet(PAPER_ANCHORS),
        input_size=input_size,
    )


def nano():
    return nano_config()
