"""Dense-tensor kernel library over float32 NCHW arrays.

Tensors are plain ``np.ndarray`` values of rank 4 (n, c, h, w), dtype
float32, row-major. Every operation here is a pure function: it never
mutates its inputs and the same inputs give bit-identical outputs.

Conventions baked in (also relied on by the fusion math in
:mod:`rcsnet.reparam`):

* convolution is cross-correlation (no kernel flip), zero padding only;
* 3x3 convs run with padding 1 and 1x1 convs with padding 0 so spatial
  dims are preserved at stride 1;
* the nonlinearity is SiLU, applied by callers after conv+BN pairs and
  never inside a branch sum.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from . import kernels

DTYPE = np.float32


def check_tensor(x, name: str = "input") -> None:
    """Raise ShapeError unless x is a rank-4 float32 array with dims >= 1."""
    if not isinstance(x, np.ndarray) or x.ndim != 4:
        raise ShapeError(f"{name} must be a rank-4 ndarray, got {getattr(x, 'shape', type(x))}")
    if x.dtype != DTYPE:
        raise ShapeError(f"{name} must be float32, got {x.dtype}")
    if min(x.shape) < 1:
        raise ShapeError(f"{name} has a zero-sized dimension: {x.shape}")


@dataclass(frozen=True)
class ConvParams:
    """Convolution kernel (c_out, c_in, k, k) with bias, stride and padding."""

    kernel: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kernel.ndim != 4 or self.kernel.shape[2] != self.kernel.shape[3]:
            raise ShapeError(f"kernel must be (c_out, c_in, k, k), got {self.kernel.shape}")
        if self.bias.ndim != 1 or self.bias.shape[0] != self.kernel.shape[0]:
            raise ShapeError(
                f"bias length {self.bias.shape} does not match c_out {self.kernel.shape[0]}"
            )
        if self.stride < 1 or self.padding < 0:
            raise ShapeError(f"bad stride/padding: {self.stride}/{self.padding}")
        object.__setattr__(self, "kernel", np.ascontiguousarray(self.kernel, dtype=DTYPE))
        object.__setattr__(self, "bias", np.ascontiguousarray(self.bias, dtype=DTYPE))

    @property
    def c_out(self) -> int:
        return self.kernel.shape[0]

    @property
    def c_in(self) -> int:
        return self.kernel.shape[1]

    @property
    def k(self) -> int:
        return self.kernel.shape[2]

    @property
    def size(self) -> int:
        """Number of stored reals (kernel + bias)."""
        return self.kernel.size + self.bias.size


@dataclass(frozen=True)
class BNParams:
    """Inference-mode batch-norm statistics (gamma, beta, mean, var, eps)."""

    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        c = self.gamma.shape[0] if self.gamma.ndim == 1 else -1
        for name in ("gamma", "beta", "mean", "var"):
            arr = getattr(self, name)
            if arr.ndim != 1 or arr.shape[0] != c:
                raise ShapeError(f"BN {name} must be length-{c} 1-D, got {arr.shape}")
            object.__setattr__(self, name, np.ascontiguousarray(arr, dtype=DTYPE))
        if self.eps <= 0:
            raise ShapeError(f"BN eps must be positive, got {self.eps}")
        if np.any(self.var < 0):
            raise ShapeError("BN var must be non-negative")

    @property
    def c(self) -> int:
        return self.gamma.shape[0]

    @property
    def size(self) -> int:
        return 4 * self.c


def conv_out_dim(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """Cross-correlation of x with p.kernel plus bias.

    Output shape is (n, c_out, h_out, w_out) with
    h_out = floor((h + 2*padding - k)/stride) + 1.
    """
    check_tensor(x)
    if x.shape[1] != p.c_in:
        raise ShapeError(f"input has {x.shape[1]} channels, kernel expects {p.c_in}")
    ho = conv_out_dim(x.shape[2], p.k, p.stride, p.padding)
    wo = conv_out_dim(x.shape[3], p.k, p.stride, p.padding)
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"conv output would be {ho}x{wo} for input {x.shape} with "
            f"k={p.k} stride={p.stride} padding={p.padding}"
        )
    return kernels.conv2d(x, p.kernel, p.bias, p.stride, p.padding)


def batchnorm_infer(x: np.ndarray, b: BNParams) -> np.ndarray:
    """Per-channel affine normalization with fixed statistics."""
    check_tensor(x)
    if x.shape[1] != b.c:
        raise ShapeError(f"input has {x.shape[1]} channels, BN expects {b.c}")
    scale = b.gamma / np.sqrt(b.var + DTYPE(b.eps))
    shift = b.beta - b.mean * scale
    return x * scale[None, :, None, None] + shift[None, :, None, None]


def channel_split(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split channels into two equal halves (first half, second half)."""
    check_tensor(x)
    c = x.shape[1]
    if c % 2 != 0:
        raise ShapeError(f"channel_split needs an even channel count, got {c}")
    half = c // 2
    return x[:, :half].copy(), x[:, half:].copy()


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Concatenate along the channel axis, a's channels first."""
    check_tensor(a, "a")
    check_tensor(b, "b")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat mismatch: {a.shape} vs {b.shape}")
    return np.concatenate([a, b], axis=1)


def channel_shuffle(x: np.ndarray, groups: int) -> np.ndarray:
    """Permute channels by the (c/g, g) reshape-transpose-flatten map.

    Output channel p reads input channel (p % (c/g)) * g + p // (c/g);
    pixel values are untouched. Composing shuffle(g) with shuffle(c/g)
    restores the original order.
    """
    check_tensor(x)
    n, c, h, w = x.shape
    if groups < 1 or c % groups != 0:
        raise ShapeError(f"channel count {c} not divisible by groups {groups}")
    per = c // groups
    return np.ascontiguousarray(
        x.reshape(n, per, groups, h, w).swapaxes(1, 2).reshape(n, c, h, w)
    )


def maxpool2d(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    """Windowed maximum per channel, no padding."""
    check_tensor(x)
    if k < 1 or stride < 1:
        raise ShapeError(f"bad pool window/stride: {k}/{stride}")
    if k > x.shape[2] or k > x.shape[3]:
        raise ShapeError(f"pool window {k} exceeds input {x.shape[2]}x{x.shape[3]}")
    return kernels.maxpool2d(x, k, stride)


def upsample_nearest(x: np.ndarray, factor: int) -> np.ndarray:
    """Replicate each pixel factor x factor."""
    check_tensor(x)
    if factor < 1:
        raise ShapeError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return x.copy()
    return np.repeat(np.repeat(x, factor, axis=2), factor, axis=3)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form avoids exp overflow for large negative inputs
    return DTYPE(0.5) * (np.tanh(np.asarray(x, dtype=DTYPE) * DTYPE(0.5)) + DTYPE(1.0))


def activation(x: np.ndarray) -> np.ndarray:
    """Elementwise SiLU: x * sigmoid(x)."""
    check_tensor(x)
    return x * sigmoid(x)
