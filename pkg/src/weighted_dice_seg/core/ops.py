# pylint: disable=too-few-public-methods
"""
Differentiable building blocks for the 3D network.

Every forward function returns ``(output, context)``; the matching backward function takes
the upstream gradient and that context. A context can be consumed by exactly one backward
call. Outputs keep the floating dtype of their inputs, so float64 inputs give float64
gradients for finite-difference checks while training runs in float32.
"""

import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from weighted_dice_seg.configuration.config import CHECK_FINITE
from weighted_dice_seg.core.voxelgrid import assert_finite, ensure_tensor5

logger = logging.getLogger(__name__)

KERNEL_SIZE = 3
KERNEL_OFFSETS = tuple(itertools.product(range(KERNEL_SIZE), repeat=3))


class ShapeMismatchError(ValueError):
    """Operand shapes are incompatible."""


class ContextError(RuntimeError):
    """A backward call was given a stale or foreign context."""


class GradientCheckError(ArithmeticError):
    """The checked function produced a non-finite value."""


@dataclass
class ConvKernel:
    """Weights (out, in, 3, 3, 3) and per-output-channel bias of a same-padded convolution."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.weights.ndim != 5 or self.weights.shape[2:] != (KERNEL_SIZE,) * 3:
            raise ShapeMismatchError(
                f"Kernel weights must be (out, in, 3, 3, 3), got {self.weights.shape}."
            )
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeMismatchError(
                f"Bias must have {self.weights.shape[0]} entries, got {self.bias.shape}."
            )

    @property
    def out_channels(self) -> int:
        """Number of output channels."""
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        """Number of input channels."""
        return self.weights.shape[1]

    @classmethod
    def zeros(cls, out_channels: int, in_channels: int, dtype=np.float32) -> "ConvKernel":
        """An all-zero kernel."""
        return cls(
            np.zeros((out_channels, in_channels) + (KERNEL_SIZE,) * 3, dtype=dtype),
            np.zeros(out_channels, dtype=dtype),
        )

    def zeros_like(self) -> "ConvKernel":
        """An all-zero kernel of the same shape and dtype."""
        return ConvKernel(np.zeros_like(self.weights), np.zeros_like(self.bias))

    def astype(self, dtype) -> "ConvKernel":
        """A copy with both arrays cast to `dtype`."""
        return ConvKernel(self.weights.astype(dtype), self.bias.astype(dtype))


@dataclass
class OpContext:
    """Values cached by a forward pass for its backward pass."""

    op: str
    cache: dict = field(default_factory=dict)
    consumed: bool = False

    def take(self, op: str) -> dict:
        """Hand the cache to the backward pass of `op`, once."""
        if self.op != op:
            raise ContextError(f"Context from {self.op} passed to {op} backward.")
        if self.consumed:
            raise ContextError(f"{op} context was already used by a backward call.")
        self.consumed = True
        return self.cache


def _checked(values: np.ndarray, name: str) -> np.ndarray:
    if CHECK_FINITE:
        assert_finite(values, name)
    return values


def _expect_shape(grad_out: np.ndarray, shape: tuple, op: str):
    if grad_out.shape != tuple(shape):
        raise ShapeMismatchError(
            f"{op} backward expects gradient of shape {tuple(shape)}, got {grad_out.shape}."
        )


def conv3d(inputs: np.ndarray, kernel: ConvKernel):
    """3x3x3 cross-correlation with zero padding 1 and stride 1.

    out[b, o, p] = bias[o] + sum_{i, d} in[b, i, p + d - 1] * k[o, i, d]
    """
    ensure_tensor5(inputs, "conv3d input")
    batch, channels, nx, ny, nz = inputs.shape
    if channels != kernel.in_channels:
        raise ShapeMismatchError(
            f"conv3d input has {channels} channels, kernel expects {kernel.in_channels}."
        )
    dtype = np.result_type(inputs.dtype, kernel.weights.dtype)
    padded = np.pad(inputs.astype(dtype, copy=False), ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    weights = kernel.weights.astype(dtype, copy=False)
    output = np.empty((batch, kernel.out_channels, nx, ny, nz), dtype=dtype)
    output[...] = kernel.bias.astype(dtype)[None, :, None, None, None]
    for i, j, k in KERNEL_OFFSETS:
        window = padded[:, :, i : i + nx, j : j + ny, k : k + nz]
        # (out, in) x (batch, in, x, y, z) -> (out, batch, x, y, z)
        output += np.tensordot(weights[:, :, i, j, k], window, axes=([1], [1])).transpose(
            1, 0, 2, 3, 4
        )
    context = OpContext("conv3d", {"padded": padded, "kernel": kernel, "shape": output.shape})
    return _checked(output, "conv3d output"), context


def conv3d_backward(grad_out: np.ndarray, context: OpContext):
    """Gradients of conv3d with respect to its input and its kernel.

    Returns:
        tuple: (grad_input, grad_kernel) where grad_kernel is a ConvKernel of gradients.
    """
    cache = context.take("conv3d")
    _expect_shape(grad_out, cache["shape"], "conv3d")
    padded, kernel = cache["padded"], cache["kernel"]
    _, _, nx, ny, nz = grad_out.shape
    grad_out = grad_out.astype(padded.dtype, copy=False)
    weights = kernel.weights.astype(padded.dtype, copy=False)
    grad_padded = np.zeros_like(padded)
    grad_weights = np.zeros_like(weights)
    for i, j, k in KERNEL_OFFSETS:
        window = padded[:, :, i : i + nx, j : j + ny, k : k + nz]
        grad_weights[:, :, i, j, k] = np.tensordot(
            grad_out, window, axes=([0, 2, 3, 4], [0, 2, 3, 4])
        )
        # (out, in) x (batch, out, x, y, z) -> (in, batch, x, y, z)
        grad_padded[:, :, i : i + nx, j : j + ny, k : k + nz] += np.tensordot(
            weights[:, :, i, j, k], grad_out, axes=([0], [1])
        ).transpose(1, 0, 2, 3, 4)
    grad_bias = grad_out.sum(axis=(0, 2, 3, 4), dtype=np.float64).astype(padded.dtype)
    grad_input = np.ascontiguousarray(grad_padded[:, :, 1:-1, 1:-1, 1:-1])
    grad_kernel = ConvKernel(
        grad_weights.astype(kernel.weights.dtype, copy=False),
        grad_bias.astype(kernel.bias.dtype, copy=False),
    )
    return _checked(grad_input, "conv3d grad_input"), grad_kernel


def relu(inputs: np.ndarray):
    """Elementwise max(0, x)."""
    mask = inputs > 0
    return _checked(np.where(mask, inputs, 0).astype(inputs.dtype), "relu output"), OpContext(
        "relu", {"mask": mask}
    )


def relu_backward(grad_out: np.ndarray, context: OpContext) -> np.ndarray:
    """Pass the gradient where the input was strictly positive; zero at and below 0."""
    mask = context.take("relu")["mask"]
    _expect_shape(grad_out, mask.shape, "relu")
    return np.where(mask, grad_out, 0).astype(grad_out.dtype)


def _blocks(values: np.ndarray) -> np.ndarray:
    """View (b, c, x, y, z) as (b, c, x/2, y/2, z/2, 8) with the window in scan order."""
    batch, channels, nx, ny, nz = values.shape
    blocks = values.reshape(batch, channels, nx // 2, 2, ny // 2, 2, nz // 2, 2)
    blocks = blocks.transpose(0, 1, 2, 4, 6, 3, 5, 7)
    return blocks.reshape(batch, channels, nx // 2, ny // 2, nz // 2, 8)


def maxpool2(inputs: np.ndarray):
    """2x2x2 max pooling with stride 2; ties resolve to the first voxel in scan order."""
    ensure_tensor5(inputs, "maxpool2 input")
    if any(extent % 2 for extent in inputs.shape[2:]):
        raise ShapeMismatchError(
            f"maxpool2 needs even spatial extents, got {inputs.shape[2:]}."
        )
    blocks = _blocks(inputs)
    argmax = blocks.argmax(axis=-1)
    output = np.take_along_axis(blocks, argmax[..., None], axis=-1)[..., 0]
    return _checked(output, "maxpool2 output"), OpContext(
        "maxpool2", {"argmax": argmax, "shape": inputs.shape}
    )


def maxpool2_backward(grad_out: np.ndarray, context: OpContext) -> np.ndarray:
    """Route each window's gradient to the voxel that won the forward max."""
    cache = context.take("maxpool2")
    argmax, shape = cache["argmax"], cache["shape"]
    _expect_shape(grad_out, argmax.shape, "maxpool2")
    batch, channels, nx, ny, nz = shape
    blocks = np.zeros(argmax.shape + (8,), dtype=grad_out.dtype)
    np.put_along_axis(blocks, argmax[..., None], grad_out[..., None], axis=-1)
    blocks = blocks.reshape(batch, channels, nx // 2, ny // 2, nz // 2, 2, 2, 2)
    return blocks.transpose(0, 1, 2, 5, 3, 6, 4, 7).reshape(shape)


def upsample2(inputs: np.ndarray):
    """Nearest-neighbour upsampling: each voxel becomes a 2x2x2 block."""
    ensure_tensor5(inputs, "upsample2 input")
    output = inputs.repeat(2, axis=2).repeat(2, axis=3).repeat(2, axis=4)
    return _checked(output, "upsample2 output"), OpContext(
        "upsample2", {"shape": inputs.shape}
    )


def upsample2_backward(grad_out: np.ndarray, context: OpContext) -> np.ndarray:
    """Sum the 8 gradients that came from each source voxel."""
    shape = context.take("upsample2")["shape"]
    batch, channels, nx, ny, nz = shape
    _expect_shape(grad_out, (batch, channels, 2 * nx, 2 * ny, 2 * nz), "upsample2")
    return grad_out.reshape(batch, channels, nx, 2, ny, 2, nz, 2).sum(axis=(3, 5, 7))


def concat_channels(first: np.ndarray, second: np.ndarray):
    """Stack channels as [first, second]."""
    ensure_tensor5(first, "concat first")
    ensure_tensor5(second, "concat second")
    if first.shape[0] != second.shape[0] or first.shape[2:] != second.shape[2:]:
        raise ShapeMismatchError(
            f"Cannot concatenate {first.shape} and {second.shape} along channels."
        )
    output = np.concatenate([first, second], axis=1)
    return output, OpContext(
        "concat", {"split": first.shape[1], "shape": output.shape}
    )


def concat_channels_backward(grad_out: np.ndarray, context: OpContext):
    """Split the gradient back into (grad_first, grad_second)."""
    cache = context.take("concat")
    _expect_shape(grad_out, cache["shape"], "concat")
    split = cache["split"]
    return grad_out[:, :split], grad_out[:, split:]


def softmax_channels(inputs: np.ndarray):
    """Per-voxel softmax over the channel axis, shifted by the channel max."""
    ensure_tensor5(inputs, "softmax input")
    if inputs.shape[1] < 2:
        raise ShapeMismatchError(f"softmax needs at least 2 channels, got {inputs.shape[1]}.")
    shifted = inputs - inputs.max(axis=1, keepdims=True)
    exponentials = np.exp(shifted)
    output = exponentials / exponentials.sum(axis=1, keepdims=True)
    return _checked(output, "softmax output"), OpContext("softmax", {"output": output})


def softmax_backward(grad_out: np.ndarray, context: OpContext) -> np.ndarray:
    """Apply the softmax Jacobian: s * (g - sum_k g_k s_k) per voxel."""
    output = context.take("softmax")["output"]
    _expect_shape(grad_out, output.shape, "softmax")
    inner = (grad_out * output).sum(axis=1, keepdims=True)
    return output * (grad_out - inner)


@dataclass
class GradientCheckReport:
    """Outcome of comparing an analytic gradient with central differences."""

    analytic: np.ndarray
    numeric: np.ndarray
    relative_errors: np.ndarray
    tolerance: float
    failing_indices: list[tuple[int, ...]]

    @property
    def max_error(self) -> float:
        """Largest relative error over all coordinates."""
        return float(self.relative_errors.max(initial=0.0))

    @property
    def passed(self) -> bool:
        """True when every coordinate is within tolerance."""
        return not self.failing_indices


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor), elementwise."""
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def gradient_check(
    func: Callable[[np.ndarray], tuple[float, np.ndarray]],
    point: np.ndarray,
    h: float = 1e-3,
    tol: float = 1e-4,
    floor: float = 1e-6,
) -> GradientCheckReport:
    """Compare `func`'s analytic gradient with central differences at `point`.

    Args:
        func: Maps an array to (scalar value, gradient array of the same shape).
        point: Where to evaluate. It is copied to float64 and never modified.
        h: Central difference step.
        tol: Largest accepted relative error.
        floor: Lower bound for the relative error denominator, so that near-zero
            gradients are compared in absolute terms.

    Returns:
        GradientCheckReport: Per-coordinate errors and the indices that fail.

    Raises:
        GradientCheckError: If `func` returns a non-finite value.
    """
    point = np.array(point, dtype=np.float64)
    value, analytic = func(point.copy())
    if not np.isfinite(value):
        raise GradientCheckError(f"Function value {value} at the check point is not finite.")
    analytic = np.asarray(analytic, dtype=np.float64).reshape(point.shape)
    numeric = np.zeros_like(point)
    shifted = point.copy()
    for index in np.ndindex(point.shape):
        original = shifted[index]
        shifted[index] = original + h
        upper, _ = func(shifted.copy())
        shifted[index] = original - h
        lower, _ = func(shifted.copy())
        shifted[index] = original
        if not (np.isfinite(upper) and np.isfinite(lower)):
            raise GradientCheckError(f"Function is not finite around index {index}.")
        numeric[index] = (upper - lower) / (2.0 * h)
    errors = relative_error(analytic, numeric, floor)
    failing = [tuple(int(i) for i in index) for index in zip(*np.nonzero(errors > tol))]
    if failing:
        logger.debug("Gradient check failed at %d of %d coordinates", len(failing), errors.size)
    return GradientCheckReport(analytic, numeric, errors, tol, failing)
