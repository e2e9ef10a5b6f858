# pylint: disable=too-many-locals
"""
A small 3D U-Net assembled from the primitives in `ops`.

Topology for ``levels`` encoder levels and base width ``c``:

* encoder level i: conv -> relu -> conv -> relu (width c * 2**i), kept as skip, maxpool2
* bottleneck: conv -> relu -> conv -> relu (width c * 2**levels)
* decoder level i (deepest first): upsample2 -> concat [upsampled, skip] -> conv -> relu
  -> conv -> relu (width c * 2**i)
* head: one same-padded conv to ``num_classes`` logits

Softmax is not part of the network; it belongs to the loss and inference paths.
"""

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from weighted_dice_seg.core import ops
from weighted_dice_seg.core.ops import ContextError, ConvKernel, ShapeMismatchError
from weighted_dice_seg.core.voxelgrid import Shape3, ensure_tensor5

logger = logging.getLogger(__name__)

VNET_MAGIC = b"VNET"
VNET_VERSION = 1
_CONFIG_BLOCK = struct.Struct("<4sBBBBHIII")


class CheckpointFormatError(ValueError):
    """A VNET checkpoint could not be decoded."""


@dataclass(frozen=True)
class UNetConfig:
    """Network shape: classes, depth, width and the patch it consumes."""

    num_classes: int
    in_channels: int = 1
    levels: int = 2
    base_channels: int = 8
    patch_size: Shape3 = field(default_factory=lambda: Shape3(32, 32, 32))

    def __post_init__(self):
        object.__setattr__(self, "patch_size", Shape3.of(self.patch_size))
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be at least 2, got {self.num_classes}.")
        if self.in_channels < 1:
            raise ValueError(f"in_channels must be positive, got {self.in_channels}.")
        if self.levels < 1:
            raise ValueError(f"levels must be at least 1, got {self.levels}.")
        if self.base_channels < 1:
            raise ValueError(f"base_channels must be positive, got {self.base_channels}.")
        divisor = 2**self.levels
        if any(extent % divisor for extent in self.patch_size):
            raise ValueError(
                f"Patch {tuple(self.patch_size)} is not divisible by 2**levels = {divisor}."
            )

    def width(self, level: int) -> int:
        """Feature channels at encoder/decoder `level`; `levels` is the bottleneck."""
        return self.base_channels * 2**level


@dataclass(frozen=True)
class LayerSpec:
    """One convolution in the topology."""

    name: str
    in_channels: int
    out_channels: int

    @property
    def fan_in(self) -> int:
        """Inputs feeding one output voxel."""
        return self.in_channels * ops.KERNEL_SIZE**3


def topology(config: UNetConfig) -> list[LayerSpec]:
    """Convolutions in forward order; this order is also the checkpoint order."""
    layers = []
    channels = config.in_channels
    for level in range(config.levels):
        width = config.width(level)
        layers.append(LayerSpec(f"enc{level}_conv1", channels, width))
        layers.append(LayerSpec(f"enc{level}_conv2", width, width))
        channels = width
    width = config.width(config.levels)
    layers.append(LayerSpec("bottleneck_conv1", channels, width))
    layers.append(LayerSpec("bottleneck_conv2", width, width))
    channels = width
    for level in reversed(range(config.levels)):
        width = config.width(level)
        layers.append(LayerSpec(f"dec{level}_conv1", channels + width, width))
        layers.append(LayerSpec(f"dec{level}_conv2", width, width))
        channels = width
    layers.append(LayerSpec("head", channels, config.num_classes))
    return layers


@dataclass
class UNetParams:
    """Kernels keyed by layer name, in topology order."""

    config: UNetConfig
    kernels: dict[str, ConvKernel]

    def __post_init__(self):
        for spec in topology(self.config):
            kernel = self.kernels.get(spec.name)
            if kernel is None:
                raise ValueError(f"Missing parameters for layer {spec.name}.")
            if (kernel.out_channels, kernel.in_channels) != (spec.out_channels, spec.in_channels):
                raise ShapeMismatchError(
                    f"Layer {spec.name} expects ({spec.out_channels}, {spec.in_channels}) "
                    f"channels, got ({kernel.out_channels}, {kernel.in_channels})."
                )

    def __getitem__(self, name: str) -> ConvKernel:
        return self.kernels[name]

    def arrays(self) -> dict[str, np.ndarray]:
        """Every parameter array keyed "<layer>.weights" / "<layer>.bias" (views, not copies)."""
        arrays = {}
        for spec in topology(self.config):
            arrays[f"{spec.name}.weights"] = self.kernels[spec.name].weights
            arrays[f"{spec.name}.bias"] = self.kernels[spec.name].bias
        return arrays

    def count(self) -> int:
        """Number of scalar parameters."""
        return sum(array.size for array in self.arrays().values())

    def astype(self, dtype) -> "UNetParams":
        """A copy with every array cast to `dtype`."""
        return UNetParams(
            self.config, {name: kernel.astype(dtype) for name, kernel in self.kernels.items()}
        )

    def zeros_like(self) -> "UNetParams":
        """Same layout, all zeros."""
        return UNetParams(
            self.config, {name: kernel.zeros_like() for name, kernel in self.kernels.items()}
        )


def init_params(config: UNetConfig, seed: int) -> UNetParams:
    """He initialisation: weights ~ Normal(0, sqrt(2 / fan_in)), biases zero."""
    rng = np.random.default_rng(seed)
    kernels = {}
    for spec in topology(config):
        shape = (spec.out_channels, spec.in_channels) + (ops.KERNEL_SIZE,) * 3
        weights = rng.normal(0.0, np.sqrt(2.0 / spec.fan_in), size=shape).astype(np.float32)
        kernels[spec.name] = ConvKernel(weights, np.zeros(spec.out_channels, dtype=np.float32))
    params = UNetParams(config, kernels)
    logger.debug("Initialised %d parameters with seed %d", params.count(), seed)
    return params


@dataclass
class ForwardCache:
    """Op contexts of one forward pass, consumed by one backward pass."""

    config: UNetConfig
    input_shape: tuple
    contexts: dict = field(default_factory=dict)
    consumed: bool = False


def _conv_relu(params: UNetParams, name: str, inputs: np.ndarray, contexts: dict):
    hidden, contexts[f"{name}.conv"] = ops.conv3d(inputs, params[name])
    output, contexts[f"{name}.relu"] = ops.relu(hidden)
    return output


def _conv_relu_backward(name: str, grad: np.ndarray, contexts: dict, grads: dict):
    grad = ops.relu_backward(grad, contexts[f"{name}.relu"])
    grad, grads[name] = ops.conv3d_backward(grad, contexts[f"{name}.conv"])
    return grad


def forward(params: UNetParams, inputs: np.ndarray):
    """Run the network on a (batch, in_channels, *patch_size) Tensor5.

    Returns:
        tuple: (logits of shape (batch, num_classes, *patch_size), ForwardCache)
    """
    config = params.config
    ensure_tensor5(inputs, "network input")
    expected = (config.in_channels,) + tuple(config.patch_size)
    if inputs.shape[1:] != expected:
        raise ShapeMismatchError(
            f"Network expects (batch, {expected}) input, got {inputs.shape}."
        )
    cache = ForwardCache(config, inputs.shape)
    contexts = cache.contexts
    skips = []
    hidden = inputs
    for level in range(config.levels):
        hidden = _conv_relu(params, f"enc{level}_conv1", hidden, contexts)
        hidden = _conv_relu(params, f"enc{level}_conv2", hidden, contexts)
        skips.append(hidden)
        hidden, contexts[f"enc{level}_pool"] = ops.maxpool2(hidden)
    hidden = _conv_relu(params, "bottleneck_conv1", hidden, contexts)
    hidden = _conv_relu(params, "bottleneck_conv2", hidden, contexts)
    for level in reversed(range(config.levels)):
        hidden, contexts[f"dec{level}_up"] = ops.upsample2(hidden)
        hidden, contexts[f"dec{level}_concat"] = ops.concat_channels(hidden, skips[level])
        hidden = _conv_relu(params, f"dec{level}_conv1", hidden, contexts)
        hidden = _conv_relu(params, f"dec{level}_conv2", hidden, contexts)
    logits, contexts["head.conv"] = ops.conv3d(hidden, params["head"])
    return logits, cache


def backward(params: UNetParams, cache: ForwardCache, grad_logits: np.ndarray):
    """Back-propagate `grad_logits` through the cached forward pass.

    Returns:
        tuple: (parameter gradients as UNetParams, gradient with respect to the input)

    Raises:
        ContextError: If the cache was already used or belongs to another configuration.
    """
    config = params.config
    if cache.consumed:
        raise ContextError("Forward cache was already used by a backward pass.")
    if cache.config != config:
        raise ContextError("Forward cache was produced with a different network configuration.")
    expected = (cache.input_shape[0], config.num_classes) + tuple(config.patch_size)
    if grad_logits.shape != expected:
        raise ShapeMismatchError(f"Expected logits gradient {expected}, got {grad_logits.shape}.")
    cache.consumed = True
    contexts = cache.contexts
    grads = {}
    grad, grads["head"] = ops.conv3d_backward(grad_logits, contexts["head.conv"])
    skip_grads = {}
    for level in range(config.levels):
        grad = _conv_relu_backward(f"dec{level}_conv2", grad, contexts, grads)
        grad = _conv_relu_backward(f"dec{level}_conv1", grad, contexts, grads)
        grad, skip_grads[level] = ops.concat_channels_backward(
            grad, contexts[f"dec{level}_concat"]
        )
        grad = ops.upsample2_backward(grad, contexts[f"dec{level}_up"])
    grad = _conv_relu_backward("bottleneck_conv2", grad, contexts, grads)
    grad = _conv_relu_backward("bottleneck_conv1", grad, contexts, grads)
    for level in reversed(range(config.levels)):
        grad = ops.maxpool2_backward(grad, contexts[f"enc{level}_pool"]) + skip_grads[level]
        grad = _conv_relu_backward(f"enc{level}_conv2", grad, contexts, grads)
        grad = _conv_relu_backward(f"enc{level}_conv1", grad, contexts, grads)
    ordered = {spec.name: grads[spec.name] for spec in topology(config)}
    return UNetParams(config, ordered), grad


def save_checkpoint(params: UNetParams, path):
    """Write parameters as VNET: magic, version, config block, then f32 tensors in order."""
    config = params.config
    header = _CONFIG_BLOCK.pack(
        VNET_MAGIC,
        VNET_VERSION,
        config.in_channels,
        config.num_classes,
        config.levels,
        config.base_channels,
        *config.patch_size,
    )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fd:
        fd.write(header)
        for array in params.arrays().values():
            fd.write(np.ascontiguousarray(array, dtype="<f4").tobytes())
    logger.info("Saved checkpoint with %d parameters to %s", params.count(), path)


def load_checkpoint(path) -> UNetParams:
    """Read a VNET checkpoint written by `save_checkpoint`.

    Raises:
        CheckpointFormatError: On bad magic, unknown version or a size mismatch.
    """
    data = Path(path).read_bytes()
    if data[:4] != VNET_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {data[:4]!r}, expected {VNET_MAGIC!r}.")
    if len(data) < _CONFIG_BLOCK.size:
        raise CheckpointFormatError(f"{path}: truncated config block.")
    _, version, in_channels, num_classes, levels, base_channels, nx, ny, nz = (
        _CONFIG_BLOCK.unpack_from(data)
    )
    if version != VNET_VERSION:
        raise CheckpointFormatError(f"{path}: version {version} is not supported.")
    try:
        config = UNetConfig(num_classes, in_channels, levels, base_channels, Shape3(nx, ny, nz))
    except ValueError as e:
        raise CheckpointFormatError(f"{path}: invalid config block: {e}") from e
    layers = topology(config)
    expected = sum(
        spec.out_channels * (spec.fan_in + 1) for spec in layers
    ) * 4 + _CONFIG_BLOCK.size
    if len(data) != expected:
        raise CheckpointFormatError(f"{path}: {len(data)} bytes, expected {expected}.")
    offset = _CONFIG_BLOCK.size
    kernels = {}
    for spec in layers:
        shape = (spec.out_channels, spec.in_channels) + (ops.KERNEL_SIZE,) * 3
        size = int(np.prod(shape))
        weights = np.frombuffer(data, dtype="<f4", count=size, offset=offset).reshape(shape)
        offset += size * 4
        bias = np.frombuffer(data, dtype="<f4", count=spec.out_channels, offset=offset)
        offset += spec.out_channels * 4
        kernels[spec.name] = ConvKernel(weights.astype(np.float32), bias.astype(np.float32))
    return UNetParams(config, kernels)
