"""
Full-volume prediction by sliding-window tiling, plus preprocessing downsampling.
"""

import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from weighted_dice_seg.core import ops, unet3d
from weighted_dice_seg.core.ops import ShapeMismatchError
from weighted_dice_seg.core.unet3d import UNetParams
from weighted_dice_seg.core.voxelgrid import (
    LabelVolume,
    ProbabilityMap,
    ScalarVolume,
    Shape3,
    standardize,
)

logger = logging.getLogger(__name__)


def gen_indices(length: int, patch: int, stride: int):
    """Tile corners along one axis: multiples of `stride`, then one tile flush with the end."""
    if patch > length:
        raise ValueError(f"Patch extent {patch} exceeds volume extent {length}.")
    last = 0
    for corner in range(0, length - patch + 1, stride):
        last = corner
        yield corner
    if last + patch < length:
        yield length - patch


@dataclass(frozen=True)
class TilingPlan:
    """Tile corners covering a volume, and how many tiles cover each voxel."""

    volume_shape: Shape3
    patch: Shape3
    stride: Shape3
    offsets: tuple[tuple[int, int, int], ...]
    coverage: np.ndarray

    def slices(self, offset: tuple[int, int, int]) -> tuple[slice, slice, slice]:
        """Spatial slices of the tile at `offset`."""
        return tuple(slice(start, start + extent) for start, extent in zip(offset, self.patch))


def plan_tiles(volume_shape, patch, stride=None) -> TilingPlan:
    """Plan tiles of size `patch` every `stride` voxels, clamping the last tile per axis.

    Args:
        volume_shape: Extents of the volume.
        patch: Tile extents, each no larger than the volume.
        stride: Step per axis in [1, patch]; defaults to half the patch.

    Raises:
        ValueError: On a zero or oversized stride, or a patch larger than the volume.
    """
    volume_shape, patch = Shape3.of(volume_shape), Shape3.of(patch)
    if stride is None:
        stride = tuple(max(extent // 2, 1) for extent in patch)
    stride = Shape3.of(stride)
    for axis, step, extent in zip("xyz", stride, patch):
        if step > extent:
            raise ValueError(f"Stride {step} along {axis} exceeds the patch extent {extent}.")
    corners = [
        list(gen_indices(length, extent, step))
        for length, extent, step in zip(volume_shape, patch, stride)
    ]
    offsets = tuple(itertools.product(*corners))
    coverage = np.zeros(tuple(volume_shape), dtype=np.int32)
    plan = TilingPlan(volume_shape, patch, stride, offsets, coverage)
    for offset in offsets:
        coverage[plan.slices(offset)] += 1
    coverage.flags.writeable = False
    logger.debug("Planned %d tiles over %s", len(offsets), tuple(volume_shape))
    return plan


def _predict_tile(params: UNetParams, tile: np.ndarray) -> np.ndarray:
    logits, _ = unet3d.forward(params, tile[np.newaxis, np.newaxis])
    probabilities, _ = ops.softmax_channels(logits)
    return probabilities[0]


def predict_volume(
    params: UNetParams, volume: ScalarVolume, plan: TilingPlan, workers: int = 1
) -> ProbabilityMap:
    """Predict every tile and average the softmax maps where tiles overlap.

    Args:
        params: Trained network whose patch size equals the plan's.
        volume: Intensities, already preprocessed the way training saw them.
        plan: Tiles over the volume.
        workers: Tiles predicted concurrently; results are merged in plan order.
    """
    if params.config.patch_size != plan.patch:
        raise ShapeMismatchError(
            f"Network patch {tuple(params.config.patch_size)} differs from "
            f"plan patch {tuple(plan.patch)}."
        )
    if volume.shape != plan.volume_shape:
        raise ShapeMismatchError(
            f"Volume {tuple(volume.shape)} differs from plan {tuple(plan.volume_shape)}."
        )
    tiles = [volume.values[plan.slices(offset)] for offset in plan.offsets]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            predictions = list(pool.map(lambda tile: _predict_tile(params, tile), tiles))
    else:
        predictions = [_predict_tile(params, tile) for tile in tiles]
    totals = np.zeros((params.config.num_classes,) + tuple(plan.volume_shape), dtype=np.float64)
    for offset, prediction in zip(plan.offsets, predictions):
        totals[(slice(None),) + plan.slices(offset)] += prediction
    return ProbabilityMap(totals / plan.coverage)


def argmax_labels(pred: ProbabilityMap) -> LabelVolume:
    """Most probable class per voxel; ties go to the lowest class index."""
    return LabelVolume(pred.probabilities.argmax(axis=0), pred.num_classes)


def segment_volume(
    params: UNetParams, volume: ScalarVolume, stride=None, workers: int = 1
) -> tuple[ProbabilityMap, LabelVolume]:
    """Standardise, tile, predict and label a whole volume."""
    plan = plan_tiles(volume.shape, params.config.patch_size, stride)
    probabilities = predict_volume(params, standardize(volume), plan, workers)
    return probabilities, argmax_labels(probabilities)


def _block_sums(values: np.ndarray, factor: int) -> np.ndarray:
    for axis in range(values.ndim - 3, values.ndim):
        starts = np.arange(0, values.shape[axis], factor)
        values = np.add.reduceat(values, starts, axis=axis)
    return values


def downsample(volume: ScalarVolume | LabelVolume, factor: int = 4):
    """Reduce each axis by `factor`.

    Scalar volumes take the mean of each block (trailing partial blocks average over the
    voxels they hold); label volumes take the majority class, lowest index on ties.

    Raises:
        ValueError: If `factor` < 1 or an extent is smaller than `factor`.
    """
    if factor < 1:
        raise ValueError(f"Downsampling factor must be at least 1, got {factor}.")
    if any(extent < factor for extent in volume.shape):
        raise ValueError(f"Volume {tuple(volume.shape)} is smaller than factor {factor}.")
    if isinstance(volume, LabelVolume):
        votes = _block_sums(
            (volume.labels[np.newaxis] == np.arange(volume.num_classes)[:, None, None, None])
            .astype(np.int64),
            factor,
        )
        return LabelVolume(votes.argmax(axis=0), volume.num_classes)
    sums = _block_sums(volume.values.astype(np.float64), factor)
    members = _block_sums(np.ones(tuple(volume.shape), dtype=np.float64), factor)
    return ScalarVolume(sums / members)
