# pylint: disable=too-many-arguments, too-many-instance-attributes, too-many-locals
"""
Patch-based training: Adam, random subvolume batches and learning curves.

All randomness comes from `TrainConfig.seed`: parameter initialisation, batch sampling
and the validation patches each use their own stream derived from it, so a (seed, config,
dataset) triple fully determines the trained parameters and the curve.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import polars as pl

from weighted_dice_seg.configuration.config import (
    ADAM_BETA1,
    ADAM_BETA2,
    ADAM_EPSILON,
    DEFAULT_BATCH_SIZE,
    DEFAULT_ITERATIONS,
    DEFAULT_SEED,
    DEFAULT_VALIDATION_INTERVAL,
)
from weighted_dice_seg.core import ops, unet3d
from weighted_dice_seg.core.dice import (
    ClassWeights,
    WeightingScheme,
    class_counts,
    class_weights,
    multiclass_dice_loss,
    soft_dice_loss,
)
from weighted_dice_seg.core.unet3d import UNetConfig, UNetParams
from weighted_dice_seg.core.voxelgrid import (
    LabelVolume,
    ScalarVolume,
    Shape3,
    one_hot_array,
    standardize,
)
from weighted_dice_seg.utilities.helper_functions import derive_seed

logger = logging.getLogger(__name__)

Dataset = Sequence[tuple[ScalarVolume, LabelVolume]]


class NonFiniteGradientError(ArithmeticError):
    """A gradient handed to the optimiser holds NaN or infinity."""


class NonFiniteLossError(ArithmeticError):
    """The forward pass produced a NaN or infinite prediction or loss."""


class TrainingDivergedError(RuntimeError):
    """Training stopped on a non-finite loss or gradient."""

    def __init__(self, iteration, scheme, learning_rate, curve, reason):
        super().__init__(
            f"Training diverged at iteration {iteration} "
            f"(scheme {scheme}, learning rate {learning_rate}): {reason}"
        )
        self.iteration = iteration
        self.scheme = scheme
        self.learning_rate = learning_rate
        self.curve = tuple(curve)


@dataclass(frozen=True)
class TrainConfig:
    """Optimisation settings for one training run."""

    learning_rate: float
    iterations: int = DEFAULT_ITERATIONS
    batch_size: int = DEFAULT_BATCH_SIZE
    scheme: WeightingScheme = WeightingScheme.UNIFORM
    seed: int = DEFAULT_SEED
    validation_interval: int = DEFAULT_VALIDATION_INTERVAL
    validation_patches: int = 6
    distinct_patients: bool = True
    checkpoint_interval: int = 0

    def __post_init__(self):
        object.__setattr__(self, "scheme", WeightingScheme(self.scheme))
        if not self.learning_rate > 0:
            raise ValueError(f"Learning rate must be positive, got {self.learning_rate}.")
        if self.iterations < 1:
            raise ValueError(f"Iterations must be at least 1, got {self.iterations}.")
        if self.batch_size < 1:
            raise ValueError(f"Batch size must be at least 1, got {self.batch_size}.")
        if self.validation_interval < 1:
            raise ValueError("Validation interval must be at least 1.")
        if self.validation_patches < 1:
            raise ValueError("At least one validation patch is required.")
        if self.checkpoint_interval < 0:
            raise ValueError("Checkpoint interval cannot be negative.")


@dataclass
class AdamState:
    """First and second moments per parameter array and the step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    epsilon: float = ADAM_EPSILON

    @classmethod
    def for_params(cls, params: UNetParams | Mapping[str, np.ndarray]) -> "AdamState":
        """Zero moments shaped like `params`."""
        arrays = _parameter_arrays(params)
        return cls(
            {name: np.zeros_like(array) for name, array in arrays.items()},
            {name: np.zeros_like(array) for name, array in arrays.items()},
        )


def _parameter_arrays(params) -> dict[str, np.ndarray]:
    if isinstance(params, UNetParams):
        return params.arrays()
    return dict(params)


def adam_step(params, grads, state: AdamState, learning_rate: float):
    """One bias-corrected Adam update, applied in place.

    Args:
        params: UNetParams or a mapping of name -> array, updated in place.
        grads: Gradients with the same layout as `params`.
        state: Moments, updated in place.
        learning_rate: Step size mu >= 0; mu = 0 leaves the parameters untouched.

    Returns:
        tuple: (params, state)

    Raises:
        NonFiniteGradientError: Naming the first parameter with a NaN or infinite
            gradient; nothing is updated in that case.
    """
    if learning_rate < 0:
        raise ValueError(f"Learning rate cannot be negative, got {learning_rate}.")
    arrays = _parameter_arrays(params)
    gradients = _parameter_arrays(grads)
    for name, array in arrays.items():
        if gradients[name].shape != array.shape:
            raise ValueError(f"Gradient for {name} has shape {gradients[name].shape}.")
        if not np.all(np.isfinite(gradients[name])):
            raise NonFiniteGradientError(f"Gradient of {name} is not finite.")
    state.t += 1
    bias1 = 1.0 - state.beta1**state.t
    bias2 = 1.0 - state.beta2**state.t
    for name, array in arrays.items():
        g = gradients[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(array)
            state.v[name] = np.zeros_like(array)
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        m_hat = state.m[name] / bias1
        v_hat = state.v[name] / bias2
        array -= (learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)).astype(array.dtype)
    return params, state


@dataclass(frozen=True)
class Batch:
    """Network inputs, one-hot targets and where each crop came from."""

    inputs: np.ndarray
    targets: np.ndarray
    patients: tuple[int, ...]
    corners: tuple[tuple[int, int, int], ...]


def sample_batch(
    dataset: Dataset,
    patch,
    batch_size: int,
    rng: np.random.Generator,
    distinct_patients: bool = True,
) -> Batch:
    """Crop `batch_size` random subvolumes, each from a different patient by default.

    Raises:
        ValueError: If a volume is smaller than the patch, or there are fewer patients
            than `batch_size` while distinct patients are required.
    """
    patch = Shape3.of(patch)
    if not dataset:
        raise ValueError("Cannot sample from an empty dataset.")
    for image, _ in dataset:
        if any(extent < size for extent, size in zip(image.shape, patch)):
            raise ValueError(f"Volume {tuple(image.shape)} is smaller than patch {tuple(patch)}.")
    if distinct_patients:
        if len(dataset) < batch_size:
            raise ValueError(
                f"{len(dataset)} patients cannot fill a batch of {batch_size} distinct ones."
            )
        patients = rng.choice(len(dataset), size=batch_size, replace=False)
    else:
        patients = rng.integers(0, len(dataset), size=batch_size)
    num_classes = dataset[0][1].num_classes
    inputs, targets, corners = [], [], []
    for patient in patients:
        image, labels = dataset[int(patient)]
        corner = tuple(
            int(rng.integers(0, extent - size + 1)) for extent, size in zip(image.shape, patch)
        )
        window = tuple(slice(start, start + size) for start, size in zip(corner, patch))
        inputs.append(image.values[window][np.newaxis])
        targets.append(one_hot_array(labels.labels[window], num_classes))
        corners.append(corner)
    return Batch(
        np.stack(inputs).astype(np.float32),
        np.stack(targets).astype(np.float32),
        tuple(int(patient) for patient in patients),
        tuple(corners),
    )


@dataclass(frozen=True)
class StepResult:
    """Loss of the batch before the update, and its per-class soft Dice losses."""

    loss: float
    per_class: np.ndarray


def train_step(
    params: UNetParams,
    state: AdamState,
    batch: Batch,
    weights: ClassWeights,
    learning_rate: float,
) -> StepResult:
    """Forward, softmax, weighted Dice loss, backward and one Adam update.

    Raises:
        NonFiniteLossError: If the prediction or the loss is not finite.
        NonFiniteGradientError: If a parameter gradient is not finite.
    """
    logits, cache = unet3d.forward(params, batch.inputs)
    if not np.all(np.isfinite(logits)):
        raise NonFiniteLossError("Network produced non-finite logits.")
    probabilities, softmax_context = ops.softmax_channels(logits)
    result = multiclass_dice_loss(probabilities, batch.targets, weights)
    if not np.isfinite(result.loss):
        raise NonFiniteLossError(f"Loss is {result.loss}.")
    grad_logits = ops.softmax_backward(result.gradient, softmax_context)
    grads, _ = unet3d.backward(params, cache, grad_logits)
    adam_step(params, grads, state, learning_rate)
    return StepResult(result.loss, result.per_class)


@dataclass(frozen=True)
class CurvePoint:
    """Training loss and validation soft Dice at one iteration."""

    iteration: int
    loss: float
    class_dsc: tuple[float, ...]
    mean_foreground_dsc: float


def predict_batch(params: UNetParams, inputs: np.ndarray, chunk: int) -> np.ndarray:
    """Softmax predictions for a stack of patches, `chunk` patches per forward pass."""
    outputs = []
    for start in range(0, inputs.shape[0], chunk):
        logits, _ = unet3d.forward(params, inputs[start : start + chunk])
        probabilities, _ = ops.softmax_channels(logits)
        outputs.append(probabilities)
    return np.concatenate(outputs)


def validation_dsc(params: UNetParams, patches: Batch, chunk: int) -> tuple[float, ...]:
    """Soft Dice per class over all validation patches pooled together.

    Raises:
        NonFiniteLossError: If the network predicts NaN or infinity on a patch.
    """
    probabilities = predict_batch(params, patches.inputs, chunk)
    if not np.all(np.isfinite(probabilities)):
        raise NonFiniteLossError("Network produced non-finite validation predictions.")
    return tuple(
        -soft_dice_loss(probabilities[:, label], patches.targets[:, label])
        for label in range(probabilities.shape[1])
    )


@dataclass(frozen=True)
class TrainingResult:
    """Trained parameters, the learning curve and the class weights used."""

    params: UNetParams
    curve: tuple[CurvePoint, ...]
    weights: ClassWeights


def train(
    dataset: Dataset,
    unet_config: UNetConfig,
    train_config: TrainConfig,
    validation: Dataset | None = None,
    checkpoint_dir=None,
) -> TrainingResult:
    """Train a network on random patches of `dataset`.

    Class weights are computed once from the training labels. Images are standardised
    before cropping. Validation patches are cut once from `validation` (or, without it,
    from `dataset`) and scored every `validation_interval` iterations and at the end.

    Raises:
        TrainingDivergedError: On a non-finite loss or gradient, carrying the curve so far.
    """
    if not dataset:
        raise ValueError("The training dataset is empty.")
    num_classes = unet_config.num_classes
    counts = class_counts([labels for _, labels in dataset], num_classes)
    weights = class_weights(counts, train_config.scheme)
    prepared = [(standardize(image), labels) for image, labels in dataset]
    held_out = [(standardize(image), labels) for image, labels in (validation or dataset)]
    patches = sample_batch(
        held_out,
        unet_config.patch_size,
        train_config.validation_patches,
        np.random.default_rng(derive_seed(train_config.seed, "validation")),
        distinct_patients=len(held_out) >= train_config.validation_patches,
    )
    params = unet3d.init_params(unet_config, derive_seed(train_config.seed, "init"))
    state = AdamState.for_params(params)
    rng = np.random.default_rng(derive_seed(train_config.seed, "batches"))
    curve = []
    logger.info(
        "Training %s weights at learning rate %g for %d iterations",
        train_config.scheme,
        train_config.learning_rate,
        train_config.iterations,
    )
    for iteration in range(1, train_config.iterations + 1):
        batch = sample_batch(
            prepared,
            unet_config.patch_size,
            train_config.batch_size,
            rng,
            train_config.distinct_patients,
        )
        validating = iteration % train_config.validation_interval == 0 or (
            iteration == train_config.iterations
        )
        try:
            step = train_step(params, state, batch, weights, train_config.learning_rate)
            if validating:
                class_dsc = validation_dsc(params, patches, train_config.batch_size)
        except ArithmeticError as e:
            logger.warning(
                "Run %s/%g diverged: %s", train_config.scheme, train_config.learning_rate, e
            )
            raise TrainingDivergedError(
                iteration, train_config.scheme, train_config.learning_rate, curve, str(e)
            ) from e
        if validating:
            point = CurvePoint(iteration, step.loss, class_dsc, float(np.mean(class_dsc[1:])))
            curve.append(point)
            logger.info(
                "Iteration %d: loss %.5f, mean foreground DSC %.4f",
                iteration,
                point.loss,
                point.mean_foreground_dsc,
            )
        if checkpoint_dir and train_config.checkpoint_interval:
            if iteration % train_config.checkpoint_interval == 0:
                unet3d.save_checkpoint(
                    params, Path(checkpoint_dir) / f"checkpoint_{iteration:06d}.vnet"
                )
    return TrainingResult(params, tuple(curve), weights)


def curve_frame(curve: Sequence[CurvePoint], num_classes: int) -> pl.DataFrame:
    """Learning curve as a frame: iteration, loss, dsc_class_0..L-1, mean_foreground_dsc."""
    columns = {
        "iteration": pl.Series([point.iteration for point in curve], dtype=pl.Int64),
        "loss": pl.Series([point.loss for point in curve], dtype=pl.Float64),
    }
    for label in range(num_classes):
        columns[f"dsc_class_{label}"] = pl.Series(
            [point.class_dsc[label] for point in curve], dtype=pl.Float64
        )
    columns["mean_foreground_dsc"] = pl.Series(
        [point.mean_foreground_dsc for point in curve], dtype=pl.Float64
    )
    return pl.DataFrame(columns)


def write_curve_csv(curve: Sequence[CurvePoint], num_classes: int, path):
    """Write the learning curve CSV."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    curve_frame(curve, num_classes).write_csv(path)
