# pylint: disable=too-many-instance-attributes
"""
Synthetic multi-organ phantoms: ellipsoidal organs on a background, with Gaussian noise.

Each patient draws its organ centres and semi-axes uniformly inside the ranges of its
PhantomSpec from a random stream keyed by (seed, patient index), so patients are reproducible
and can be generated in any order or in parallel.
"""

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from weighted_dice_seg.app.inference import downsample
from weighted_dice_seg.configuration.config import ABDOMEN
from weighted_dice_seg.core.voxelgrid import LabelVolume, ScalarVolume, Shape3

logger = logging.getLogger(__name__)

INTENSITY_LIMIT = 1.0e4


@dataclass(frozen=True)
class OrganSpec:
    """An ellipsoidal organ: intensity and [low, high] ranges for centre and semi-axes."""

    name: str
    intensity: float
    center: tuple[tuple[float, float], ...]
    semi_axes: tuple[tuple[float, float], ...]

    def __post_init__(self):
        center = tuple(tuple(float(v) for v in bounds) for bounds in self.center)
        semi_axes = tuple(tuple(float(v) for v in bounds) for bounds in self.semi_axes)
        for label, ranges in (("center", center), ("semi_axes", semi_axes)):
            if len(ranges) != 3 or any(len(b) != 2 or b[0] > b[1] for b in ranges):
                raise ValueError(f"{self.name}: {label} needs three [low, high] ranges.")
        if any(low <= 0 for low, _ in semi_axes):
            raise ValueError(f"{self.name}: semi-axes must be positive.")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "semi_axes", semi_axes)

    @property
    def nominal_volume(self) -> float:
        """Ellipsoid volume at the midpoint semi-axes."""
        midpoints = [(low + high) / 2 for low, high in self.semi_axes]
        return 4.0 / 3.0 * np.pi * float(np.prod(midpoints))

    def scaled(self, factor: int) -> "OrganSpec":
        """The same organ on a grid `factor` times finer."""
        return replace(
            self,
            center=tuple((low * factor, high * factor) for low, high in self.center),
            semi_axes=tuple((low * factor, high * factor) for low, high in self.semi_axes),
        )


@dataclass(frozen=True)
class PhantomSpec:
    """Volume shape, background, organs (class ids 1..L-1 in order), noise and seed."""

    shape: Shape3 = field(default_factory=lambda: Shape3(48, 48, 48))
    background_name: str = "background"
    background_intensity: float = 0.0
    organs: tuple[OrganSpec, ...] = ()
    noise_sigma: float = 0.1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "shape", Shape3.of(self.shape))
        object.__setattr__(self, "organs", tuple(self.organs))
        if not self.organs:
            raise ValueError("A phantom needs at least one organ (L >= 2).")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be non-negative, got {self.noise_sigma}.")
        for organ in self.organs:
            for axis, extent, (c_low, c_high), (_, a_high) in zip(
                "xyz", self.shape, organ.center, organ.semi_axes
            ):
                if c_low - a_high < 0 or c_high + a_high > extent - 1:
                    raise ValueError(
                        f"{organ.name} does not fit inside the volume along {axis}."
                    )
        intensities = sorted(self.intensities)
        gaps = np.diff(intensities)
        if gaps.size and gaps.min() < 2 * self.noise_sigma:
            raise ValueError("Class intensity means must differ by at least 2 sigma.")

    @classmethod
    def from_config(cls, anatomy: dict | None = None, **overrides) -> "PhantomSpec":
        """Build a spec from an anatomy dict such as `config.ABDOMEN`."""
        anatomy = anatomy or ABDOMEN
        organs = tuple(
            OrganSpec(
                organ["name"],
                float(organ["intensity"]),
                tuple(tuple(bounds) for bounds in organ["center"]),
                tuple(tuple(bounds) for bounds in organ["semi_axes"]),
            )
            for organ in anatomy["organs"]
        )
        values = {
            "shape": Shape3.of(anatomy["shape"]),
            "background_name": anatomy["background"]["name"],
            "background_intensity": float(anatomy["background"]["intensity"]),
            "organs": organs,
            "noise_sigma": float(anatomy.get("noise_sigma", 0.1)),
        }
        values.update(overrides)
        return cls(**values)

    @property
    def num_classes(self) -> int:
        """Background plus organs."""
        return len(self.organs) + 1

    @property
    def class_names(self) -> tuple[str, ...]:
        """Names by class id."""
        return (self.background_name,) + tuple(organ.name for organ in self.organs)

    @property
    def intensities(self) -> np.ndarray:
        """Mean intensity by class id."""
        return np.array(
            [self.background_intensity] + [organ.intensity for organ in self.organs],
            dtype=np.float64,
        )

    def imbalance_ratio(self) -> float:
        """Nominal volume of the largest organ over the smallest."""
        volumes = [organ.nominal_volume for organ in self.organs]
        return max(volumes) / min(volumes)

    def scaled(self, factor: int) -> "PhantomSpec":
        """The same anatomy rendered on a grid `factor` times finer."""
        if factor < 1:
            raise ValueError(f"Scale factor must be at least 1, got {factor}.")
        return replace(
            self,
            shape=Shape3(*(extent * factor for extent in self.shape)),
            organs=tuple(organ.scaled(factor) for organ in self.organs),
        )


@dataclass(frozen=True)
class Patient:
    """One generated case."""

    index: int
    image: ScalarVolume
    labels: LabelVolume


@dataclass(frozen=True)
class PhantomDataset:
    """Generated patients split into training and test sets."""

    spec: PhantomSpec
    train: tuple[Patient, ...]
    test: tuple[Patient, ...]


def generate(spec: PhantomSpec, patient_index: int) -> tuple[ScalarVolume, LabelVolume]:
    """Render one patient.

    Organs are painted in class order, so a higher class id wins where ellipsoids overlap.
    Intensities are the class mean plus Normal(0, noise_sigma), clipped to a finite range.
    """
    rng = np.random.default_rng([spec.seed, patient_index])
    grid = np.ogrid[tuple(slice(0, extent) for extent in spec.shape)]
    labels = np.zeros(tuple(spec.shape), dtype=np.uint8)
    for class_id, organ in enumerate(spec.organs, start=1):
        center = [rng.uniform(low, high) for low, high in organ.center]
        semi_axes = [rng.uniform(low, high) for low, high in organ.semi_axes]
        distance = sum(
            ((coords - c) / a) ** 2 for coords, c, a in zip(grid, center, semi_axes)
        )
        labels[distance <= 1.0] = class_id
    values = spec.intensities[labels]
    if spec.noise_sigma > 0:
        values = values + rng.normal(0.0, spec.noise_sigma, size=values.shape)
    values = np.clip(values, -INTENSITY_LIMIT, INTENSITY_LIMIT)
    return ScalarVolume(values), LabelVolume(labels, spec.num_classes)


def split_indices(n_patients: int, train_fraction: float, seed: int):
    """Random disjoint (train, test) patient index lists, each sorted and non-empty."""
    if n_patients < 2:
        raise ValueError(f"At least 2 patients are needed for a split, got {n_patients}.")
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"Train fraction must lie in (0, 1), got {train_fraction}.")
    n_train = min(max(round(n_patients * train_fraction), 1), n_patients - 1)
    order = np.random.default_rng([seed, n_patients]).permutation(n_patients)
    return sorted(order[:n_train].tolist()), sorted(order[n_train:].tolist())


def generate_dataset(
    spec: PhantomSpec,
    n_patients: int,
    train_fraction: float = 0.9,
    downsample_factor: int = 1,
) -> PhantomDataset:
    """Generate `n_patients` phantoms and split them into train and test sets.

    Args:
        spec: Anatomy at the working resolution.
        n_patients: Number of patients, at least 2.
        train_fraction: Share of patients used for training, in (0, 1).
        downsample_factor: When above 1, patients are rendered `factor` times finer and
            downsampled back, as clinical volumes are before training.

    Raises:
        ValueError: For fewer than 2 patients, a fraction outside (0, 1) or a factor below 1.
    """
    if downsample_factor < 1:
        raise ValueError(f"Downsample factor must be at least 1, got {downsample_factor}.")
    train_ids, test_ids = split_indices(n_patients, train_fraction, spec.seed)
    render_spec = spec.scaled(downsample_factor) if downsample_factor > 1 else spec

    def make(index: int) -> Patient:
        image, labels = generate(render_spec, index)
        if downsample_factor > 1:
            image = downsample(image, downsample_factor)
            labels = downsample(labels, downsample_factor)
        return Patient(index, image, labels)

    logger.info(
        "Generating %d phantoms (%d train, %d test) at %s",
        n_patients,
        len(train_ids),
        len(test_ids),
        tuple(spec.shape),
    )
    return PhantomDataset(
        spec, tuple(make(i) for i in train_ids), tuple(make(i) for i in test_ids)
    )
