# pylint: disable=too-few-public-methods
"""
Dense volume types, the batched Tensor5 convention and the VVOL file format.

Volumes are indexed ``values[x, y, z]`` and are laid out x-fastest on disk and in
``flat_index``. Tensor5 arrays are plain numpy arrays of shape (batch, channel, x, y, z) in
C order, i.e. z-fastest within a channel and channel-major within a sample.
"""

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import numpy.typing as npt

logger = logging.getLogger(__name__)

Tensor5 = npt.NDArray[np.floating]

VVOL_MAGIC = b"VVOL"
VVOL_VERSION = 1
DTYPE_SCALAR = 0
DTYPE_LABEL = 1
_HEADER = struct.Struct("<4sBBBBIII")
_MAX_VOXELS = np.iinfo(np.intp).max


class VolumeFormatError(ValueError):
    """A VVOL file could not be decoded."""


class BadMagicError(VolumeFormatError):
    """The file does not start with the VVOL magic."""


class UnsupportedVersionError(VolumeFormatError):
    """The VVOL version is not understood."""


class TruncatedPayloadError(VolumeFormatError):
    """The header or payload is shorter than the header announces."""


class DtypeMismatchError(VolumeFormatError):
    """The stored element type is unknown or not the one requested."""


class LabelRangeError(VolumeFormatError):
    """A stored label lies outside [0, num_classes)."""


@dataclass(frozen=True)
class Shape3:
    """Voxel extents of a volume."""

    nx: int
    ny: int
    nz: int

    def __post_init__(self):
        for axis, extent in zip("xyz", self):
            if int(extent) != extent or extent < 1:
                raise ValueError(f"Extent n{axis} must be a positive integer, got {extent}.")
        if self.nx * self.ny * self.nz > _MAX_VOXELS:
            raise ValueError(f"Shape {tuple(self)} exceeds the addressable voxel count.")

    def __iter__(self):
        return iter((self.nx, self.ny, self.nz))

    @classmethod
    def of(cls, extents) -> "Shape3":
        """Build a Shape3 from any 3-sequence or an existing Shape3."""
        if isinstance(extents, Shape3):
            return extents
        nx, ny, nz = (int(extent) for extent in extents)
        return cls(nx, ny, nz)

    @property
    def voxels(self) -> int:
        """Total voxel count."""
        return self.nx * self.ny * self.nz


def flat_index(shape: Shape3, x: int, y: int, z: int) -> int:
    """Flat position of voxel (x, y, z) in the x-fastest layout used on disk."""
    return x + shape.nx * (y + shape.ny * z)


def _frozen(values: np.ndarray) -> np.ndarray:
    values = np.array(values, copy=True)
    values.flags.writeable = False
    return values


@dataclass(frozen=True)
class ScalarVolume:
    """A 3D intensity grid in arbitrary units."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 3:
            raise ValueError(f"A scalar volume must be 3D, got {values.ndim} dimensions.")
        Shape3.of(values.shape)
        if not np.all(np.isfinite(values)):
            raise ValueError("Scalar volume contains non-finite values.")
        object.__setattr__(self, "values", _frozen(values.astype(np.float32)))

    @property
    def shape(self) -> Shape3:
        """Extents of the volume."""
        return Shape3.of(self.values.shape)


@dataclass(frozen=True)
class LabelVolume:
    """A 3D grid of class ids in [0, num_classes)."""

    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3:
            raise ValueError(f"A label volume must be 3D, got {labels.ndim} dimensions.")
        Shape3.of(labels.shape)
        if not 1 <= self.num_classes <= 255:
            raise ValueError(f"num_classes must be in [1, 255], got {self.num_classes}.")
        if not np.issubdtype(labels.dtype, np.integer):
            raise TypeError(f"Labels must be integers, got {labels.dtype}.")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise LabelRangeError(
                f"Labels must lie in [0, {self.num_classes}), "
                f"found [{labels.min()}, {labels.max()}]."
            )
        object.__setattr__(self, "labels", _frozen(labels.astype(np.uint8)))

    @property
    def shape(self) -> Shape3:
        """Extents of the volume."""
        return Shape3.of(self.labels.shape)


@dataclass(frozen=True)
class ProbabilityMap:
    """Per-class probabilities, shape (num_classes, nx, ny, nz)."""

    probabilities: np.ndarray

    def __post_init__(self):
        probabilities = np.asarray(self.probabilities)
        if probabilities.ndim != 4 or probabilities.shape[0] < 1:
            raise ValueError(
                f"A probability map must be (L, nx, ny, nz), got {probabilities.shape}."
            )
        Shape3.of(probabilities.shape[1:])
        if not np.all(np.isfinite(probabilities)):
            raise ValueError("Probability map contains non-finite values.")
        object.__setattr__(self, "probabilities", _frozen(probabilities.astype(np.float32)))

    @property
    def shape(self) -> Shape3:
        """Spatial extents of the map."""
        return Shape3.of(self.probabilities.shape[1:])

    @property
    def num_classes(self) -> int:
        """Number of class channels."""
        return self.probabilities.shape[0]


def ensure_tensor5(values: np.ndarray, name: str = "tensor") -> np.ndarray:
    """Check that `values` follows the Tensor5 convention and return it unchanged.

    Raises:
        ValueError: If the array is not 5D or has an empty axis.
    """
    if values.ndim != 5:
        raise ValueError(f"{name} must be (batch, channel, x, y, z), got shape {values.shape}.")
    if min(values.shape) < 1:
        raise ValueError(f"{name} has an empty axis: {values.shape}.")
    return values


def assert_finite(values: np.ndarray, name: str = "tensor"):
    """Raise if any element is NaN or infinite."""
    if not np.all(np.isfinite(values)):
        raise FloatingPointError(f"{name} contains non-finite values.")


def one_hot_array(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    """One-hot encode an integer array of any shape; the class axis is inserted first."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise LabelRangeError(f"Labels must lie in [0, {num_classes}).")
    encoded = np.eye(num_classes, dtype=dtype)[labels]
    return np.moveaxis(encoded, -1, 0)


def one_hot(labels: LabelVolume) -> np.ndarray:
    """Encode a label volume as a (1, L, nx, ny, nz) Tensor5 of zeros and ones."""
    return one_hot_array(labels.labels, labels.num_classes)[np.newaxis]


def standardize(volume: ScalarVolume) -> ScalarVolume:
    """Z-score a volume's intensities; a constant volume maps to zeros."""
    values = volume.values.astype(np.float64)
    std = values.std()
    centred = values - values.mean()
    if std > 0:
        centred /= std
    return ScalarVolume(centred)


def write_volume(volume: ScalarVolume | LabelVolume | ProbabilityMap, path):
    """Write a volume as VVOL.

    Scalar volumes are dtype 0 with num_classes 0, label volumes dtype 1 with their class
    count and probability maps dtype 0 with num_classes = L, followed by L class-major
    channels. Every payload is x-fastest little-endian.

    Args:
        volume: The volume to store.
        path: Destination file; parent directories are created.
    """
    if isinstance(volume, LabelVolume):
        dtype, num_classes = DTYPE_LABEL, volume.num_classes
        payload = volume.labels.astype("<u1").tobytes(order="F")
    elif isinstance(volume, ProbabilityMap):
        dtype, num_classes = DTYPE_SCALAR, volume.num_classes
        payload = b"".join(
            channel.astype("<f4").tobytes(order="F") for channel in volume.probabilities
        )
    elif isinstance(volume, ScalarVolume):
        dtype, num_classes = DTYPE_SCALAR, 0
        payload = volume.values.astype("<f4").tobytes(order="F")
    else:
        raise TypeError(f"Cannot write {type(volume).__name__} as VVOL.")
    shape = volume.shape
    header = _HEADER.pack(
        VVOL_MAGIC, VVOL_VERSION, dtype, num_classes, 0, shape.nx, shape.ny, shape.nz
    )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fd:
        fd.write(header)
        fd.write(payload)
    logger.debug("Wrote %s volume %s to %s", type(volume).__name__, tuple(shape), path)


def read_volume(path, num_classes: int | None = None, expect: str | None = None):
    """Read a VVOL file.

    Args:
        path: Source file.
        num_classes: For label files, the class count the labels must respect; defaults to
            the count stored in the header.
        expect: Optional "scalar", "label" or "probability" to reject other kinds.

    Returns:
        ScalarVolume | LabelVolume | ProbabilityMap: The decoded volume.

    Raises:
        BadMagicError, UnsupportedVersionError, TruncatedPayloadError, DtypeMismatchError,
        LabelRangeError: Each naming the offending field.
    """
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != VVOL_MAGIC:
        raise BadMagicError(f"{path}: bad magic {data[:4]!r}, expected {VVOL_MAGIC!r}.")
    if len(data) < _HEADER.size:
        raise TruncatedPayloadError(
            f"{path}: header has {len(data)} bytes, expected {_HEADER.size}."
        )
    _, version, dtype, stored_classes, _, nx, ny, nz = _HEADER.unpack_from(data)
    if version != VVOL_VERSION:
        raise UnsupportedVersionError(f"{path}: version {version} is not supported.")
    try:
        shape = Shape3(nx, ny, nz)
    except ValueError as e:
        raise VolumeFormatError(f"{path}: bad extents in header: {e}") from e
    if dtype == DTYPE_LABEL:
        if stored_classes < 1:
            raise LabelRangeError(
                f"{path}: header num_classes is {stored_classes}, a label volume needs 1 or more."
            )
        kind, element_size, channels = "label", 1, 1
    elif dtype == DTYPE_SCALAR:
        kind = "probability" if stored_classes else "scalar"
        element_size, channels = 4, max(stored_classes, 1)
    else:
        raise DtypeMismatchError(f"{path}: unknown dtype code {dtype}.")
    if expect is not None and expect != kind:
        raise DtypeMismatchError(f"{path}: holds a {kind} volume, expected {expect}.")

    expected = shape.voxels * element_size * channels
    payload = data[_HEADER.size :]
    if len(payload) < expected:
        raise TruncatedPayloadError(
            f"{path}: payload has {len(payload)} bytes, header announces {expected}."
        )
    if len(payload) > expected:
        raise VolumeFormatError(f"{path}: {len(payload) - expected} unexpected trailing bytes.")

    if kind == "label":
        labels = np.frombuffer(payload, dtype="<u1").reshape(tuple(shape), order="F")
        classes = stored_classes if num_classes is None else num_classes
        if not 1 <= classes <= 255:
            raise LabelRangeError(f"{path}: num_classes must be in [1, 255], got {classes}.")
        if labels.size and labels.max() >= classes:
            raise LabelRangeError(
                f"{path}: label {labels.max()} out of range for {classes} classes."
            )
        return LabelVolume(labels, classes)
    values = np.frombuffer(payload, dtype="<f4")
    if kind == "probability":
        return ProbabilityMap(
            values.reshape((channels,) + tuple(reversed(tuple(shape)))).transpose(0, 3, 2, 1)
        )
    return ScalarVolume(values.reshape(tuple(shape), order="F"))
