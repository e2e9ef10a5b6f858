# pylint: disable=too-few-public-methods
"""Manage the file based phantom datasets.

A dataset directory holds one VVOL pair per patient, a ``manifest.csv`` listing every
patient with its split and per-class voxel counts, and a ``dataset.yaml`` with the
class names and generation settings.
"""

import logging
from pathlib import Path

import numpy as np
import polars as pl
import yaml

from weighted_dice_seg.app.phantom import Patient, PhantomDataset
from weighted_dice_seg.core.voxelgrid import LabelVolume, ScalarVolume, read_volume, write_volume

logger = logging.getLogger(__name__)

MANIFEST = "manifest.csv"
METADATA = "dataset.yaml"
SPLITS = ("train", "test")


class PatientRecord:
    """The manager for one patient's image and label files."""

    def __init__(self, patient_id, dataset_root, num_classes):
        """Patient Record init"""
        self.patient_id = int(patient_id)
        self.dataset_root = Path(dataset_root)
        self.num_classes = num_classes
        self.image_data = None
        self.labels_data = None

    @property
    def image_path(self):
        """Get the path to the intensity file"""
        return self.dataset_root / f"patient_{self.patient_id}_img.vvol"

    @property
    def labels_path(self):
        """Get the path to the label file"""
        return self.dataset_root / f"patient_{self.patient_id}_lbl.vvol"

    @property
    def image(self) -> ScalarVolume:
        """Avoid loading the image until it is needed."""
        if self.image_data is None:
            self.image_data = read_volume(self.image_path, expect="scalar")
        return self.image_data

    @image.setter
    def image(self, value):
        self.image_data = value

    @property
    def labels(self) -> LabelVolume:
        """Avoid loading the labels until they are needed."""
        if self.labels_data is None:
            self.labels_data = read_volume(
                self.labels_path, num_classes=self.num_classes, expect="label"
            )
        return self.labels_data

    @labels.setter
    def labels(self, value):
        self.labels_data = value

    def counts(self) -> list[int]:
        """Voxels per class in this patient's labels."""
        labels = self.labels
        return np.bincount(labels.labels.ravel(), minlength=labels.num_classes).tolist()

    def save(self):
        """Commit the in-memory volumes to file."""
        self.dataset_root.mkdir(parents=True, exist_ok=True)
        write_volume(self.image, self.image_path)
        write_volume(self.labels, self.labels_path)

    def clear(self):
        """Clear the in-memory volumes."""
        self.image_data = None
        self.labels_data = None


class DataStore:
    """Data Store handle"""

    def __init__(self, dataset_root, load=True):
        """The datastore init method. With load=False nothing is read from disk."""
        self.dataset_root = Path(dataset_root)
        self.metadata = self.get_metadata() if load else {"classes": []}
        self.records: dict[str, list[PatientRecord]] = {split: [] for split in SPLITS}
        if load:
            self._load_manifest()

    def metadata_file(self):
        """get the path to the metadata file"""
        return self.dataset_root / METADATA

    def manifest_file(self):
        """get the path to the manifest file"""
        return self.dataset_root / MANIFEST

    def get_metadata(self):
        """get the dataset's metadata, else an empty description"""
        if not self.metadata_file().is_file():
            return {"classes": []}
        with self.metadata_file().open("r", encoding="utf-8") as fd:
            return yaml.safe_load(fd.read()) or {"classes": []}

    @property
    def class_names(self) -> list[str]:
        """Class names by id."""
        return list(self.metadata.get("classes", []))

    @property
    def num_classes(self) -> int:
        """Number of classes, background included."""
        return len(self.class_names)

    def _load_manifest(self):
        """Load the patient records listed in the manifest"""
        if not self.dataset_root.is_dir():
            logger.warning("Dataset directory %s is missing.", self.dataset_root)
            return
        if not self.manifest_file().is_file():
            logger.warning("No manifest found in %s", self.dataset_root)
            return
        manifest = pl.read_csv(self.manifest_file())
        for row in manifest.iter_rows(named=True):
            split = row["split"]
            if split not in self.records:
                logger.info("Skipping patient %s with unknown split %s", row["patient_id"], split)
                continue
            self.records[split].append(
                PatientRecord(row["patient_id"], self.dataset_root, self.num_classes or None)
            )

    def split(self, name) -> list[PatientRecord]:
        """All patient records of one split."""
        if name not in self.records:
            raise KeyError(f"Unknown split {name!r}, expected one of {SPLITS}.")
        return self.records[name]

    def pairs(self, name) -> list[tuple[ScalarVolume, LabelVolume]]:
        """(image, labels) pairs of one split, loaded from disk."""
        return [(record.image, record.labels) for record in self.split(name)]

    def add_patient(self, patient: Patient, split):
        """Add a generated patient to the datastore."""
        record = PatientRecord(patient.index, self.dataset_root, patient.labels.num_classes)
        record.image = patient.image
        record.labels = patient.labels
        self.split(split).append(record)
        return record

    def manifest(self) -> pl.DataFrame:
        """One row per patient: id, split and voxels per class."""
        rows = []
        for split in SPLITS:
            for record in self.records[split]:
                counts = record.counts()
                row = {"patient_id": record.patient_id, "split": split}
                row.update({f"count_class_{label}": count for label, count in enumerate(counts)})
                rows.append(row)
        return pl.DataFrame(rows).sort("patient_id")

    def save(self):
        """Commit all patients, the manifest and the metadata to file"""
        self.dataset_root.mkdir(parents=True, exist_ok=True)
        for split in SPLITS:
            for record in self.records[split]:
                record.save()
        self.manifest().write_csv(self.manifest_file())
        with self.metadata_file().open("w", encoding="utf-8") as fd:
            yaml.safe_dump(self.metadata, fd, sort_keys=False)
        logger.info(
            "Saved %d train and %d test patients to %s",
            len(self.records["train"]),
            len(self.records["test"]),
            self.dataset_root,
        )

    @classmethod
    def from_dataset(cls, dataset: PhantomDataset, dataset_root) -> "DataStore":
        """Build a datastore holding a generated dataset; call `save` to write it."""
        store = cls(dataset_root, load=False)
        spec = dataset.spec
        store.metadata = {
            "classes": list(spec.class_names),
            "shape": [int(extent) for extent in dataset.train[0].image.shape],
            "noise_sigma": float(spec.noise_sigma),
            "seed": int(spec.seed),
            "train_patients": len(dataset.train),
            "test_patients": len(dataset.test),
        }
        for patient in dataset.train:
            store.add_patient(patient, "train")
        for patient in dataset.test:
            store.add_patient(patient, "test")
        return store
