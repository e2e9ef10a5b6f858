"""Tests for the synthetic phantom generator"""

import numpy as np
import pytest

from weighted_dice_seg.app.phantom import (
    OrganSpec,
    PhantomSpec,
    generate,
    generate_dataset,
    split_indices,
)
from weighted_dice_seg.core.dice import class_counts
from weighted_dice_seg.core.voxelgrid import Shape3

BLOB = OrganSpec("blob", 1.0, ((5, 5), (5, 5), (5, 5)), ((2, 3), (2, 3), (2, 3)))


@pytest.fixture(name="spec", scope="module")
def spec_fixture():
    """The default abdominal phantom."""
    return PhantomSpec.from_config(seed=3)


class TestPhantomSpec:
    """Tests for PhantomSpec and OrganSpec"""

    def test_default(self, spec):
        """Background plus seven organs on a 48^3 grid."""
        assert spec.num_classes == 8
        assert spec.shape == Shape3(48, 48, 48)
        assert spec.class_names[0] == "background"
        assert len(set(spec.class_names)) == 8

    def test_imbalance_ratio(self, spec):
        """The largest organ is at least 30 times the smallest."""
        assert spec.imbalance_ratio() >= 30

    def test_intensities_separated(self, spec):
        """Class means differ pairwise by at least 2 sigma."""
        intensities = np.sort(spec.intensities)
        assert np.diff(intensities).min() >= 2 * spec.noise_sigma

    def test_organ_outside_volume(self):
        """Ellipsoids must fit inside the volume."""
        big = OrganSpec("big", 1.0, ((5, 5), (5, 5), (5, 5)), ((6, 6), (2, 2), (2, 2)))
        with pytest.raises(ValueError, match="does not fit"):
            PhantomSpec(shape=(12, 12, 12), organs=(big,))

    def test_intensities_too_close(self):
        """Class means closer than 2 sigma are rejected."""
        with pytest.raises(ValueError, match="2 sigma"):
            PhantomSpec(shape=(12, 12, 12), organs=(BLOB,), noise_sigma=0.6)

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"organs": ()},
            {"organs": (BLOB,), "noise_sigma": -0.1},
        ],
    )
    def test_invalid(self, kwargs):
        """No organs or a negative noise level are rejected."""
        with pytest.raises(ValueError):
            PhantomSpec(shape=(12, 12, 12), **kwargs)

    def test_bad_ranges(self):
        """Ranges need a low end below the high end and positive semi-axes."""
        with pytest.raises(ValueError):
            OrganSpec("x", 1.0, ((5, 4), (5, 5), (5, 5)), ((2, 3), (2, 3), (2, 3)))
        with pytest.raises(ValueError):
            OrganSpec("x", 1.0, ((5, 5), (5, 5), (5, 5)), ((0, 3), (2, 3), (2, 3)))

    def test_scaled(self, spec):
        """Scaling multiplies the grid, centres and semi-axes."""
        scaled = spec.scaled(2)
        assert scaled.shape == Shape3(96, 96, 96)
        assert scaled.organs[0].center[0] == tuple(2 * v for v in spec.organs[0].center[0])
        assert scaled.imbalance_ratio() == pytest.approx(spec.imbalance_ratio())
        with pytest.raises(ValueError):
            spec.scaled(0)


class TestGenerate:
    """Tests for generate"""

    def test_deterministic(self, spec):
        """The same (seed, patient) gives identical volumes; other patients differ."""
        image, labels = generate(spec, 4)
        again_image, again_labels = generate(spec, 4)
        np.testing.assert_array_equal(image.values, again_image.values)
        np.testing.assert_array_equal(labels.labels, again_labels.labels)
        other_image, _ = generate(spec, 5)
        assert not np.array_equal(image.values, other_image.values)

    def test_noiseless_is_piecewise_constant(self, spec):
        """Without noise every voxel holds its class mean."""
        noiseless = PhantomSpec.from_config(seed=3, noise_sigma=0.0)
        image, labels = generate(noiseless, 0)
        expected = noiseless.intensities[labels.labels].astype(np.float32)
        np.testing.assert_array_equal(image.values, expected)
        _, noisy_labels = generate(spec, 0)
        np.testing.assert_array_equal(labels.labels, noisy_labels.labels)

    @pytest.mark.parametrize("patient", [0, 1, 2])
    def test_histogram(self, spec, patient):
        """Every class appears and background is the largest."""
        _, labels = generate(spec, patient)
        counts = np.bincount(labels.labels.ravel(), minlength=spec.num_classes)
        assert counts.size == 8
        assert counts.min() >= 1
        assert counts.argmax() == 0
        assert labels.num_classes == 8

    def test_noise_level(self, spec):
        """Background intensities scatter with the configured sigma."""
        image, labels = generate(spec, 1)
        background = image.values[labels.labels == 0]
        assert abs(float(background.mean())) < 0.01
        assert float(background.std()) == pytest.approx(spec.noise_sigma, rel=0.05)

    def test_later_classes_win(self):
        """Where ellipsoids overlap the higher class id is painted."""
        first = OrganSpec("first", 1.0, ((6, 6), (6, 6), (6, 6)), ((3, 3), (3, 3), (3, 3)))
        second = OrganSpec("second", 2.0, ((6, 6), (6, 6), (6, 6)), ((2, 2), (2, 2), (2, 2)))
        spec = PhantomSpec(shape=(13, 13, 13), organs=(first, second), noise_sigma=0.0)
        _, labels = generate(spec, 0)
        assert labels.labels[6, 6, 6] == 2
        assert labels.labels[6, 6, 9] == 1
        assert labels.labels[0, 0, 0] == 0


class TestDataset:
    """Tests for split_indices and generate_dataset"""

    def test_split(self):
        """10 patients at 0.9 give 9 train and 1 test, disjoint and complete."""
        train, test = split_indices(10, 0.9, 0)
        assert len(train) == 9 and len(test) == 1
        assert sorted(train + test) == list(range(10))

    def test_split_never_empty(self):
        """Both sides keep at least one patient."""
        assert [len(part) for part in split_indices(2, 0.99, 0)] == [1, 1]
        assert [len(part) for part in split_indices(3, 0.01, 0)] == [1, 2]

    @pytest.mark.parametrize("n, fraction", [(1, 0.5), (10, 0.0), (10, 1.0), (10, 1.5)])
    def test_split_invalid(self, n, fraction):
        """Fewer than two patients or a fraction outside (0, 1) are rejected."""
        with pytest.raises(ValueError):
            split_indices(n, fraction, 0)

    def test_generate_dataset(self, spec):
        """Patients keep their index and match generate."""
        dataset = generate_dataset(spec, 10, 0.9)
        train_ids = [patient.index for patient in dataset.train]
        test_ids = [patient.index for patient in dataset.test]
        assert len(train_ids) == 9 and len(test_ids) == 1
        assert not set(train_ids) & set(test_ids)
        patient = dataset.test[0]
        _, labels = generate(spec, patient.index)
        np.testing.assert_array_equal(patient.labels.labels, labels.labels)

    def test_imbalance(self, spec):
        """Over 20 patients the largest organ outnumbers the smallest 30 to 1."""
        dataset = generate_dataset(spec, 20)
        counts = class_counts(
            [patient.labels for patient in dataset.train + dataset.test], spec.num_classes
        )
        organs = counts.per_class[1:]
        assert organs.max() / organs.min() >= 30
        assert counts.per_class[0] == counts.per_class.max()

    def test_invalid_downsample_factor(self, spec):
        """Factors below 1 are rejected."""
        with pytest.raises(ValueError, match="Downsample factor"):
            generate_dataset(spec, 2, 0.5, downsample_factor=0)

    def test_downsampled(self, spec):
        """A factor 2 dataset is rendered finer and reduced back to the working grid."""
        dataset = generate_dataset(spec, 2, 0.5, downsample_factor=2)
        for patient in dataset.train + dataset.test:
            assert patient.image.shape == Shape3(48, 48, 48)
            assert patient.labels.shape == Shape3(48, 48, 48)
            assert patient.labels.num_classes == 8
            assert patient.labels.labels.max() >= 1
