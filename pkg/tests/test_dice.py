"""Tests for the Dice coefficient, the soft Dice loss, class weights and reports"""

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from weighted_dice_seg.core.dice import (
    DIVERGED,
    ClassCounts,
    ClassWeights,
    DiceInputError,
    DiceReport,
    WeightingScheme,
    best_runs,
    class_counts,
    class_weights,
    dice_report,
    hard_dsc,
    mean_dice_report,
    multiclass_dice_loss,
    report_table,
    soft_dice_grad,
    soft_dice_loss,
)
from weighted_dice_seg.core.ops import gradient_check, softmax_channels
from weighted_dice_seg.core.voxelgrid import LabelVolume, one_hot

TABLE_UNIFORM = [99.9, 80.4, 78.6, 96.5, 94.7, 96.3, 77.3, 82.7]
ORGANS = [
    "background",
    "artery",
    "portal vein",
    "liver",
    "spleen",
    "stomach",
    "gallbladder",
    "pancreas",
]


def line(labels, num_classes=2):
    """A label volume laid out along x."""
    return LabelVolume(np.asarray(labels).reshape(-1, 1, 1), num_classes)


class TestHardDsc:
    """Tests for hard_dsc"""

    def test_perfect(self):
        """Identical volumes score 1."""
        labels = line([0, 1, 1, 0])
        assert hard_dsc(labels, labels, 1) == 1.0

    def test_disjoint(self):
        """Disjoint masks score 0."""
        assert hard_dsc(line([1, 1, 0, 0]), line([0, 0, 1, 1]), 1) == 0.0

    def test_partial_overlap(self):
        """|S|=4, |R|=6 and overlap 3 give 0.6."""
        seg = line([1, 1, 1, 1, 0, 0, 0, 0, 0, 0])
        truth = line([0, 1, 1, 1, 1, 1, 1, 0, 0, 0])
        assert hard_dsc(seg, truth, 1) == pytest.approx(0.6)

    def test_absent_class(self):
        """A class missing from both volumes scores 1."""
        assert hard_dsc(line([0, 0], 3), line([0, 0], 3), 2) == 1.0

    def test_mismatch(self):
        """Shapes and class counts must agree."""
        with pytest.raises(DiceInputError):
            hard_dsc(line([0, 1]), line([0, 1, 1]), 1)
        with pytest.raises(DiceInputError):
            hard_dsc(line([0, 1], 2), line([0, 1], 3), 1)
        with pytest.raises(DiceInputError):
            hard_dsc(line([0, 1]), line([0, 1]), 2)


class TestSoftDice:
    """Tests for soft_dice_loss and soft_dice_grad"""

    def test_perfect_prediction(self):
        """s == r with k >= 1 foreground voxels gives exactly -1."""
        r = np.array([0.0, 1.0, 1.0, 0.0, 1.0])
        assert soft_dice_loss(r, r) == -1.0

    def test_half_prediction(self):
        """s = 0.5 on 8 voxels with 4 foreground gives -0.5."""
        r = np.array([1.0] * 4 + [0.0] * 4)
        assert soft_dice_loss(np.full(8, 0.5), r) == pytest.approx(-0.5)

    def test_empty(self):
        """An empty class with an empty prediction gives 0."""
        assert soft_dice_loss(np.zeros(8), np.zeros(8)) == 0.0
        assert not soft_dice_grad(np.zeros(8), np.zeros(8)).any()

    def test_single_voxel_gradient(self):
        """s=0.5, r=1: A=0.5, B=1.5, gradient -2(1.5 - 0.5)/2.25."""
        grad = soft_dice_grad(np.array([0.5]), np.array([1.0]))
        assert grad[0] == pytest.approx(-2.0 / 2.25)

    def test_background_gradient_non_negative(self):
        """Where r is zero the gradient is 2A/B^2 >= 0."""
        rng = np.random.default_rng(3)
        s = rng.random(16)
        r = (rng.random(16) > 0.5).astype(float)
        grad = soft_dice_grad(s, r)
        assert np.all(grad[r == 0] >= 0)

    @pytest.mark.parametrize("seed", range(20))
    def test_finite_difference(self, seed):
        """Random 4^3 patches with one to three classes agree with central differences."""
        rng = np.random.default_rng(seed)
        num_classes = 1 + seed % 3
        labels = rng.integers(0, num_classes, size=(4, 4, 4))
        for label in range(num_classes):
            r = (labels == label).astype(float)
            point = rng.uniform(0.05, 1.0, size=(4, 4, 4))
            report = gradient_check(
                lambda s, r=r: (soft_dice_loss(s, r), soft_dice_grad(s, r)), point, h=1e-3
            )
            assert report.max_error <= 1e-4

    @given(
        hnp.arrays(np.uint8, 12, elements=st.sampled_from([0, 1])),
        hnp.arrays(np.uint8, 12, elements=st.sampled_from([0, 1])),
    )
    @settings(max_examples=200, deadline=None)
    def test_binary_matches_hard_dsc(self, s, r):
        """On binary masks the soft loss is minus the hard coefficient."""
        assume(s.any() or r.any())
        loss = soft_dice_loss(s.astype(np.float64), r.astype(np.float64))
        assert loss == pytest.approx(-hard_dsc(line(s), line(r), 1), abs=1e-12)

    @given(
        hnp.arrays(np.float64, 12, elements=st.floats(0, 1)),
        hnp.arrays(np.float64, 12, elements=st.sampled_from([0.0, 1.0])),
    )
    @settings(max_examples=100, deadline=None)
    def test_bounded(self, s, r):
        """The loss lies in [-1, 0] for s in [0, 1] and binary r."""
        loss = soft_dice_loss(s, r)
        assert -1.0 - 1e-12 <= loss <= 0.0

    def test_non_finite(self):
        """NaN predictions are rejected."""
        with pytest.raises(DiceInputError):
            soft_dice_loss(np.array([np.nan]), np.array([1.0]))


class TestClassWeights:
    """Tests for class_counts and class_weights"""

    def test_counts(self):
        """[0, 0, 1, 2] with L=3 counts (2, 1, 1)."""
        counts = class_counts([line([0, 0, 1, 2], 3)])
        assert counts.per_class.tolist() == [2, 1, 1]
        assert counts.total == 4

    def test_counts_empty(self):
        """An empty collection counts zeros."""
        counts = class_counts([], num_classes=3)
        assert counts.per_class.tolist() == [0, 0, 0]
        assert counts.total == 0
        with pytest.raises(ValueError):
            class_counts([])

    def test_counts_additive(self):
        """Two copies double the counts."""
        volume = line([0, 1, 1, 2, 2, 2], 3)
        single = class_counts([volume])
        double = class_counts([volume, volume])
        np.testing.assert_array_equal(double.per_class, 2 * single.per_class)

    def test_counts_mismatch(self):
        """Volumes with different class counts cannot be pooled."""
        with pytest.raises(ValueError):
            class_counts([line([0, 1], 2), line([0, 1], 3)])

    def test_uniform(self):
        """Uniform weights are all 1 whatever the counts."""
        weights = class_weights(ClassCounts([990, 9, 1], 1000), "uniform")
        np.testing.assert_array_equal(weights.w, [1.0, 1.0, 1.0])

    def test_simple_and_square(self):
        """N=1000, L=4, |R|=50 give 1000/201 and 1000/10001."""
        counts = ClassCounts([50, 50, 400, 500], 1000)
        simple = class_weights(counts, WeightingScheme.SIMPLE)
        square = class_weights(counts, WeightingScheme.SQUARE)
        assert simple.w[0] == pytest.approx(1000 / 201)
        assert simple.w[0] == pytest.approx(4.9751, abs=1e-4)
        assert square.w[0] == pytest.approx(1000 / 10001)
        assert square.w[0] == pytest.approx(0.09999, abs=1e-5)

    def test_absent_class_finite(self):
        """A class with no voxels still gets a finite weight N / eps."""
        weights = class_weights(ClassCounts([10, 0], 10), WeightingScheme.SIMPLE)
        assert weights.w[1] == 10.0

    def test_zero_total(self):
        """Weights cannot be derived without voxels."""
        with pytest.raises(ValueError):
            class_weights(ClassCounts([0, 0], 0), WeightingScheme.SQUARE)

    @given(
        st.lists(st.integers(0, 10_000), min_size=2, max_size=8).filter(lambda c: sum(c) > 0),
        st.sampled_from([WeightingScheme.SIMPLE, WeightingScheme.SQUARE]),
    )
    @settings(max_examples=1000, deadline=None)
    def test_rarer_classes_weigh_more(self, per_class, scheme):
        """Weights never increase with the class frequency."""
        weights = class_weights(ClassCounts(per_class, sum(per_class)), scheme)
        order = np.argsort(per_class, kind="stable")
        assert np.all(np.diff(weights.w[order]) <= 0)

    @given(st.lists(st.integers(0, 10_000), min_size=2, max_size=8).filter(lambda c: sum(c) > 0))
    @settings(max_examples=1000, deadline=None)
    def test_square_suppresses_more(self, per_class):
        """Between a frequent and a rare class square weights differ more than simple ones."""
        counts = ClassCounts(per_class, sum(per_class))
        simple = class_weights(counts, WeightingScheme.SIMPLE).w
        square = class_weights(counts, WeightingScheme.SQUARE).w
        for frequent, count in enumerate(per_class):
            for rare, other in enumerate(per_class):
                if count >= other:
                    ratio_square = square[frequent] / square[rare]
                    ratio_simple = simple[frequent] / simple[rare]
                    assert ratio_square <= ratio_simple * (1 + 1e-12)

    def test_as_dict(self):
        """Weights serialise with their scheme and class names."""
        document = ClassWeights.uniform(2).as_dict(["background", "liver"])
        assert document == {
            "scheme": "uniform",
            "epsilon": 1.0,
            "weights": {"background": 1.0, "liver": 1.0},
        }


class TestMulticlassDiceLoss:
    """Tests for multiclass_dice_loss"""

    def test_perfect(self):
        """A perfect one-hot prediction with uniform weights gives -1."""
        target = one_hot(line([0, 1, 2, 2, 1, 0], 3))
        result = multiclass_dice_loss(target, target, ClassWeights.uniform(3))
        assert result.loss == -1.0

    def test_linear_in_weights(self):
        """Doubling every weight doubles loss and gradient exactly."""
        rng = np.random.default_rng(5)
        pred, _ = softmax_channels(rng.normal(size=(2, 3, 2, 2, 2)))
        target = np.stack([one_hot(line(rng.integers(0, 3, 8), 3))[0] for _ in range(2)])
        target = target.reshape(pred.shape)
        simple = WeightingScheme.SIMPLE
        single = multiclass_dice_loss(pred, target, ClassWeights(simple, [1, 1, 1]))
        double = multiclass_dice_loss(pred, target, ClassWeights(simple, [2, 2, 2]))
        assert double.loss == 2 * single.loss
        np.testing.assert_array_equal(double.gradient, 2 * single.gradient)

    def test_matches_per_channel_terms(self):
        """The loss is the sum of w_l / L times each channel's soft Dice."""
        rng = np.random.default_rng(6)
        labels = LabelVolume(rng.integers(0, 2, size=(4, 4, 4)), 2)
        target = one_hot(labels)
        pred, _ = softmax_channels(rng.normal(size=(1, 2, 4, 4, 4)))
        weights = ClassWeights(WeightingScheme.SQUARE, [0.3, 1.7])
        result = multiclass_dice_loss(pred, target, weights)
        expected = sum(
            weights.w[label] / 2 * soft_dice_loss(pred[:, label], target[:, label])
            for label in range(2)
        )
        assert result.loss == pytest.approx(expected, rel=1e-12)

    def test_finite_difference(self):
        """The gradient with respect to the prediction agrees with central differences."""
        rng = np.random.default_rng(7)
        target = one_hot(LabelVolume(rng.integers(0, 3, size=(2, 2, 2)), 3))
        weights = ClassWeights(WeightingScheme.SIMPLE, [0.5, 2.0, 4.0])

        def objective(pred):
            result = multiclass_dice_loss(pred, target, weights)
            return result.loss, result.gradient

        report = gradient_check(objective, rng.uniform(0.05, 1.0, size=target.shape))
        assert report.passed, report.max_error

    def test_shape_and_weight_checks(self):
        """Prediction, target and weights must agree."""
        target = one_hot(line([0, 1], 2))
        with pytest.raises(DiceInputError):
            multiclass_dice_loss(target[:, :1], target, ClassWeights.uniform(2))
        with pytest.raises(DiceInputError):
            multiclass_dice_loss(target, target, ClassWeights.uniform(3))


class TestReports:
    """Tests for DiceReport and the report tables"""

    def test_table_uniform_column(self):
        """The published uniform column aggregates to AVG 88.3, MAX 99.9, MIN 77.3."""
        report = DiceReport.from_scores(ORGANS, [value / 100 for value in TABLE_UNIFORM])
        assert report.percentages()[-3:] == ["88.3", "99.9", "77.3"]
        assert report.avg == pytest.approx(0.883)

    def test_perfect_report(self):
        """pred == truth scores 1 everywhere."""
        labels = LabelVolume(np.arange(27).reshape(3, 3, 3) % 4, 4)
        report = dice_report(labels, labels, ["a", "b", "c", "d"])
        np.testing.assert_array_equal(report.per_class, 1.0)
        assert report.avg == report.max == report.min == 1.0

    def test_two_class_average(self):
        """Scores (1.0, 0.6) average to 0.8."""
        report = DiceReport.from_scores(["background", "organ"], [1.0, 0.6])
        assert report.avg == pytest.approx(0.8)
        assert report.rows()[-3:] == [("AVG", report.avg), ("MAX", 1.0), ("MIN", 0.6)]

    def test_out_of_range_scores(self):
        """Scores outside [0, 1] are rejected."""
        with pytest.raises(ValueError):
            DiceReport.from_scores(["a"], [1.2])

    def test_mean_report(self):
        """Reports are averaged class by class."""
        first = DiceReport.from_scores(["a", "b"], [1.0, 0.4])
        second = DiceReport.from_scores(["a", "b"], [0.8, 0.6])
        mean = mean_dice_report([first, second])
        np.testing.assert_allclose(mean.per_class, [0.9, 0.5])
        assert mean.avg == pytest.approx(0.7)

    def test_report_table(self):
        """One row per class plus AVG/MAX/MIN, one column per run, diverged runs marked."""
        rng = np.random.default_rng(8)
        reports = {
            "uniform_lr0.001": DiceReport.from_scores(ORGANS, rng.uniform(0.5, 1.0, 8)),
            "simple_lr0.01": None,
            "square_lr0.001": DiceReport.from_scores(ORGANS, rng.uniform(0.5, 1.0, 8)),
        }
        table = report_table(reports)
        assert table.columns == ["class", *reports]
        assert table.height == len(ORGANS) + 3
        assert table["class"].to_list()[-3:] == ["AVG", "MAX", "MIN"]
        assert set(table["simple_lr0.01"].to_list()) == {DIVERGED}
        for run in ("uniform_lr0.001", "square_lr0.001"):
            values = [float(value) for value in table[run].to_list()]
            assert values[-3] == pytest.approx(np.mean(values[:-3]), abs=0.1)
            assert values[-2] == max(values[:-3])
            assert values[-1] == min(values[:-3])

    def test_best_runs(self):
        """Each row names the run with the highest score."""
        reports = {
            "a": DiceReport.from_scores(["x", "y"], [0.9, 0.2]),
            "b": None,
            "c": DiceReport.from_scores(["x", "y"], [0.5, 0.7]),
        }
        table = best_runs(reports)
        assert table["class"].to_list() == ["x", "y", "AVG", "MAX", "MIN"]
        assert table["best_run"].to_list() == ["a", "c", "c", "a", "c"]
        assert table["dsc"].to_list()[:2] == ["90.0", "70.0"]

    def test_all_diverged(self):
        """With explicit class names a table of diverged runs still renders."""
        table = report_table({"a": None, "b": None}, ["x", "y"])
        assert table["class"].to_list() == ["x", "y", "AVG", "MAX", "MIN"]
        assert set(table["a"].to_list()) == {"diverged"}
        assert set(table["b"].to_list()) == {"diverged"}

    def test_all_diverged_without_names(self):
        """Without class names the rows cannot be named when no run completed."""
        with pytest.raises(ValueError):
            report_table({"a": None})

    def test_explicit_names_must_match(self):
        """Completed runs must cover the given classes."""
        with pytest.raises(ValueError):
            report_table({"a": DiceReport.from_scores(["x", "y"], [0.9, 0.2])}, ["x", "z"])
