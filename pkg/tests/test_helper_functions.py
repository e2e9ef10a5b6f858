"""This module contains tests for the helper_functions.py"""

import pytest

from weighted_dice_seg.utilities.helper_functions import (
    calculate_percentage,
    derive_seed,
    format_percentage,
    parse_float_list,
    parse_shape,
)


class TestCalculatePercentage:
    """Tests for the calculate_percentage function"""

    def test_calculate_percentage_valid_inputs(self):
        """Tests the function with valid dividend and divisor values."""
        assert calculate_percentage(25, 100) == 25.0
        assert calculate_percentage(3.14, 12.56) == 25.0
        assert calculate_percentage(1, 1) == 100.0

    def test_calculate_percentage_zero_divisor(self):
        """Tests the function with a zero divisor, expecting 0.0 returned."""
        assert calculate_percentage(5, 0) == 0.0

    def test_calculate_percentage_negative_values(self):
        """Tests the function with negative dividend and/or divisor."""
        assert calculate_percentage(-20, 100) == -20.0
        assert calculate_percentage(15, -75) == -20.0

    def test_calculate_percentage_rounding(self):
        """Tests the function's rounding behavior."""
        assert calculate_percentage(1.2345, 10, decimals=2) == 12.34
        assert calculate_percentage(5.9999, 10, decimals=2) == 60.0
        assert calculate_percentage(0.883, 1) == 88.3


class TestFormatPercentage:
    """Tests for the format_percentage function"""

    def test_one_decimal(self):
        """Dice table entries carry one decimal."""
        assert format_percentage(0.883) == "88.3"
        assert format_percentage(1.0) == "100.0"
        assert format_percentage(0.0) == "0.0"

    def test_out_of_range(self):
        """Ratios outside [0, 1] are rejected."""
        with pytest.raises(ValueError, match="between 0 and 1"):
            format_percentage(1.5)
        with pytest.raises(ValueError):
            format_percentage(-0.1)


class TestDeriveSeed:
    """Tests for the derive_seed function"""

    def test_deterministic(self):
        """Same tokens give the same seed."""
        assert derive_seed(0, "uniform", 0.001) == derive_seed(0, "uniform", 0.001)

    def test_tokens_matter(self):
        """Different schemes, rates or base seeds give different seeds."""
        seeds = {
            derive_seed(0, "uniform", 0.001),
            derive_seed(0, "uniform", 0.01),
            derive_seed(0, "simple", 0.001),
            derive_seed(1, "uniform", 0.001),
        }
        assert len(seeds) == 4

    def test_range(self):
        """Seeds fit in 32 bits."""
        assert 0 <= derive_seed(123, "init") < 2**32


class TestParsers:
    """Tests for parse_shape and parse_float_list"""

    def test_parse_shape(self):
        """One extent expands to all axes, three are kept."""
        assert parse_shape("32") == (32, 32, 32)
        assert parse_shape("32, 16,8") == (32, 16, 8)

    @pytest.mark.parametrize("text", ["", "1,2", "a", "0", "4,-4,4"])
    def test_parse_shape_invalid(self, text):
        """Malformed extents are rejected."""
        with pytest.raises(ValueError):
            parse_shape(text)

    def test_parse_float_list(self):
        """Comma separated rates."""
        assert parse_float_list("0.001,0.01") == [0.001, 0.01]
        assert parse_float_list("0.1") == [0.1]

    @pytest.mark.parametrize("text", ["", "x", "0.1,0", "-1"])
    def test_parse_float_list_invalid(self, text):
        """Empty, non-numeric and non-positive entries are rejected."""
        with pytest.raises(ValueError):
            parse_float_list(text)
