""" This module contains helper functions for the weighted_dice_seg package """

import hashlib


def calculate_percentage(dividend: int | float, divisor: int | float, decimals: int = 1) -> float:
    """
    Calculates the percentage that the `dividend` represents of the `divisor`
    (dividend/divisor)*100. If the `divisor` is zero it returns 0.0.

    Args:
        dividend (int|float): The value we want to express as a percentage of the total.
        divisor (int|float): The total value of which the `dividend` is a part.
        decimals (int): Number of decimal places kept. Dice tables use one.

    Returns:
        float: The percentage value, rounded to `decimals` decimal places.
    """
    if divisor == 0:
        return 0.0
    percentage = (dividend / divisor) * 100
    return round(percentage, decimals)


def format_percentage(ratio: float) -> str:
    """Render a ratio in [0, 1] as a one-decimal percentage string, e.g. 0.883 -> "88.3".

    Args:
        ratio: The ratio to render.

    Raises:
        ValueError: If the ratio lies outside [0, 1].
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"Ratio must be between 0 and 1, got {ratio}.")
    return f"{calculate_percentage(ratio, 1.0):.1f}"


def derive_seed(base_seed: int, *tokens) -> int:
    """Derive a child seed from a base seed and a sequence of tokens.

    The derivation hashes the textual form of the tokens, so ("uniform", 0.001) always maps
    to the same 32-bit seed for a given base seed, independent of run order or process.

    Args:
        base_seed: The experiment-wide seed.
        tokens: Anything with a stable `str()`, e.g. a weighting scheme and a learning rate.

    Returns:
        int: A seed in [0, 2**32).
    """
    text = "/".join([str(int(base_seed))] + [str(token) for token in tokens])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def parse_shape(text: str) -> tuple[int, int, int]:
    """Parse a patch or volume extent given as "32" or "32,32,16".

    Args:
        text: A single extent used for all three axes, or three comma separated extents.

    Returns:
        tuple: The (nx, ny, nz) extents.

    Raises:
        ValueError: If the text does not hold one or three positive integers.
    """
    parts = [part.strip() for part in str(text).split(",") if part.strip()]
    if len(parts) not in (1, 3):
        raise ValueError(f"Shape must have one or three extents, got {text!r}.")
    try:
        extents = [int(part) for part in parts]
    except ValueError as e:
        raise ValueError(f"Shape extents must be integers, got {text!r}.") from e
    if any(extent < 1 for extent in extents):
        raise ValueError(f"Shape extents must be positive, got {text!r}.")
    if len(extents) == 1:
        extents = extents * 3
    return tuple(extents)


def parse_float_list(text: str) -> list[float]:
    """Parse a comma separated list of positive floats, e.g. "0.001,0.01".

    Raises:
        ValueError: If the list is empty or holds a non-positive or non-numeric entry.
    """
    values = []
    for part in str(text).split(","):
        if not part.strip():
            continue
        try:
            value = float(part)
        except ValueError as e:
            raise ValueError(f"Not a number: {part!r}.") from e
        if not value > 0.0:
            raise ValueError(f"Values must be positive, got {value}.")
        values.append(value)
    if not values:
        raise ValueError("At least one value is required.")
    return values
