# pylint: disable=no-member,too-few-public-methods, no-self-argument
"""
Configure variables to be used.
"""

import logging
import os
from pathlib import Path

import ska_ser_logging
from starlette.config import Config

ENV_FILE = Path(".env")
if not ENV_FILE.exists():
    ENV_FILE = None

config = Config(ENV_FILE)

ska_ser_logging.configure_logging(
    logging.DEBUG
    if os.environ.get("SEGMENTATION_VERBOSE", "false") == "true"
    else logging.WARNING
)
logger = logging.getLogger(__name__)
logger.info("Logging started for weighted-dice-seg")


DATASET_ROOT: str = config("DATASET_ROOT", default="datasets/")

# Assert every Tensor5 produced by an op is finite (slow, meant for tests and debugging)
CHECK_FINITE: bool = config("CHECK_FINITE", cast=bool, default=False)

DEFAULT_SEED: int = config("DEFAULT_SEED", cast=int, default=0)
DEFAULT_PATCH: int = config("DEFAULT_PATCH", cast=int, default=32)
DEFAULT_LEVELS: int = config("DEFAULT_LEVELS", cast=int, default=2)
DEFAULT_BASE_CHANNELS: int = config("DEFAULT_BASE_CHANNELS", cast=int, default=8)
DEFAULT_ITERATIONS: int = config("DEFAULT_ITERATIONS", cast=int, default=500)
DEFAULT_BATCH_SIZE: int = config("DEFAULT_BATCH_SIZE", cast=int, default=3)
DEFAULT_VALIDATION_INTERVAL: int = config("DEFAULT_VALIDATION_INTERVAL", cast=int, default=50)
DEFAULT_LEARNING_RATES: tuple[float, ...] = (0.001, 0.01)

# Adam moments, as published with the method
ADAM_BETA1: float = 0.9
ADAM_BETA2: float = 0.999
ADAM_EPSILON: float = 1e-8

# Class weights use epsilon=1; the soft Dice denominator uses its own floor
WEIGHT_EPSILON: float = 1.0
DICE_DENOMINATOR_EPSILON: float = 1e-7


def set_verbosity(verbose: int):
    """Reconfigure logging for command-line use.

    Args:
        verbose: 0 keeps warnings only, 1 enables INFO, 2 or more enables DEBUG.
    """
    level = logging.WARNING
    if verbose == 1:
        level = logging.INFO
    elif verbose >= 2:
        level = logging.DEBUG
    ska_ser_logging.configure_logging(level)


# Abdominal phantom: background plus seven structures. Centre and semi-axis entries are
# [low, high] voxel ranges at the 48^3 reference grid; each patient draws inside them.
ABDOMEN = {
    "name": "Synthetic abdomen",
    "shape": [48, 48, 48],
    "noise_sigma": 0.1,
    "background": {"name": "background", "intensity": 0.0},
    "organs": [
        {
            "name": "artery",
            "intensity": 2.4,
            "center": [[23, 25], [32, 34], [22, 26]],
            "semi_axes": [[1.5, 2.0], [1.5, 2.0], [12, 14]],
        },
        {
            "name": "portal vein",
            "intensity": 2.0,
            "center": [[20, 22], [26, 28], [18, 22]],
            "semi_axes": [[1.5, 2.0], [1.5, 2.0], [8, 10]],
        },
        {
            "name": "liver",
            "intensity": 1.0,
            "center": [[14, 16], [18, 20], [22, 26]],
            "semi_axes": [[10, 12], [8, 10], [8, 10]],
        },
        {
            "name": "spleen",
            "intensity": 1.4,
            "center": [[36, 38], [30, 32], [20, 24]],
            "semi_axes": [[4, 5], [4, 5], [5, 6]],
        },
        {
            "name": "stomach",
            "intensity": 0.5,
            "center": [[32, 34], [16, 18], [24, 28]],
            "semi_axes": [[6, 8], [5, 7], [6, 8]],
        },
        {
            "name": "gallbladder",
            "intensity": -0.6,
            "center": [[22, 24], [12, 14], [30, 32]],
            "semi_axes": [[2.5, 3.0], [2.5, 3.0], [2.5, 3.0]],
        },
        {
            "name": "pancreas",
            "intensity": 1.7,
            "center": [[28, 30], [26, 28], [16, 18]],
            "semi_axes": [[7, 8], [2.0, 3.0], [2.5, 3.0]],
        },
    ],
}
