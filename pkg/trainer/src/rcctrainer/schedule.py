"""Exponential-decay learning-rate schedule."""

import math

from .errors import InvalidInput


def decayed_learning_rate(
    lr0: float,
    decay_rate: float,
    global_step: int,
    decay_steps: int,
    staircase: bool = False,
) -> float:
    """lr0 * decay_rate ** (global_step / decay_steps).

    Staircase mode floors the exponent, holding the rate constant within each
    decay interval.
    """
    if lr0 <= 0:
        raise InvalidInput("lr0 must be positive")
    if not (0 < decay_rate <= 1):
        raise InvalidInput("decay_rate must be in (0, 1]")
    if decay_steps < 1:
        raise InvalidInput("decay_steps must be >= 1")
    if global_step < 0:
        raise InvalidInput("global_step must be >= 0")
    exponent = global_step / decay_steps
    if staircase:
        exponent = math.floor(exponent)
    return lr0 * decay_rate ** exponent
