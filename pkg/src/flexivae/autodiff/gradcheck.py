"""Central-difference verification of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from ..errors import ConfigurationError
from .params import ParameterStore
from .tensor import Tape, Tensor, backward, no_grad

MAX_FULL_COORDS = 10_000


def grad_check(
    f: Callable[[ParameterStore], Tensor],
    point: ParameterStore,
    step: float = 1e-5,
    *,
    max_coords: int = MAX_FULL_COORDS,
    seed: int = 0,
    atol: float = 1e-6,
) -> float:
    """Largest relative error between ``backward`` and central differences.

    ``f`` maps the parameter store to a scalar tensor. Every coordinate is
    probed unless the store holds more than ``max_coords`` values, in which
    case a seeded random subset of that size is used. The relative error of a
    coordinate is ``|a - n| / max(|a|, |n|, atol)``.
    """
    if not 0.0 < step <= 1e-2:
        raise ConfigurationError(f"grad_check step must lie in (0, 1e-2], got {step}")
    point.zero_grad()
    with Tape() as tape:
        out = f(point)
    backward(tape, out)
    analytic = point.grads()

    coords = [(key, idx) for key, t in point.items() for idx in range(t.size)]
    if len(coords) > max_coords:
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in np.sort(pick)]

    worst = 0.0
    with no_grad():
        for key, idx in coords:
            flat = point[key].data.reshape(-1)
            orig = flat[idx]
            flat[idx] = orig + step
            fp = f(point).item()
            flat[idx] = orig - step
            fm = f(point).item()
            flat[idx] = orig
            numeric = (fp - fm) / (2.0 * step)
            a = analytic[key].reshape(-1)[idx]
            err = abs(a - numeric) / max(abs(a), abs(numeric), atol)
            worst = max(worst, err)
    return worst
