"""Central finite-difference verification of analytic gradients.

Relative error uses a small denominator floor so checks stay meaningful for
near-zero gradients without turning into loose absolute comparisons.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from guidematch.numerics.tensor import Tensor, margin_trace

DEFAULT_STEP = 1e-5
ERROR_FLOOR = 1e-6

# A check point is usable when every kink (rectifier zero crossing, argmax
# switch) is at least this many steps away and every normalized vector has
# at least this norm; otherwise central differences measure the kink or the
# 1/norm^3 curvature instead of the gradient. A probe crosses a kink only
# when its sensitivity to that unit exceeds margin/step, so 30 steps leaves
# a wide safety factor for unit sensitivities of a few.
KINK_MARGIN_STEPS = 30.0
MIN_NORM = 0.05


def well_conditioned(build_scalar: Callable[[], Tensor], step: float = DEFAULT_STEP) -> bool:
    """True when the forward pass stays clear of kinks and tiny norms."""
    with margin_trace() as margins:
        build_scalar()
    for kind, value in margins:
        if kind == "kink" and value < KINK_MARGIN_STEPS * step:
            return False
        if kind == "norm" and value < MIN_NORM:
            return False
    return True


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = ERROR_FLOOR) -> np.ndarray:
    denom = np.maximum(floor, np.maximum(np.abs(analytic), np.abs(numeric)))
    return np.abs(analytic - numeric) / denom


def max_gradient_error(
    build_scalar: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = DEFAULT_STEP,
    coords: dict[int, np.ndarray] | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``build_scalar`` must rebuild the forward graph from the current parameter
    values. When ``coords`` maps a parameter's position in ``params`` to flat
    indices, only those coordinates are probed; otherwise every element is.
    """
    out = build_scalar()
    out.backward()
    analytic = []
    for p in params:
        if p.grad is None:
            analytic.append(np.zeros_like(p.data))
        else:
            analytic.append(np.array(p.grad, dtype=np.float64))

    worst = 0.0
    for i, p in enumerate(params):
        flat = p.data.reshape(-1)
        idxs = coords.get(i, np.arange(flat.size)) if coords is not None else np.arange(flat.size)
        a_flat = analytic[i].reshape(-1)
        for j in idxs:
            orig = flat[j]
            flat[j] = orig + step
            f_plus = float(build_scalar().data)
            flat[j] = orig - step
            f_minus = float(build_scalar().data)
            flat[j] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            worst = max(worst, float(relative_error(a_flat[j], np.float64(numeric))))
    return worst


def sample_coords(params: Sequence[Tensor], per_param: int, rng: np.random.Generator) -> dict[int, np.ndarray]:
    """Pick up to ``per_param`` random flat coordinates for each parameter."""
    out = {}
    for i, p in enumerate(params):
        n = p.data.size
        k = min(per_param, n)
        out[i] = rng.choice(n, size=k, replace=False)
    return out
