"""Independent brute-force references for the test suite.

Nothing here shares code with the production paths it validates: plain
loops, plain Python floats, central finite differences. Clarity over speed.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

# Relative-error denominators are floored here so near-zero gradients do not
# blow up the comparison.
RELATIVE_ERROR_FLOOR = 1e-8


def fd_gradient(
    loss: Callable[[np.ndarray], float], point: np.ndarray, step: float = 1e-6
) -> np.ndarray:
    """Central-difference gradient of a scalar loss over a matrix."""
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    point = np.asarray(point, dtype=np.float64)
    grad = np.zeros_like(point)
    it = np.nditer(point, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        bumped = point.copy()
        bumped[idx] = point[idx] + step
        up = float(loss(bumped))
        bumped[idx] = point[idx] - step
        down = float(loss(bumped))
        if not (math.isfinite(up) and math.isfinite(down)):
            raise ArithmeticError(f"non-finite loss at perturbed entry {idx}")
        grad[idx] = (up - down) / (2.0 * step)
        it.iternext()
    return grad


def max_relative_error(analytic: np.ndarray, reference: np.ndarray) -> float:
    """Worst entrywise relative error with a floored denominator."""
    analytic = np.asarray(analytic, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    denom = np.maximum(np.abs(reference), RELATIVE_ERROR_FLOOR)
    return float(np.max(np.abs(analytic - reference) / denom))


def brute_topk(scores, k: int) -> list[int]:
    """Indices of the K largest scores via a full stable sort.

    Descending by score, ties by ascending index, truncated to min(K, len).
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    values = [float(s) for s in scores]
    order = sorted(range(len(values)), key=lambda i: (-values[i], i))
    return order[: min(k, len(values))]


def explicit_refine(fine_predictions, gammas, coarse, beta: float) -> np.ndarray:
    """Naive coarse + beta * sum(gamma_i * p_i), accumulated per component.

    Loops over components in the outer loop, predictions in the inner one,
    deliberately a different accumulation order than the pipeline.
    """
    coarse = [float(x) for x in coarse]
    gammas = [float(g) for g in gammas]
    preds = [[float(x) for x in p] for p in fine_predictions]
    if len(preds) != len(gammas):
        raise ValueError(f"{len(preds)} predictions but {len(gammas)} weights")
    for p in preds:
        if len(p) != len(coarse):
            raise ValueError("prediction length does not match coarse scores")
    out = []
    for j in range(len(coarse)):
        acc = 0.0
        for i in range(len(preds)):
            acc += gammas[i] * preds[i][j]
        out.append(coarse[j] + beta * acc)
    return np.asarray(out, dtype=np.float64)
