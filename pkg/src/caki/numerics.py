"""Dense float64 kernels: softmax, cosine similarity, cross-entropy, AdamW.

Everything here is a pure function on immutable inputs; training code builds
on these and nothing else. All arithmetic is 64-bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError

# -log of probabilities below this floor would overflow the useful range;
# cross_entropy clamps instead of erroring so optimization loops stay total.
CROSS_ENTROPY_FLOOR = 1e-300


def as_float_array(values, name: str = "array") -> np.ndarray:
    """Coerce to a float64 ndarray and reject non-finite entries."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise ValueError(f"{name} must be non-empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def softmax(scores, temperature: float = 1.0) -> np.ndarray:
    """Temperature-scaled softmax with max-subtraction for stability.

    Preserves the argmax of its input for every positive temperature
    (ties stay ties and resolve to the lowest index downstream).
    """
    s = as_float_array(scores, "scores")
    if s.ndim != 1:
        raise ValueError("scores must be one-dimensional")
    if not np.isfinite(temperature) or temperature <= 0:
        raise ValueError(f"temperature must be positive and finite, got {temperature}")
    shifted = (s - s.max()) / temperature
    exp = np.exp(shifted)
    return exp / exp.sum()


def cosine(a, b) -> float:
    """Cosine similarity of two equal-length vectors."""
    va = as_float_array(a, "a")
    vb = as_float_array(b, "b")
    if va.shape != vb.shape or va.ndim != 1:
        raise ValueError(f"vectors must share one length, got {va.shape} and {vb.shape}")
    na = float(np.linalg.norm(va))
    nb = float(np.linalg.norm(vb))
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine of a zero-norm vector is undefined")
    return float(np.dot(va, vb) / (na * nb))


def cross_entropy(probabilities, target_index: int) -> float:
    """-log of the target class probability.

    ``probabilities`` must already be a distribution; a zero target
    probability is clamped at CROSS_ENTROPY_FLOOR rather than erroring.
    """
    p = np.asarray(probabilities, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ValueError("probabilities must be a non-empty vector")
    if not np.all(np.isfinite(p)) or np.any(p < -1e-12):
        raise ValueError("probabilities must be finite and non-negative")
    if abs(float(p.sum()) - 1.0) > 1e-6:
        raise ValueError(f"probabilities must sum to 1, got {p.sum()!r}")
    if not 0 <= target_index < p.size:
        raise ValueError(f"target_index {target_index} out of range for {p.size} classes")
    return float(-np.log(max(float(p[target_index]), CROSS_ENTROPY_FLOOR)))


@dataclass(frozen=True)
class AdamWHyper:
    """AdamW hyperparameters with decoupled weight decay."""

    learning_rate: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.01

    def __post_init__(self):
        if not 0 < self.learning_rate or not np.isfinite(self.learning_rate):
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0 < self.beta1 < 1:
            raise ValueError(f"beta1 must be in (0, 1), got {self.beta1}")
        if not 0 < self.beta2 < 1:
            raise ValueError(f"beta2 must be in (0, 1), got {self.beta2}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be non-negative, got {self.weight_decay}")


@dataclass
class AdamWState:
    """Per-parameter optimizer state; shapes mirror the parameter."""

    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0

    @classmethod
    def zeros(cls, shape) -> "AdamWState":
        return cls(np.zeros(shape), np.zeros(shape), 0)


def adamw_step(
    params: np.ndarray,
    grads: np.ndarray,
    state: AdamWState,
    hyper: AdamWHyper,
) -> tuple[np.ndarray, AdamWState]:
    """One AdamW update; returns new parameters and new state.

    Weight decay is decoupled: it scales the parameters directly and never
    enters the moment estimates.
    """
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape:
        raise ValueError(f"params shape {params.shape} != grads shape {grads.shape}")
    if state.first_moment.shape != params.shape or state.second_moment.shape != params.shape:
        raise ValueError("optimizer state shape does not match parameters")

    t = state.step_count + 1
    m = hyper.beta1 * state.first_moment + (1.0 - hyper.beta1) * grads
    v = hyper.beta2 * state.second_moment + (1.0 - hyper.beta2) * grads * grads
    m_hat = m / (1.0 - hyper.beta1**t)
    v_hat = v / (1.0 - hyper.beta2**t)
    updated = params * (1.0 - hyper.learning_rate * hyper.weight_decay)
    updated = updated - hyper.learning_rate * m_hat / (np.sqrt(v_hat) + hyper.epsilon)
    return updated, AdamWState(m, v, t)
