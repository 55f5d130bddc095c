"""Prompt training: shared prompts over a task and per-class prompts.

Both trainers minimize the cross-entropy of prompt-conditioned class
probabilities (cosine scores over the catalog, softmax at temperature tau).
The gradient w.r.t. the prompt is hand-derived: softmax/cross-entropy
backward, then the image feature as cotangent into the encoder's
text-path VJP. Batches larger than one average per-sample gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .encoder import ClassCatalog, template_prompt
from .errors import UnsupportedOperationError
from .numerics import AdamWHyper, AdamWState, adamw_step, cross_entropy, softmax

_SEED_MASK = (1 << 64) - 1


@dataclass(frozen=True)
class FewShotDataset:
    """Labeled samples plus the size of the class space they live in."""

    samples: tuple  # ((sample, class_index), ...)
    class_count: int

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        for _, label in self.samples:
            if not 0 <= label < self.class_count:
                raise ValueError(f"class index {label} out of range (C={self.class_count})")

    def __len__(self) -> int:
        return len(self.samples)

    def shots_per_class(self) -> dict[int, int]:
        counts: dict[int, int] = {}
        for _, label in self.samples:
            counts[label] = counts.get(label, 0) + 1
        return counts

    def restricted_to(self, class_index: int) -> "FewShotDataset":
        kept = tuple(s for s in self.samples if s[1] == class_index)
        return FewShotDataset(samples=kept, class_count=self.class_count)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.005
    epochs: int = 5
    batch_size: int = 1
    temperature: float = 1.0
    seed: int = 0
    adamw: AdamWHyper = field(default_factory=AdamWHyper)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")

    def optimizer_hyper(self) -> AdamWHyper:
        return replace(self.adamw, learning_rate=self.learning_rate)


@dataclass(frozen=True)
class TrainReport:
    """Mean loss per epoch plus the trained prompt."""

    epoch_losses: tuple[float, ...]
    final_prompt: np.ndarray


def text_features(backend, prompt: np.ndarray, catalog: ClassCatalog) -> np.ndarray:
    """Stack prompt-conditioned text features for every catalog class."""
    return np.stack(
        [backend.encode_text(prompt, catalog.class_tokens[c]) for c in range(len(catalog))]
    )


def class_probabilities(
    backend,
    prompt: np.ndarray,
    catalog: ClassCatalog,
    image_feature: np.ndarray,
    temperature: float = 1.0,
) -> np.ndarray:
    """Distribution over catalog classes for one image feature.

    Cosine similarity between the image feature and each class's
    prompt-conditioned text feature, softmaxed at ``temperature``.
    """
    feats = text_features(backend, prompt, catalog)
    image = np.asarray(image_feature, dtype=np.float64)
    sims = feats @ image / (np.linalg.norm(feats, axis=1) * np.linalg.norm(image))
    return softmax(sims, temperature)


def prompt_loss_and_grad(
    backend,
    prompt: np.ndarray,
    catalog: ClassCatalog,
    image_feature: np.ndarray,
    target_index: int,
    temperature: float,
) -> tuple[float, np.ndarray]:
    """Cross-entropy loss at ``target_index`` and its prompt gradient.

    The cosine layer's backward w.r.t. the text embedding reduces to the
    (unit-norm) image feature; the text-side normalization backward lives
    inside the backend VJP.
    """
    probs = class_probabilities(backend, prompt, catalog, image_feature, temperature)
    loss = cross_entropy(probs, target_index)
    dscore = probs.copy()
    dscore[target_index] -= 1.0
    dscore /= temperature
    image = np.asarray(image_feature, dtype=np.float64)
    grad = np.zeros_like(np.asarray(prompt, dtype=np.float64))
    for c in range(len(catalog)):
        if dscore[c] == 0.0:
            continue
        grad += dscore[c] * backend.encode_text_vjp(prompt, catalog.class_tokens[c], image)
    return loss, grad


def _run_training(backend, dataset: FewShotDataset, catalog: ClassCatalog, config: TrainConfig) -> TrainReport:
    if not getattr(backend, "supports_vjp", False):
        raise UnsupportedOperationError("backend does not support prompt gradients")
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    if dataset.class_count != len(catalog):
        raise ValueError(
            f"dataset class space {dataset.class_count} != catalog size {len(catalog)}"
        )

    features = [backend.encode_image(sample) for sample, _ in dataset.samples]
    labels = [label for _, label in dataset.samples]
    prompt = template_prompt(backend.prompt_rows, backend.token_dim)
    state = AdamWState.zeros(prompt.shape)
    hyper = config.optimizer_hyper()
    rng = np.random.default_rng(config.seed & _SEED_MASK)

    epoch_losses = []
    for _ in range(config.epochs):
        order = rng.permutation(len(dataset))
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            grad = np.zeros_like(prompt)
            for i in batch:
                loss, g = prompt_loss_and_grad(
                    backend, prompt, catalog, features[i], labels[i], config.temperature
                )
                losses.append(loss)
                grad += g
            grad /= len(batch)
            prompt, state = adamw_step(prompt, grad, state, hyper)
        epoch_losses.append(float(np.mean(losses)))
    return TrainReport(epoch_losses=tuple(epoch_losses), final_prompt=prompt)


def train_shared_prompt(
    backend, dataset: FewShotDataset, catalog: ClassCatalog, config: TrainConfig
) -> TrainReport:
    """Train one prompt on samples from every class of the task."""
    return _run_training(backend, dataset, catalog, config)


def train_class_prompt(
    backend,
    class_index: int,
    dataset: FewShotDataset,
    catalog: ClassCatalog,
    config: TrainConfig,
) -> TrainReport:
    """Train a prompt on samples of a single class.

    The loss is the log-probability of that class under the full-catalog
    denominator, so the prompt learns to pull its class away from the rest.
    """
    if not 0 <= class_index < len(catalog):
        raise ValueError(f"class index {class_index} out of range")
    foreign = [label for _, label in dataset.samples if label != class_index]
    if foreign:
        raise ValueError(
            f"dataset for class {class_index} contains foreign class indices {sorted(set(foreign))}"
        )
    return _run_training(backend, dataset, catalog, config)
