"""Training-free query-key prompt matching inference.

A test image's feature acts as the query against the bank keys. The
softmax of query-key cosine scores over the whole bank gives matching
weights; the top-K entries' prompts each produce a class distribution
over the test catalog, their weighted sum is the fine prediction, and
``coarse + beta * fine`` is the refined score vector whose argmax is the
label. Everything here is pure over an immutable bank and backend.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .bank import PromptBank, bank_lookup
from .encoder import ClassCatalog
from .errors import DegenerateInputError, EmptyBankError
from .numerics import softmax
from .prompt_learning import class_probabilities

log = logging.getLogger(__name__)

STRATEGIES = ("M", "R", "A")

_SEED_MASK = (1 << 64) - 1


@dataclass(frozen=True)
class Prediction:
    """Score vector over the active test catalog."""

    scores: np.ndarray
    normalized: bool

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        object.__setattr__(self, "scores", scores)
        if self.normalized and abs(float(scores.sum()) - 1.0) > 1e-9:
            raise ValueError("normalized prediction must sum to 1")

    @property
    def label(self) -> int:
        return int(np.argmax(self.scores))


@dataclass(frozen=True)
class MatchResult:
    cache_index: int
    gamma: float

    def __post_init__(self):
        if not np.isfinite(self.gamma) or not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")


@dataclass(frozen=True)
class QkpmConfig:
    top_k: int = 3
    beta: float = 0.3
    temperature: float = 1.0
    tie_break: str = "lowest-index"
    gamma_renorm: str = "raw"
    strategy_seed: int = 0

    def __post_init__(self):
        if self.top_k < 1:
            raise ValueError(f"top_k must be >= 1, got {self.top_k}")
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.tie_break != "lowest-index":
            raise ValueError("the only supported tie_break policy is 'lowest-index'")
        if self.gamma_renorm not in ("raw", "topk"):
            raise ValueError(f"gamma_renorm must be 'raw' or 'topk', got {self.gamma_renorm}")


def _as_image_feature(backend, image) -> np.ndarray:
    """Accept either an embedding or a backend sample."""
    if isinstance(image, np.ndarray) and image.ndim == 1 and image.shape[0] == backend.feature_dim:
        return np.asarray(image, dtype=np.float64)
    return backend.encode_image(image)


def _sample_entropy(image, match_seed) -> list[int]:
    if match_seed is not None:
        return [int(match_seed) & _SEED_MASK]
    if isinstance(image, tuple) and len(image) == 2:
        return [int(image[0]) & _SEED_MASK, int(image[1]) & _SEED_MASK]
    if isinstance(image, (int, np.integer)):
        return [int(image) & _SEED_MASK]
    return [0]


def coarse_predict(
    backend,
    shared_prompt: np.ndarray,
    test_catalog: ClassCatalog,
    image,
    temperature: float = 1.0,
) -> Prediction:
    """Distribution over the test catalog under the shared prompt."""
    feature = _as_image_feature(backend, image)
    probs = class_probabilities(backend, shared_prompt, test_catalog, feature, temperature)
    return Prediction(scores=probs, normalized=True)


def match_topk(query: np.ndarray, bank: PromptBank, k: int, temperature: float = 1.0) -> list[MatchResult]:
    """Top-K bank entries by softmaxed query-key cosine score.

    Weights come from the softmax over *all* bank keys; ordering is by
    descending weight with ties broken by ascending cache index. K larger
    than the bank clamps.
    """
    if len(bank) == 0:
        raise EmptyBankError("cannot match against an empty bank")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    query = np.asarray(query, dtype=np.float64)
    query_norm = float(np.linalg.norm(query))
    if query_norm == 0.0:
        raise DegenerateInputError("query has zero norm")
    keys = bank.key_matrix
    sims = keys @ query / (np.linalg.norm(keys, axis=1) * query_norm)
    gammas = softmax(sims, temperature)
    if k > len(bank):
        log.debug("top-K %d clamped to bank size %d", k, len(bank))
        k = len(bank)
    order = np.argsort(-gammas, kind="stable")[:k]
    return [MatchResult(cache_index=int(i), gamma=float(gammas[i])) for i in order]


def fine_ensemble(
    backend,
    bank: PromptBank,
    matches: list[MatchResult],
    test_catalog: ClassCatalog,
    image,
    temperature: float = 1.0,
) -> np.ndarray:
    """Match-weighted sum of per-prompt class distributions (unnormalized).

    Each matched prompt is applied to every test class name; weights are
    used exactly as given.
    """
    if not matches:
        raise ValueError("fine_ensemble needs at least one match")
    feature = _as_image_feature(backend, image)
    entries = bank_lookup(bank, [m.cache_index for m in matches])
    out = np.zeros(len(test_catalog))
    for match, entry in zip(matches, entries):
        probs = class_probabilities(backend, entry.value, test_catalog, feature, temperature)
        out += match.gamma * probs
    return out


def refine(coarse: Prediction, fine: np.ndarray, beta: float) -> Prediction:
    """Combine coarse and fine scores: coarse + beta * fine."""
    fine = np.asarray(fine, dtype=np.float64)
    if fine.shape != coarse.scores.shape:
        raise ValueError(
            f"fine scores shape {fine.shape} != coarse shape {coarse.scores.shape}"
        )
    return Prediction(scores=coarse.scores + beta * fine, normalized=False)


def _renormalized_matches(matches: list[MatchResult]) -> list[MatchResult]:
    total = sum(m.gamma for m in matches)
    return [MatchResult(m.cache_index, m.gamma / total) for m in matches]


class PipelineClassifier:
    """Caches per-prompt text features for one (bank, test catalog) pair.

    classify() on this object and the module-level :func:`classify` are
    numerically identical; this form amortizes text encoding across many
    test samples.
    """

    def __init__(self, backend, bank: PromptBank, test_catalog: ClassCatalog, config: QkpmConfig):
        if len(bank) == 0:
            raise EmptyBankError("cannot classify against an empty bank")
        self.backend = backend
        self.bank = bank
        self.catalog = test_catalog
        self.config = config
        self._coarse_features = self._features(bank.shared_prompt)
        self._value_features = [self._features(entry.value) for entry in bank.entries]

    def _features(self, prompt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        feats = np.stack(
            [
                self.backend.encode_text(prompt, self.catalog.class_tokens[c])
                for c in range(len(self.catalog))
            ]
        )
        return feats, np.linalg.norm(feats, axis=1)

    def _distribution(self, cached, feature: np.ndarray) -> np.ndarray:
        feats, norms = cached
        sims = feats @ feature / (norms * np.linalg.norm(feature))
        return softmax(sims, self.config.temperature)

    def coarse(self, image) -> Prediction:
        feature = _as_image_feature(self.backend, image)
        return Prediction(self._distribution(self._coarse_features, feature), normalized=True)

    def matches_for(self, image, strategy: str, match_seed=None) -> list[MatchResult]:
        strategy = strategy.upper()
        if strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {strategy!r}")
        feature = _as_image_feature(self.backend, image)
        if strategy == "M":
            return match_topk(feature, self.bank, self.config.top_k, self.config.temperature)
        if strategy == "A":
            return match_topk(feature, self.bank, len(self.bank), self.config.temperature)
        k = min(self.config.top_k, len(self.bank))
        rng = np.random.default_rng(
            [self.config.strategy_seed & _SEED_MASK, *_sample_entropy(image, match_seed)]
        )
        indices = sorted(rng.choice(len(self.bank), size=k, replace=False).tolist())
        return [MatchResult(cache_index=int(i), gamma=1.0 / k) for i in indices]

    def classify(
        self, image, strategy: str = "M", match_seed=None
    ) -> tuple[int, Prediction, list[MatchResult]]:
        feature = _as_image_feature(self.backend, image)
        coarse = Prediction(self._distribution(self._coarse_features, feature), normalized=True)
        matches = self.matches_for(image, strategy, match_seed)
        weighted = (
            _renormalized_matches(matches) if self.config.gamma_renorm == "topk" else matches
        )
        fine = np.zeros(len(self.catalog))
        for match in weighted:
            fine += match.gamma * self._distribution(
                self._value_features[match.cache_index], feature
            )
        refined = refine(coarse, fine, self.config.beta)
        return refined.label, refined, matches


def classify(
    backend,
    bank: PromptBank,
    test_catalog: ClassCatalog,
    image,
    config: QkpmConfig,
    strategy: str = "M",
    match_seed=None,
) -> tuple[int, Prediction, list[MatchResult]]:
    """One-shot classification; see :class:`PipelineClassifier`."""
    clf = PipelineClassifier(backend, bank, test_catalog, config)
    return clf.classify(image, strategy, match_seed)
