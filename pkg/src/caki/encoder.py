"""Encoder backends: a deterministic synthetic two-tower world.

The synthetic world stands in for a frozen image/text encoder pair at desk
scale. It draws a frozen linear text head (A, B, bias), per-class tokens,
a global domain shift and per-class residual shifts from one seeded
generator. Image prototypes see the shifts; the text tower instead carries
its own frozen miscalibration inside the prompt-reachable subspace. A
learned shared prompt can close that gap and track the domain shift, and
class-specific prompts can additionally pick up per-class residuals; hand
templates can do neither.

All embeddings leave a backend unit-normalized. Text encoding is
differentiable through the prompt; ``encode_text_vjp`` is the hand-derived
backward used by training.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .errors import DegenerateInputError, NotFoundError

PROMPT_TEMPLATE = "a photo of a"
# CoOp-style context init scale for the template pseudo-embedding rows.
TEMPLATE_INIT_SCALE = 0.02
# Gain of the prompt-to-feature map relative to the class-token map. Few
# optimizer steps at a small learning rate move a prompt only a little, so
# the world gives prompts enough leverage for that movement to matter.
PROMPT_GAIN = 8.0
# Norm of the text tower's frozen miscalibration relative to sqrt(D), in
# units of domain_shift_scale. It lies in the prompt-reachable subspace, so
# trained prompts can close the gap that hand templates cannot.
TEXT_GAP_SCALE = 0.5
# Per-class residual draw scale (multiplied by class_shift_scale) and the
# scale of the bias shared by both towers. The residuals carry the class
# knowledge that only per-class prompts can learn; the shared bias pulls
# all features into one cone, like real joint embedding spaces.
CLASS_SHIFT_GAIN = 1.0
SHARED_BIAS_SCALE = 1.0

# Synthetic image samples are (class_index, noise_seed) pairs.
Sample = tuple[int, int]

_SEED_MASK = (1 << 64) - 1


def _entropy(*parts: int) -> list[int]:
    """Build a SeedSequence entropy list from possibly-negative ints."""
    return [p & _SEED_MASK for p in parts]


def normalize(vector: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(vector))
    if norm == 0.0:
        raise DegenerateInputError("cannot normalize a zero-norm vector")
    return vector / norm


@dataclass(frozen=True)
class EncoderFingerprint:
    """Identity of an encoder backend; equal fingerprints encode identically.

    ``prompt_rows`` is 0 for backends that accept prompts of any length.
    """

    kind: str
    feature_dim: int
    token_dim: int
    prompt_rows: int
    digest: bytes

    def hex(self) -> str:
        return f"{self.kind}/D{self.feature_dim}/Dt{self.token_dim}/L{self.prompt_rows}/{self.digest.hex()[:16]}"


def fingerprints_compatible(bank_fp: EncoderFingerprint, backend_fp: EncoderFingerprint) -> bool:
    """True when a bank built under ``bank_fp`` is valid for ``backend_fp``.

    A backend advertising prompt_rows == 0 accepts banks of any prompt length.
    """
    if (bank_fp.kind, bank_fp.feature_dim, bank_fp.token_dim, bank_fp.digest) != (
        backend_fp.kind,
        backend_fp.feature_dim,
        backend_fp.token_dim,
        backend_fp.digest,
    ):
        return False
    return backend_fp.prompt_rows in (0, bank_fp.prompt_rows)


@dataclass(frozen=True)
class ClassCatalog:
    """Ordered class names plus one token embedding per class name."""

    names: tuple[str, ...]
    class_tokens: np.ndarray  # (C, Dt)

    def __post_init__(self):
        if len(self.names) != len(set(self.names)):
            raise ValueError("class names must be unique")
        tokens = np.asarray(self.class_tokens, dtype=np.float64)
        if tokens.ndim != 2 or tokens.shape[0] != len(self.names):
            raise ValueError("class_tokens must be a (num_classes, token_dim) matrix")
        object.__setattr__(self, "class_tokens", tokens)

    def __len__(self) -> int:
        return len(self.names)

    def subset(self, indices) -> "ClassCatalog":
        idx = list(indices)
        return ClassCatalog(
            names=tuple(self.names[i] for i in idx),
            class_tokens=self.class_tokens[idx].copy(),
        )


@dataclass(frozen=True)
class SyntheticWorldSpec:
    """Dimensions, seed, and shift scales of a synthetic world.

    ``token_dim`` defaults to half the feature dimension.
    """

    seed: int = 7
    class_count: int = 16
    feature_dim: int = 32
    token_dim: int | None = None
    prompt_rows: int = 4
    noise_sigma: float = 0.05
    domain_shift_scale: float = 1.0
    class_shift_scale: float = 1.0

    def __post_init__(self):
        if self.token_dim is None:
            object.__setattr__(self, "token_dim", max(1, self.feature_dim // 2))
        for name in ("class_count", "feature_dim", "token_dim", "prompt_rows"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.domain_shift_scale < 0 or self.class_shift_scale < 0:
            raise ValueError("shift scales must be >= 0")

    def fingerprint(self) -> EncoderFingerprint:
        packed = struct.pack(
            "<qIIIIddd",
            self.seed,
            self.class_count,
            self.feature_dim,
            self.token_dim,
            self.prompt_rows,
            self.noise_sigma,
            self.domain_shift_scale,
            self.class_shift_scale,
        )
        return EncoderFingerprint(
            kind="synthetic",
            feature_dim=self.feature_dim,
            token_dim=self.token_dim,
            prompt_rows=self.prompt_rows,
            digest=hashlib.sha256(packed).digest(),
        )


class LinearTextHead:
    """Frozen linear map from (mean-pooled prompt, class token) to features.

    encode(P, e) = normalize(A @ mean(P, rows) + B @ e + bias)
    """

    def __init__(self, rng: np.random.Generator, feature_dim: int, token_dim: int):
        self.feature_dim = feature_dim
        self.token_dim = token_dim
        self.A = rng.normal(size=(feature_dim, token_dim)) * (PROMPT_GAIN / np.sqrt(token_dim))
        self.B = rng.normal(size=(feature_dim, token_dim)) / np.sqrt(token_dim)
        self.bias = SHARED_BIAS_SCALE * rng.normal(size=feature_dim)

    def raw(
        self, prompt: np.ndarray, class_token: np.ndarray, bias: np.ndarray | None = None
    ) -> np.ndarray:
        pooled = prompt.mean(axis=0)
        if bias is None:
            bias = self.bias
        return self.A @ pooled + self.B @ class_token + bias

    def encode(self, prompt: np.ndarray, class_token: np.ndarray) -> np.ndarray:
        return normalize(self.raw(prompt, class_token))

    def vjp(self, prompt: np.ndarray, class_token: np.ndarray, cotangent: np.ndarray) -> np.ndarray:
        """Gradient of <cotangent, encode(prompt, token)> w.r.t. the prompt.

        Pulls the cotangent back through the unit normalization
        ((I - t t^T) / |u|), the frozen map A, and the 1/L mean-pool.
        """
        u = self.raw(prompt, class_token)
        norm = float(np.linalg.norm(u))
        if norm == 0.0:
            raise DegenerateInputError("text embedding norm is zero; VJP undefined")
        t = u / norm
        g_u = (cotangent - t * float(np.dot(t, cotangent))) / norm
        g_pooled = self.A.T @ g_u
        rows = prompt.shape[0]
        return np.tile(g_pooled / rows, (rows, 1))


class SyntheticBackend:
    """Deterministic encoder pair over a seeded synthetic world."""

    supports_vjp = True

    def __init__(self, spec: SyntheticWorldSpec):
        self.spec = spec
        self.fingerprint = spec.fingerprint()
        rng = np.random.default_rng(_entropy(spec.seed))
        self._head = LinearTextHead(rng, spec.feature_dim, spec.token_dim)
        self._class_tokens = rng.normal(size=(spec.class_count, spec.token_dim))
        self._domain_shift = spec.domain_shift_scale * rng.normal(size=spec.feature_dim)
        self._class_shifts = (spec.class_shift_scale * CLASS_SHIFT_GAIN) * rng.normal(
            size=(spec.class_count, spec.feature_dim)
        )
        # The text tower carries a frozen miscalibration on top of the shared
        # bias. It sits inside the prompt-reachable subspace (range of A), so
        # learned prompts can remove it while hand templates cannot; images
        # never see it. Zero shift scales zero it out.
        gap_direction = self._head.A @ rng.normal(size=spec.token_dim)
        image_bias = self._head.bias
        self._head.bias = image_bias + (
            spec.domain_shift_scale
            * TEXT_GAP_SCALE
            * np.sqrt(spec.feature_dim)
            * gap_direction
            / np.linalg.norm(gap_direction)
        )
        # Prototypes go through the same expression as the text path so that
        # the shift-free world satisfies text == prototype bit-exactly.
        zero_prompt = np.zeros((spec.prompt_rows, spec.token_dim))
        self._prototypes = np.stack(
            [
                normalize(
                    self._head.raw(zero_prompt, self._class_tokens[c], image_bias)
                    + self._domain_shift
                    + self._class_shifts[c]
                )
                for c in range(spec.class_count)
            ]
        )

    @property
    def feature_dim(self) -> int:
        return self.spec.feature_dim

    @property
    def token_dim(self) -> int:
        return self.spec.token_dim

    @property
    def prompt_rows(self) -> int:
        return self.spec.prompt_rows

    @property
    def class_tokens(self) -> np.ndarray:
        return self._class_tokens

    def prototype(self, class_index: int) -> np.ndarray:
        self._check_class(class_index)
        return self._prototypes[class_index].copy()

    def encode_image(self, sample: Sample) -> np.ndarray:
        class_index, noise_seed = self._check_sample(sample)
        prototype = self._prototypes[class_index]
        if self.spec.noise_sigma == 0.0:
            # sigma=0 must reproduce the stored prototype bit-exactly.
            return prototype.copy()
        rng = np.random.default_rng(_entropy(self.spec.seed, 1, class_index, noise_seed))
        noisy = prototype + self.spec.noise_sigma * rng.normal(size=self.spec.feature_dim)
        return normalize(noisy)

    def encode_text(self, prompt: np.ndarray, class_token: np.ndarray) -> np.ndarray:
        self._check_prompt(prompt)
        return self._head.encode(np.asarray(prompt, dtype=np.float64), class_token)

    def encode_text_vjp(
        self, prompt: np.ndarray, class_token: np.ndarray, cotangent: np.ndarray
    ) -> np.ndarray:
        self._check_prompt(prompt)
        cot = np.asarray(cotangent, dtype=np.float64)
        if cot.shape != (self.spec.feature_dim,):
            raise ValueError(
                f"cotangent must have length {self.spec.feature_dim}, got shape {cot.shape}"
            )
        return self._head.vjp(np.asarray(prompt, dtype=np.float64), class_token, cot)

    def _check_prompt(self, prompt: np.ndarray) -> None:
        shape = np.shape(prompt)
        expected = (self.spec.prompt_rows, self.spec.token_dim)
        if shape != expected:
            raise ValueError(f"prompt shape {shape} does not match backend {expected}")

    def _check_class(self, class_index: int) -> None:
        if not 0 <= class_index < self.spec.class_count:
            raise NotFoundError(f"class index {class_index} out of range")

    def _check_sample(self, sample: Sample) -> Sample:
        try:
            class_index, noise_seed = sample
        except (TypeError, ValueError):
            raise NotFoundError(f"not a synthetic sample: {sample!r}") from None
        self._check_class(int(class_index))
        return int(class_index), int(noise_seed)


class SyntheticWorld(NamedTuple):
    backend: SyntheticBackend
    catalog: ClassCatalog
    make_sample: Callable[[int, int], Sample]


def make_synthetic_world(spec: SyntheticWorldSpec) -> SyntheticWorld:
    """Build the backend, its class catalog, and a sample factory."""
    backend = SyntheticBackend(spec)
    catalog = ClassCatalog(
        names=tuple(f"class_{i:03d}" for i in range(spec.class_count)),
        class_tokens=backend.class_tokens.copy(),
    )

    def make_sample(class_index: int, noise_seed: int) -> Sample:
        backend._check_class(class_index)
        return (int(class_index), int(noise_seed))

    return SyntheticWorld(backend, catalog, make_sample)


def template_prompt(
    prompt_rows: int, token_dim: int, template: str = PROMPT_TEMPLATE
) -> np.ndarray:
    """Deterministic pseudo-embedding of a hand-written prompt template.

    No tokenizer exists at this scale; rows come from a generator seeded by
    a stable hash of the template string so every run starts identically.
    """
    digest = hashlib.sha256(template.encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    return TEMPLATE_INIT_SCALE * rng.normal(size=(prompt_rows, token_dim))
