"""Offline feature files: ingest precomputed image/text features.

Binary layout (little-endian), version 1:

    magic   8 bytes  b"CAKIFEAT"
    version u32
    D       u32      image/text feature width
    Dt      u32      class-token width
    C       u32      class count
    N       u64      record count
    C class entries:
        name_len u16, name bytes (UTF-8),
        class token   Dt x f32,
        template text feature D x f32
    N records:
        class id u32, image feature D x f32

The loader renormalizes every stored vector and reports how many changed
norm by more than 1e-3 (``renorm_warnings``). Image features are served by
record id. Text encoding uses a linear head of the same construction as
the synthetic backend, seeded from the file digest — a stand-in, since the
original encoder that produced the file is not available; prompt training
through this backend is unsupported.
"""

from __future__ import annotations

import hashlib
import logging
import struct
from typing import NamedTuple

import numpy as np

from .encoder import ClassCatalog, EncoderFingerprint, LinearTextHead
from .errors import FormatError, NotFoundError, UnsupportedOperationError

log = logging.getLogger(__name__)

FEATURE_MAGIC = b"CAKIFEAT"
FEATURE_FORMAT_VERSION = 1
RENORM_WARN_TOLERANCE = 1e-3


class _Cursor:
    """Sequential reader over bytes that reports offsets on failure."""

    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, count: int, what: str) -> bytes:
        if self.offset + count > len(self.data):
            raise FormatError(f"truncated file: missing {what}", offset=self.offset)
        chunk = self.data[self.offset : self.offset + count]
        self.offset += count
        return chunk

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]

    def f32_vector(self, count: int, what: str) -> np.ndarray:
        raw = self.take(4 * count, what)
        vec = np.frombuffer(raw, dtype="<f4").astype(np.float64)
        if not np.all(np.isfinite(vec)):
            raise FormatError(f"non-finite values in {what}", offset=self.offset - 4 * count)
        return vec


def write_feature_file(
    path,
    catalog: ClassCatalog,
    template_text_features: np.ndarray,
    record_labels,
    record_features: np.ndarray,
) -> None:
    """Serialize a feature set; inverse of :func:`load_offline_features`."""
    feature_dim = int(np.asarray(template_text_features).shape[1])
    token_dim = int(catalog.class_tokens.shape[1])
    labels = [int(c) for c in record_labels]
    features = np.asarray(record_features, dtype=np.float64)
    if features.shape != (len(labels), feature_dim):
        raise ValueError(
            f"record features shape {features.shape} != ({len(labels)}, {feature_dim})"
        )
    out = bytearray()
    out += FEATURE_MAGIC
    out += struct.pack(
        "<IIIIQ", FEATURE_FORMAT_VERSION, feature_dim, token_dim, len(catalog), len(labels)
    )
    for c, name in enumerate(catalog.names):
        encoded = name.encode("utf-8")
        out += struct.pack("<H", len(encoded))
        out += encoded
        out += catalog.class_tokens[c].astype("<f4").tobytes()
        out += np.asarray(template_text_features[c]).astype("<f4").tobytes()
    for label, feature in zip(labels, features):
        if not 0 <= label < len(catalog):
            raise ValueError(f"record class id {label} out of range")
        out += struct.pack("<I", label)
        out += feature.astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(out))


class OfflineBackend:
    """Serves stored image features; text head is a documented stand-in."""

    supports_vjp = False
    prompt_rows = 0  # accepts prompts of any row count

    def __init__(
        self,
        catalog: ClassCatalog,
        template_text_features: np.ndarray,
        record_labels: list[int],
        record_features: np.ndarray,
        digest: bytes,
    ):
        self.feature_dim = int(template_text_features.shape[1])
        self.token_dim = int(catalog.class_tokens.shape[1])
        self.catalog = catalog
        self.record_labels = record_labels
        self.renorm_warnings = 0
        self.fingerprint = EncoderFingerprint(
            kind="offline",
            feature_dim=self.feature_dim,
            token_dim=self.token_dim,
            prompt_rows=0,
            digest=digest,
        )
        self.template_text_features = self._renormalized(template_text_features)
        self._features = self._renormalized(record_features)
        head_rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        self._head = LinearTextHead(head_rng, self.feature_dim, self.token_dim)

    def _renormalized(self, rows: np.ndarray) -> np.ndarray:
        rows = np.asarray(rows, dtype=np.float64)
        if rows.size == 0:
            return rows.reshape(0, self.feature_dim)
        norms = np.linalg.norm(rows, axis=1)
        if np.any(norms == 0.0):
            raise FormatError("zero-norm feature vector in file")
        self.renorm_warnings += int(np.sum(np.abs(norms - 1.0) > RENORM_WARN_TOLERANCE))
        return rows / norms[:, None]

    def __len__(self) -> int:
        return len(self.record_labels)

    def encode_image(self, sample) -> np.ndarray:
        if not isinstance(sample, (int, np.integer)):
            raise NotFoundError(f"offline samples are record ids, got {sample!r}")
        if not 0 <= sample < len(self.record_labels):
            raise NotFoundError(f"record id {int(sample)} out of range (N={len(self)})")
        return self._features[int(sample)].copy()

    def encode_text(self, prompt: np.ndarray, class_token: np.ndarray) -> np.ndarray:
        prompt = np.asarray(prompt, dtype=np.float64)
        if prompt.ndim != 2 or prompt.shape[1] != self.token_dim:
            raise ValueError(
                f"prompt must be (rows, {self.token_dim}), got shape {prompt.shape}"
            )
        return self._head.encode(prompt, np.asarray(class_token, dtype=np.float64))

    def encode_text_vjp(self, prompt, class_token, cotangent):
        raise UnsupportedOperationError(
            "offline backends serve stored features only; prompt gradients need "
            "the original encoder"
        )

    def records_for_class(self, class_index: int) -> list[int]:
        return [i for i, c in enumerate(self.record_labels) if c == class_index]


class OfflineWorld(NamedTuple):
    backend: OfflineBackend
    catalog: ClassCatalog


def load_offline_features(path) -> OfflineWorld:
    """Parse a feature file; raises FormatError with a byte offset on damage."""
    with open(path, "rb") as fh:
        data = fh.read()
    cur = _Cursor(data)
    magic = cur.take(len(FEATURE_MAGIC), "magic")
    if magic != FEATURE_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {FEATURE_MAGIC!r}", offset=0)
    version = cur.u32("format version")
    if version != FEATURE_FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}", offset=cur.offset - 4)
    feature_dim = cur.u32("feature dimension")
    token_dim = cur.u32("token dimension")
    class_count = cur.u32("class count")
    record_count = cur.u64("record count")
    if feature_dim < 1 or token_dim < 1:
        raise FormatError(
            f"dimension mismatch: D={feature_dim}, Dt={token_dim} must be >= 1",
            offset=len(FEATURE_MAGIC) + 4,
        )
    if class_count < 1:
        raise FormatError("class count must be >= 1", offset=len(FEATURE_MAGIC) + 12)

    names: list[str] = []
    tokens = np.zeros((class_count, token_dim))
    template_features = np.zeros((class_count, feature_dim))
    for c in range(class_count):
        name_offset = cur.offset
        name_len = cur.u16(f"class entry {c} name length")
        raw_name = cur.take(name_len, f"class entry {c} name")
        try:
            name = raw_name.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"class entry {c} name is not UTF-8", offset=name_offset) from exc
        if name in names:
            raise FormatError(f"duplicate class name {name!r}", offset=name_offset)
        names.append(name)
        tokens[c] = cur.f32_vector(token_dim, f"class entry {c} token")
        template_features[c] = cur.f32_vector(feature_dim, f"class entry {c} text feature")

    record_labels: list[int] = []
    record_features = np.zeros((record_count, feature_dim))
    for r in range(record_count):
        label_offset = cur.offset
        label = cur.u32(f"record {r} class id")
        if label >= class_count:
            raise FormatError(
                f"record {r} class id {label} out of range (C={class_count})",
                offset=label_offset,
            )
        record_labels.append(label)
        record_features[r] = cur.f32_vector(feature_dim, f"record {r} feature")
    if cur.offset != len(data):
        raise FormatError(
            f"{len(data) - cur.offset} trailing bytes after record section",
            offset=cur.offset,
        )

    catalog = ClassCatalog(names=tuple(names), class_tokens=tokens)
    backend = OfflineBackend(
        catalog=catalog,
        template_text_features=template_features,
        record_labels=record_labels,
        record_features=record_features,
        digest=hashlib.sha256(data).digest(),
    )
    if backend.renorm_warnings:
        log.warning(
            "%d stored vectors deviated from unit norm by more than %g and were renormalized",
            backend.renorm_warnings,
            RENORM_WARN_TOLERANCE,
        )
    return OfflineWorld(backend, catalog)
