"""Class-level prompt bank: build, persist, load, look up.

Each entry pairs a class name with a key (that class's text feature) and a
value (the class-specific prompt). The shared prompt is persisted with the
bank because inference recomputes matching queries against it.

Bank file layout (little-endian), version 1:

    magic   8 bytes  b"CAKIBANK"
    version u32
    D, Dt, L, C  u32 each
    fingerprint: kind u8, digest 32 bytes
    shared prompt  L x Dt f32
    C entries: name_len u16, name bytes, key D x f32, value L x Dt f32
    CRC32C  u32 over all preceding bytes

Keys and prompts are stored as f32 (halves storage, negligible effect on
cosine rankings); in-memory values stay f64. Loading never renormalizes,
so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .encoder import ClassCatalog, EncoderFingerprint, template_prompt
from .errors import FormatError

BANK_MAGIC = b"CAKIBANK"
BANK_FORMAT_VERSION = 1
# f32 round-off on a unit-norm key moves its norm by well under this.
KEY_NORM_TOLERANCE = 1e-6

_FINGERPRINT_KINDS = {"synthetic": 0, "offline": 1}
_FINGERPRINT_CODES = {v: k for k, v in _FINGERPRINT_KINDS.items()}

KEY_TEMPLATE_CHOICES = ("shared", "handcrafted")


def _make_crc32c_table() -> list[int]:
    poly = 0x82F63B78
    table = []
    for byte in range(256):
        crc = byte
        for _ in range(8):
            crc = (crc >> 1) ^ poly if crc & 1 else crc >> 1
        table.append(crc)
    return table


_CRC32C_TABLE = _make_crc32c_table()


def crc32c(data: bytes, crc: int = 0) -> int:
    """CRC-32C (Castagnoli). crc32c(b"123456789") == 0xE3069283."""
    crc ^= 0xFFFFFFFF
    for byte in data:
        crc = _CRC32C_TABLE[(crc ^ byte) & 0xFF] ^ (crc >> 8)
    return crc ^ 0xFFFFFFFF


@dataclass(frozen=True)
class BankEntry:
    class_name: str
    key: np.ndarray  # (D,), unit norm
    value: np.ndarray  # (L, Dt) prompt

    def __post_init__(self):
        key = np.asarray(self.key, dtype=np.float64)
        value = np.asarray(self.value, dtype=np.float64)
        if key.ndim != 1:
            raise ValueError("key must be a vector")
        if value.ndim != 2:
            raise ValueError("value must be a prompt matrix")
        if not np.all(np.isfinite(key)) or not np.all(np.isfinite(value)):
            raise ValueError(f"entry {self.class_name!r} contains non-finite values")
        if abs(float(np.linalg.norm(key)) - 1.0) > KEY_NORM_TOLERANCE:
            raise ValueError(f"key for {self.class_name!r} is not unit-norm")
        object.__setattr__(self, "key", key)
        object.__setattr__(self, "value", value)


@dataclass(frozen=True)
class PromptBank:
    entries: tuple[BankEntry, ...]
    shared_prompt: np.ndarray
    fingerprint: EncoderFingerprint
    format_version: int = BANK_FORMAT_VERSION

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        object.__setattr__(
            self, "shared_prompt", np.asarray(self.shared_prompt, dtype=np.float64)
        )
        names = [e.class_name for e in self.entries]
        if len(names) != len(set(names)):
            raise ValueError("bank entries must have unique class names")
        if self.shared_prompt.ndim != 2 or not np.all(np.isfinite(self.shared_prompt)):
            raise ValueError("shared prompt must be a finite matrix")
        shape = self.shared_prompt.shape
        for e in self.entries:
            if e.value.shape != shape:
                raise ValueError(
                    f"entry {e.class_name!r} prompt shape {e.value.shape} != {shape}"
                )
            if e.key.shape != self.entries[0].key.shape:
                raise ValueError("bank keys must share one dimension")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def key_matrix(self) -> np.ndarray:
        return np.stack([e.key for e in self.entries])

    @property
    def class_names(self) -> tuple[str, ...]:
        return tuple(e.class_name for e in self.entries)


def build_bank(
    backend,
    catalog: ClassCatalog,
    shared_prompt: np.ndarray,
    class_prompts,
    key_template: str = "shared",
) -> PromptBank:
    """Assemble a bank: one (key, prompt) entry per catalog class.

    Keys are text features under the learned shared prompt by default;
    ``key_template="handcrafted"`` encodes the fixed template prompt
    instead, which keys entries purely by class name.
    """
    if key_template not in KEY_TEMPLATE_CHOICES:
        raise ValueError(f"key_template must be one of {KEY_TEMPLATE_CHOICES}")
    class_prompts = list(class_prompts)
    if len(class_prompts) != len(catalog):
        raise ValueError(
            f"{len(class_prompts)} class prompts for {len(catalog)} catalog classes"
        )
    if key_template == "shared":
        key_prompt = np.asarray(shared_prompt, dtype=np.float64)
    else:
        key_prompt = template_prompt(np.shape(shared_prompt)[0], np.shape(shared_prompt)[1])
    entries = [
        BankEntry(
            class_name=catalog.names[c],
            key=backend.encode_text(key_prompt, catalog.class_tokens[c]),
            value=np.asarray(class_prompts[c], dtype=np.float64),
        )
        for c in range(len(catalog))
    ]
    return PromptBank(
        entries=tuple(entries),
        shared_prompt=np.asarray(shared_prompt, dtype=np.float64),
        fingerprint=backend.fingerprint,
    )


def bank_lookup(bank: PromptBank, indices) -> list[BankEntry]:
    """Entries at the given cache indices, in the given order."""
    out = []
    for i in indices:
        if not 0 <= i < len(bank):
            raise ValueError(f"cache index {i} out of range (C={len(bank)})")
        out.append(bank.entries[int(i)])
    return out


def _bank_dims(bank: PromptBank) -> tuple[int, int, int]:
    rows, token_dim = bank.shared_prompt.shape
    if bank.entries:
        feature_dim = bank.entries[0].key.shape[0]
    else:
        feature_dim = bank.fingerprint.feature_dim
    return feature_dim, token_dim, rows


def save_bank(bank: PromptBank, path) -> None:
    feature_dim, token_dim, rows = _bank_dims(bank)
    out = bytearray()
    out += BANK_MAGIC
    out += struct.pack("<IIIII", bank.format_version, feature_dim, token_dim, rows, len(bank))
    kind_code = _FINGERPRINT_KINDS.get(bank.fingerprint.kind)
    if kind_code is None:
        raise ValueError(f"unknown fingerprint kind {bank.fingerprint.kind!r}")
    digest = bank.fingerprint.digest
    if len(digest) != 32:
        raise ValueError("fingerprint digest must be 32 bytes")
    out += struct.pack("<B", kind_code)
    out += digest
    out += bank.shared_prompt.astype("<f4").tobytes()
    for entry in bank.entries:
        name = entry.class_name.encode("utf-8")
        out += struct.pack("<H", len(name))
        out += name
        out += entry.key.astype("<f4").tobytes()
        out += entry.value.astype("<f4").tobytes()
    out += struct.pack("<I", crc32c(bytes(out)))
    with open(path, "wb") as fh:
        fh.write(bytes(out))


def load_bank(path) -> PromptBank:
    with open(path, "rb") as fh:
        data = fh.read()
    minimum = len(BANK_MAGIC) + 4 * 5 + 1 + 32 + 4
    if len(data) < minimum:
        raise FormatError(
            f"file too short for bank header ({len(data)} bytes)", offset=len(data)
        )
    if data[: len(BANK_MAGIC)] != BANK_MAGIC:
        raise FormatError(
            f"bad magic {data[:len(BANK_MAGIC)]!r}, expected {BANK_MAGIC!r}", offset=0
        )
    stored_crc = struct.unpack("<I", data[-4:])[0]
    actual_crc = crc32c(data[:-4])
    if stored_crc != actual_crc:
        raise FormatError(
            f"checksum mismatch: stored {stored_crc:#010x}, computed {actual_crc:#010x}",
            offset=len(data) - 4,
        )

    offset = len(BANK_MAGIC)
    version, feature_dim, token_dim, rows, entry_count = struct.unpack_from("<IIIII", data, offset)
    offset += 20
    if version != BANK_FORMAT_VERSION:
        raise FormatError(f"unsupported bank version {version}", offset=len(BANK_MAGIC))
    if feature_dim < 1 or token_dim < 1 or rows < 1:
        raise FormatError(
            f"dimension mismatch: D={feature_dim}, Dt={token_dim}, L={rows}",
            offset=len(BANK_MAGIC) + 4,
        )
    kind_code = data[offset]
    offset += 1
    if kind_code not in _FINGERPRINT_CODES:
        raise FormatError(f"unknown fingerprint kind code {kind_code}", offset=offset - 1)
    digest = data[offset : offset + 32]
    offset += 32

    def f32_block(count: int, what: str) -> np.ndarray:
        nonlocal offset
        end = offset + 4 * count
        if end > len(data) - 4:
            raise FormatError(f"truncated file: missing {what}", offset=offset)
        block = np.frombuffer(data[offset:end], dtype="<f4").astype(np.float64)
        offset = end
        return block

    shared = f32_block(rows * token_dim, "shared prompt").reshape(rows, token_dim)
    entries = []
    for i in range(entry_count):
        if offset + 2 > len(data) - 4:
            raise FormatError(f"truncated file: missing entry {i} name length", offset=offset)
        (name_len,) = struct.unpack_from("<H", data, offset)
        offset += 2
        if offset + name_len > len(data) - 4:
            raise FormatError(f"truncated file: missing entry {i} name", offset=offset)
        try:
            name = data[offset : offset + name_len].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"entry {i} name is not UTF-8", offset=offset) from exc
        offset += name_len
        entry_offset = offset
        key = f32_block(feature_dim, f"entry {i} key")
        value = f32_block(rows * token_dim, f"entry {i} value").reshape(rows, token_dim)
        try:
            entries.append(BankEntry(class_name=name, key=key, value=value))
        except ValueError as exc:
            raise FormatError(f"entry {i}: {exc}", offset=entry_offset) from exc
    if offset != len(data) - 4:
        raise FormatError(
            f"{len(data) - 4 - offset} trailing bytes before checksum", offset=offset
        )

    fingerprint = EncoderFingerprint(
        kind=_FINGERPRINT_CODES[kind_code],
        feature_dim=feature_dim,
        token_dim=token_dim,
        prompt_rows=rows if _FINGERPRINT_CODES[kind_code] == "synthetic" else 0,
        digest=digest,
    )
    try:
        return PromptBank(
            entries=tuple(entries),
            shared_prompt=shared,
            fingerprint=fingerprint,
            format_version=version,
        )
    except ValueError as exc:
        raise FormatError(str(exc)) from exc
