"""Token-grid data model: codebook spec, grids, masks, embed-and-sum, file IO.

A codegram is an L x K grid of discrete token indices: L time-steps, K
hierarchical levels sharing one vocabulary size D per level. Level embeddings
are summed to build the model input sequence. Grids are immutable after
construction; all operations here are pure.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    CorruptHeaderError,
    ShapeMismatchError,
    TokenRangeError,
    TruncatedPayloadError,
    ValidationError,
)

MAGIC = b"CGRM"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHIIId")  # magic, version, L, K, D, frame_rate


@dataclass(frozen=True)
class CodebookSpec:
    """Shape and vocabulary of the residual-level token grid.

    Defaults match a 9-level, 1024-codeword full-band codec running at
    86.1 tokens per second; desk-scale runs override them.
    """

    levels: int = 9
    vocab_size: int = 1024
    embed_dim: int = 8
    frame_rate: float = 86.1

    def __post_init__(self):
        if self.levels < 1:
            raise ValidationError(f"levels must be >= 1, got {self.levels}")
        if self.vocab_size < 2:
            raise ValidationError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.embed_dim < 1:
            raise ValidationError(f"embed_dim must be >= 1, got {self.embed_dim}")

    @property
    def mask_token(self) -> int:
        """Sentinel id one past the vocabulary, marking masked positions."""
        return self.vocab_size


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Codegram:
    """Immutable L x K grid of token indices in [0, vocab_size)."""

    tokens: np.ndarray
    spec: CodebookSpec

    def __post_init__(self):
        tokens = np.ascontiguousarray(self.tokens, dtype=np.int32)
        if tokens.ndim != 2:
            raise ValidationError(f"tokens must be 2-D (L, K), got ndim={tokens.ndim}")
        length, levels = tokens.shape
        if length < 1:
            raise ValidationError("codegram must have at least one time-step")
        if levels != self.spec.levels:
            raise ShapeMismatchError("levels", self.spec.levels, levels)
        if tokens.min() < 0 or tokens.max() >= self.spec.vocab_size:
            raise TokenRangeError(
                f"token values must lie in [0, {self.spec.vocab_size}), "
                f"found range [{tokens.min()}, {tokens.max()}]"
            )
        object.__setattr__(self, "tokens", _freeze(tokens))

    @property
    def length(self) -> int:
        return self.tokens.shape[0]


@dataclass(frozen=True)
class MaskedCodegram:
    """Codegram with masked entries replaced by the sentinel id vocab_size."""

    tokens: np.ndarray
    spec: CodebookSpec

    def __post_init__(self):
        tokens = np.ascontiguousarray(self.tokens, dtype=np.int32)
        if tokens.min() < 0 or tokens.max() > self.spec.vocab_size:
            raise TokenRangeError("masked grid entries must lie in [0, vocab_size]")
        object.__setattr__(self, "tokens", _freeze(tokens))


@dataclass(frozen=True)
class MaskTensor:
    """Boolean L x K grid; True marks a masked position."""

    flags: np.ndarray

    def __post_init__(self):
        flags = np.ascontiguousarray(self.flags, dtype=bool)
        if flags.ndim != 2:
            raise ValidationError(f"mask flags must be 2-D (L, K), got ndim={flags.ndim}")
        object.__setattr__(self, "flags", _freeze(flags))

    @property
    def count_masked(self) -> int:
        return int(self.flags.sum())

    @staticmethod
    def full(length: int, levels: int, value: bool = True) -> "MaskTensor":
        return MaskTensor(np.full((length, levels), value, dtype=bool))


@dataclass(frozen=True)
class EmbeddingTable:
    """Per-level codeword embeddings plus special vectors.

    `tables` is (K, D, E); `mask_vectors` is (K, E) and is distinct storage
    from the codeword rows (the sentinel id D conceptually selects it).
    `null_vectors` maps conditioning stream names to their learnable [NULL]
    replacement vectors.
    """

    tables: np.ndarray
    mask_vectors: np.ndarray
    spec: CodebookSpec
    null_vectors: dict = field(default_factory=dict)

    def __post_init__(self):
        tables = np.ascontiguousarray(self.tables, dtype=np.float64)
        mask_vectors = np.ascontiguousarray(self.mask_vectors, dtype=np.float64)
        expect = (self.spec.levels, self.spec.vocab_size, self.spec.embed_dim)
        if tables.shape != expect:
            raise ShapeMismatchError("tables", expect, tables.shape)
        if mask_vectors.shape != (self.spec.levels, self.spec.embed_dim):
            raise ShapeMismatchError(
                "mask_vectors", (self.spec.levels, self.spec.embed_dim), mask_vectors.shape
            )
        if not (np.isfinite(tables).all() and np.isfinite(mask_vectors).all()):
            raise ValidationError("embedding vectors must be finite")
        object.__setattr__(self, "tables", _freeze(tables))
        object.__setattr__(self, "mask_vectors", _freeze(mask_vectors))

    @staticmethod
    def seeded(spec: CodebookSpec, rng: np.random.Generator) -> "EmbeddingTable":
        """Uniform init in [-1/sqrt(E), +1/sqrt(E)]."""
        bound = 1.0 / np.sqrt(spec.embed_dim)
        tables = rng.uniform(-bound, bound, (spec.levels, spec.vocab_size, spec.embed_dim))
        masks = rng.uniform(-bound, bound, (spec.levels, spec.embed_dim))
        return EmbeddingTable(tables, masks, spec)


def _check_grid_shapes(codegram: Codegram, mask: MaskTensor) -> None:
    if mask.flags.shape[0] != codegram.tokens.shape[0]:
        raise ShapeMismatchError("length", codegram.tokens.shape[0], mask.flags.shape[0])
    if mask.flags.shape[1] != codegram.tokens.shape[1]:
        raise ShapeMismatchError("levels", codegram.tokens.shape[1], mask.flags.shape[1])


def embed_sum(codegram: Codegram, mask: MaskTensor, table: EmbeddingTable) -> np.ndarray:
    """Sum per-level embeddings into one vector per time-step.

    Masked positions contribute their level's MASK embedding instead of the
    codeword row. Returns an (L, embed_dim) array.
    """
    _check_grid_shapes(codegram, mask)
    if table.spec != codegram.spec:
        raise ShapeMismatchError("spec", codegram.spec, table.spec)
    # (K, D+1, E) with the MASK vector appended as row D per level
    full = np.concatenate([table.tables, table.mask_vectors[:, None, :]], axis=1)
    ids = np.where(mask.flags, codegram.spec.mask_token, codegram.tokens)
    gathered = full[np.arange(codegram.spec.levels)[None, :], ids]  # (L, K, E)
    return gathered.sum(axis=1)


def apply_mask(codegram: Codegram, mask: MaskTensor) -> MaskedCodegram:
    """Replace masked entries with the sentinel id; the input is untouched."""
    _check_grid_shapes(codegram, mask)
    tokens = np.where(mask.flags, codegram.spec.mask_token, codegram.tokens)
    return MaskedCodegram(tokens, codegram.spec)


def unmask(masked: MaskedCodegram, original: Codegram) -> Codegram:
    """Restore sentinel entries from the original grid."""
    if masked.tokens.shape != original.tokens.shape:
        raise ShapeMismatchError("tokens", original.tokens.shape, masked.tokens.shape)
    tokens = np.where(masked.tokens == original.spec.mask_token, original.tokens, masked.tokens)
    return Codegram(tokens, original.spec)


# -- file format -----------------------------------------------------------------


def save_codegram(codegram: Codegram, path) -> None:
    """Fixed little-endian header + row-major 32-bit token payload."""
    length, levels = codegram.tokens.shape
    header = _HEADER.pack(
        MAGIC, FORMAT_VERSION, length, levels, codegram.spec.vocab_size,
        codegram.spec.frame_rate,
    )
    payload = codegram.tokens.astype("<i4").tobytes(order="C")
    Path(path).write_bytes(header + payload)


def load_codegram(path, embed_dim: int = 8) -> Codegram:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise TruncatedPayloadError(f"{path}: file shorter than header ({len(raw)} bytes)")
    magic, version, length, levels, vocab, frame_rate = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CorruptHeaderError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CorruptHeaderError(f"{path}: unsupported version {version}")
    if length < 1 or levels < 1 or vocab < 2:
        raise CorruptHeaderError(f"{path}: invalid dims L={length} K={levels} D={vocab}")
    expected = _HEADER.size + 4 * length * levels
    if len(raw) < expected:
        raise TruncatedPayloadError(f"{path}: expected {expected} bytes, got {len(raw)}")
    tokens = np.frombuffer(raw, dtype="<i4", count=length * levels, offset=_HEADER.size)
    tokens = tokens.reshape(length, levels)
    if tokens.min() < 0 or tokens.max() >= vocab:
        raise TokenRangeError(f"{path}: token outside [0, {vocab})")
    spec = CodebookSpec(levels=levels, vocab_size=vocab, embed_dim=embed_dim,
                        frame_rate=frame_rate)
    return Codegram(tokens.copy(), spec)


def dump_text(codegram: Codegram) -> str:
    """Human-readable dump: one line per time-step, K integers."""
    return "\n".join(" ".join(str(t) for t in row) for row in codegram.tokens) + "\n"
