"""Text -> token indices -> embedded vectors, plus rotary position embedding."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError, LookupError_, ShapeError, UnknownSymbolError
from .linalg import Matrix, as_matrix

_WS = re.compile(r"\s+")


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        tokens = tuple(self.tokens)
        object.__setattr__(self, "tokens", tokens)
        if any(not isinstance(t, str) or not t for t in tokens):
            raise FormatError("vocabulary tokens must be nonempty strings")
        index = {t: i for i, t in enumerate(tokens)}
        if len(index) != len(tokens):
            raise FormatError("vocabulary tokens must be distinct")
        object.__setattr__(self, "index", index)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def longest(self) -> int:
        return max((len(t) for t in self.tokens), default=0)


@dataclass(frozen=True)
class EmbeddingTable:
    matrix: Matrix

    def __post_init__(self):
        object.__setattr__(self, "matrix", as_matrix(self.matrix, "embedding table"))

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    @classmethod
    def random(cls, n_tokens: int, dim: int, seed: int) -> "EmbeddingTable":
        rng = np.random.default_rng(seed)
        return cls(rng.standard_normal((n_tokens, dim)))


@dataclass(frozen=True)
class RopeParams:
    head_dim: int
    base: float = 10000.0

    def __post_init__(self):
        if self.head_dim < 0 or self.head_dim % 2:
            raise ShapeError(f"RoPE head_dim must be even, got {self.head_dim}")
        if not self.base > 0:
            raise ValueError("RoPE base must be positive")

    def frequencies(self) -> np.ndarray:
        k = np.arange(self.head_dim // 2)
        return self.base ** (-2.0 * k / self.head_dim)


def normalize_text(text: str) -> str:
    """Lowercase and collapse whitespace runs to single spaces."""
    return _WS.sub(" ", text.lower()).strip()


def _greedy(chunk: str, offset: int, vocab: Vocabulary, max_len: int) -> list[int]:
    out = []
    pos = 0
    while pos < len(chunk):
        for n in range(min(max_len, len(chunk) - pos), 0, -1):
            idx = vocab.index.get(chunk[pos:pos + n])
            if idx is not None:
                out.append(idx)
                pos += n
                break
        else:
            raise UnknownSymbolError(chunk[pos], offset + pos)
    return out


def tokenize_greedy(text: str, vocab: Vocabulary, max_len: int, split_whitespace: bool = False) -> list[int]:
    """Left-to-right greedy longest match with candidates capped at ``max_len`` characters.

    With ``split_whitespace`` the normalized text is split on spaces first and
    each word is matched independently (word-level vocabularies). Positions in
    errors refer to the normalized text.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    norm = normalize_text(text)
    if not split_whitespace:
        return _greedy(norm, 0, vocab, max_len)
    out: list[int] = []
    offset = 0
    for word in norm.split(" ") if norm else []:
        out.extend(_greedy(word, offset, vocab, max_len))
        offset += len(word) + 1
    return out


def detokenize(indices: Sequence[int], vocab: Vocabulary, sep: str = "") -> str:
    return sep.join(vocab.tokens[i] for i in indices)


def embed(indices: Sequence[int], table: EmbeddingTable) -> Matrix:
    idx = np.asarray(list(indices), dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.size):
        bad = int(idx[(idx < 0) | (idx >= table.size)][0])
        raise LookupError_(f"token index {bad} outside table of {table.size} rows")
    return table.matrix[idx].copy() if idx.size else np.zeros((0, table.dim))


def rope_rotate(m, positions, params: RopeParams) -> Matrix:
    """Rotate row ``t`` of ``m`` by ``R_{positions[t]}`` (pairwise rotation of coordinates)."""
    m = as_matrix(m)
    if m.shape[1] % 2:
        raise ShapeError(f"RoPE needs an even column count, got {m.shape[1]}")
    if m.shape[1] != params.head_dim:
        raise ShapeError(f"RoPE configured for width {params.head_dim}, got {m.shape[1]}")
    pos = np.broadcast_to(np.asarray(positions, dtype=np.float64), (m.shape[0],))
    angles = pos[:, None] * params.frequencies()[None, :]
    cos, sin = np.cos(angles), np.sin(angles)
    x, y = m[:, 0::2], m[:, 1::2]
    out = np.empty_like(m)
    out[:, 0::2] = x * cos - y * sin
    out[:, 1::2] = x * sin + y * cos
    return out


def apply_rope(m, start_pos: int, params: RopeParams) -> Matrix:
    m = as_matrix(m)
    return rope_rotate(m, start_pos + np.arange(m.shape[0]), params)


def load_vocabulary(path) -> tuple[Vocabulary, EmbeddingTable]:
    """Read ``{"tokens": [...], "dim": d, "rows": [[...]] | "seed": s}``."""
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read vocabulary file {path}: {exc}") from exc
    return vocabulary_from_dict(doc)


def vocabulary_from_dict(doc: dict) -> tuple[Vocabulary, EmbeddingTable]:
    if "tokens" not in doc or "dim" not in doc:
        raise FormatError("vocabulary file needs 'tokens' and 'dim'")
    vocab = Vocabulary(tuple(doc["tokens"]))
    dim = int(doc["dim"])
    if "rows" in doc:
        table = EmbeddingTable(np.asarray(doc["rows"], dtype=np.float64).reshape(-1, dim) if doc["rows"] else np.zeros((0, dim)))
    elif "seed" in doc:
        table = EmbeddingTable.random(len(vocab), dim, int(doc["seed"]))
    else:
        raise FormatError("vocabulary file needs either 'rows' or 'seed'")
    if table.size != len(vocab) or table.dim != dim:
        raise FormatError(f"embedding rows {table.matrix.shape} do not match {len(vocab)} tokens x dim {dim}")
    return vocab, table


def vocabulary_to_dict(vocab: Vocabulary, table: EmbeddingTable) -> dict:
    return {"tokens": list(vocab.tokens), "dim": table.dim, "rows": table.matrix.tolist()}
