"""Vocabulary embedding tables, the EMB1 file format, and prompt containers."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    BadTemplate,
    DuplicateToken,
    InvalidDims,
    InvalidLength,
    IoFailure,
    MalformedHeader,
    NonFiniteEntry,
    TableMismatch,
    TokenCountMismatch,
)

MAGIC = b"EMB1"
_HEADER = struct.Struct("<4sII")


@dataclass(frozen=True, eq=False)
class EmbeddingTable:
    """A vocabulary of ``V`` token strings and their ``V x d`` embedding matrix.

    The matrix is stored as a read-only float64 array; tables compare by identity.
    """

    tokens: tuple[str, ...]
    matrix: np.ndarray

    def __post_init__(self) -> None:
        tokens = tuple(self.tokens)
        matrix = np.array(self.matrix, dtype=np.float64, copy=True)
        if matrix.ndim != 2:
            raise InvalidDims(f"matrix must be 2-D, got shape {matrix.shape}")
        V, d = matrix.shape
        if V < 2 or d < 1:
            raise InvalidDims(f"need V >= 2 and d >= 1, got V={V}, d={d}")
        if len(tokens) != V:
            raise TokenCountMismatch(f"{len(tokens)} tokens for {V} rows")
        if not np.all(np.isfinite(matrix)):
            raise NonFiniteEntry("embedding matrix contains NaN or inf")
        if len(set(tokens)) != V:
            raise DuplicateToken("token strings must be unique")
        matrix.setflags(write=False)
        object.__setattr__(self, "tokens", tokens)
        object.__setattr__(self, "matrix", matrix)

    @property
    def V(self) -> int:
        return self.matrix.shape[0]

    @property
    def d(self) -> int:
        return self.matrix.shape[1]

    def __repr__(self) -> str:
        return f"EmbeddingTable(V={self.V}, d={self.d})"


@dataclass(frozen=True)
class HardPrompt:
    """A sequence of token ids into an embedding table."""

    token_ids: tuple[int, ...]
    table: EmbeddingTable | None = field(default=None, compare=False, repr=False)

    def __post_init__(self) -> None:
        ids = tuple(int(i) for i in self.token_ids)
        if len(ids) < 1:
            raise InvalidLength("a hard prompt needs at least one token")
        if any(i < 0 for i in ids):
            raise ValueError(f"negative token id in {ids}")
        if self.table is not None and max(ids) >= self.table.V:
            raise ValueError(f"token id {max(ids)} out of range for V={self.table.V}")
        object.__setattr__(self, "token_ids", ids)

    def __len__(self) -> int:
        return len(self.token_ids)

    def __iter__(self):
        return iter(self.token_ids)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.token_ids, dtype=np.int64)

    def strings(self, table: EmbeddingTable | None = None) -> list[str]:
        table = table or self.table
        if table is None:
            raise TableMismatch("no table attached to this prompt")
        return [table.tokens[i] for i in self.token_ids]


@dataclass
class PromptState:
    """Continuous prompt iterate plus Adam moment buffers."""

    P: np.ndarray
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def from_matrix(cls, P: np.ndarray) -> "PromptState":
        P = np.array(P, dtype=np.float64, copy=True)
        return cls(P=P, m=np.zeros_like(P), v=np.zeros_like(P), step=0)

    def copy(self) -> "PromptState":
        return PromptState(self.P.copy(), self.m.copy(), self.v.copy(), self.step)


def token_path(path: str | Path) -> Path:
    """Companion token file for an ``.emb1`` file: same stem, ``.tokens`` suffix."""
    return Path(path).with_suffix(".tokens")


def save_table(table: EmbeddingTable, path: str | Path) -> None:
    payload = np.ascontiguousarray(table.matrix, dtype="<f4")
    if not np.all(np.isfinite(payload)):
        raise NonFiniteEntry("matrix overflows 32-bit float range")
    header = _HEADER.pack(MAGIC, table.V, table.d)
    text = "".join(tok + "\n" for tok in table.tokens)
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(payload.tobytes())
        with open(token_path(path), "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    except OSError as exc:
        raise IoFailure(f"cannot write table to {path}: {exc}") from exc


def load_table(path: str | Path) -> EmbeddingTable:
    try:
        raw = Path(path).read_bytes()
        text = token_path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot read table {path}: {exc}") from exc
    if len(raw) < _HEADER.size:
        raise MalformedHeader(f"{path}: file shorter than header")
    magic, V, d = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise MalformedHeader(f"{path}: bad magic {magic!r}")
    if V < 2 or d < 1:
        raise MalformedHeader(f"{path}: invalid dims V={V}, d={d}")
    if len(raw) != _HEADER.size + 4 * V * d:
        raise MalformedHeader(f"{path}: payload is {len(raw) - _HEADER.size} bytes, expected {4 * V * d}")
    matrix = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(V, d).astype(np.float64)
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if len(lines) != V:
        raise TokenCountMismatch(f"{token_path(path)}: {len(lines)} tokens, header says V={V}")
    return EmbeddingTable(tuple(lines), matrix)


def gen_table(V: int, d: int, seed: int) -> EmbeddingTable:
    """Synthetic vocabulary: i.i.d. N(0, 1/d) entries, tokens ``t0 .. t{V-1}``."""
    if V < 2 or d < 1:
        raise InvalidDims(f"need V >= 2 and d >= 1, got V={V}, d={d}")
    rng = np.random.default_rng(seed)
    matrix = rng.normal(0.0, 1.0 / np.sqrt(d), size=(V, d))
    return EmbeddingTable(tuple(f"t{i}" for i in range(V)), matrix)


def sample_init(table: EmbeddingTable, M: int, rng) -> PromptState:
    """Initial iterate: ``M`` table rows drawn uniformly with replacement."""
    if M < 1:
        raise InvalidLength(f"prompt length must be >= 1, got {M}")
    ids = np.asarray(rng.integers(0, table.V, size=M), dtype=np.int64)
    return PromptState.from_matrix(table.matrix[ids])


def concat_prompts(a: HardPrompt, b: HardPrompt) -> HardPrompt:
    if a.table is not None and b.table is not None and a.table is not b.table:
        raise TableMismatch("cannot concatenate prompts from different tables")
    return HardPrompt(a.token_ids + b.token_ids, a.table or b.table)


def fill_template(template: str, p: HardPrompt, table: EmbeddingTable) -> str:
    n = template.count("{}")
    if n != 1:
        raise BadTemplate(f"template must contain exactly one '{{}}' slot, found {n}")
    return template.replace("{}", " ".join(p.strings(table)))


def as_ids(p: HardPrompt | Sequence[int] | np.ndarray) -> np.ndarray:
    if isinstance(p, HardPrompt):
        return p.as_array()
    return np.asarray(p, dtype=np.int64)
