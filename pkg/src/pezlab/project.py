"""Nearest-neighbor projection of continuous vectors onto vocabulary rows."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from . import _kernels
from .embedding import EmbeddingTable, HardPrompt, as_ids
from .errors import EmptyMask, ShapeMismatch, ZeroNormQuery

METRICS = ("euclidean", "cosine")
NORM_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class ProjectionConfig:
    """Metric plus an optional boolean mask of projectable tokens (True = allowed)."""

    metric: str = "euclidean"
    allowed: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}, got {self.metric!r}")
        if self.allowed is not None:
            mask = np.array(self.allowed, dtype=bool).ravel()
            if not mask.any():
                raise EmptyMask("projection mask allows no tokens")
            mask.setflags(write=False)
            object.__setattr__(self, "allowed", mask)

    def mask_for(self, table: EmbeddingTable) -> np.ndarray:
        if self.allowed is None:
            return np.ones(table.V, dtype=bool)
        if self.allowed.shape[0] != table.V:
            raise ShapeMismatch(f"mask length {self.allowed.shape[0]} != V={table.V}")
        return self.allowed

    @classmethod
    def banning(cls, table: EmbeddingTable, banned: Iterable[int | str], metric: str = "euclidean") -> "ProjectionConfig":
        """Mask that forbids the given token ids or token strings."""
        index = {tok: i for i, tok in enumerate(table.tokens)}
        mask = np.ones(table.V, dtype=bool)
        for b in banned:
            mask[index[b] if isinstance(b, str) else int(b)] = False
        return cls(metric, mask)

    @classmethod
    def only(cls, table: EmbeddingTable, bank: Iterable[int | str], metric: str = "euclidean") -> "ProjectionConfig":
        """Mask restricted to a keyword bank."""
        index = {tok: i for i, tok in enumerate(table.tokens)}
        mask = np.zeros(table.V, dtype=bool)
        for b in bank:
            mask[index[b] if isinstance(b, str) else int(b)] = True
        return cls(metric, mask)


DEFAULT_PROJECTION = ProjectionConfig()

_norm_cache: dict[int, tuple[EmbeddingTable, np.ndarray]] = {}


def _table_norms(table: EmbeddingTable) -> np.ndarray:
    hit = _norm_cache.get(id(table))
    if hit is not None and hit[0] is table:
        return hit[1]
    norms = _kernels.row_norms(table.matrix)
    _norm_cache[id(table)] = (table, norms)
    return norms


def nearest_ids(P: np.ndarray, table: EmbeddingTable, cfg: ProjectionConfig = DEFAULT_PROJECTION,
                backend: str | None = None) -> np.ndarray:
    """Rowwise projection returning an int64 id array (hot path used by the optimizers)."""
    Q = np.ascontiguousarray(P, dtype=np.float64)
    if Q.ndim != 2 or Q.shape[1] != table.d:
        raise ShapeMismatch(f"expected (M, {table.d}) queries, got {Q.shape}")
    if not np.all(np.isfinite(Q)):
        raise ValueError("projection query contains non-finite entries")
    allowed = cfg.mask_for(table)
    if cfg.metric == "euclidean":
        return _kernels.nearest_euclidean(Q, table.matrix, allowed, backend)
    norms = _table_norms(table)
    if np.any(norms[allowed] <= NORM_FLOOR):
        raise ZeroNormQuery("an allowed table row has (near) zero norm under the cosine metric")
    if np.any(_kernels.row_norms(Q) <= NORM_FLOOR):
        raise ZeroNormQuery("query vector has (near) zero norm under the cosine metric")
    return _kernels.nearest_cosine(Q, table.matrix, allowed, norms, backend)


def project_one(e: np.ndarray, table: EmbeddingTable, cfg: ProjectionConfig = DEFAULT_PROJECTION) -> int:
    return int(nearest_ids(np.asarray(e, dtype=np.float64)[None, :], table, cfg)[0])


def project_all(P: np.ndarray, table: EmbeddingTable, cfg: ProjectionConfig = DEFAULT_PROJECTION) -> HardPrompt:
    return HardPrompt(tuple(nearest_ids(P, table, cfg)), table)


def embed_tokens(p, table: EmbeddingTable) -> np.ndarray:
    return table.matrix[as_ids(p)]


def project_bruteforce(P: np.ndarray, table: EmbeddingTable, cfg: ProjectionConfig = DEFAULT_PROJECTION) -> list[int]:
    """Naive double loop over queries and rows; the reference the kernels are checked against."""
    E = table.matrix
    allowed = cfg.mask_for(table)
    out = []
    for q in np.asarray(P, dtype=np.float64):
        best, best_j = None, -1
        if cfg.metric == "cosine":
            qq = 0.0
            for x in q:
                qq += x * x
            qn = np.sqrt(qq)
        for j in range(table.V):
            if not allowed[j]:
                continue
            if cfg.metric == "euclidean":
                s = 0.0
                for k in range(table.d):
                    diff = q[k] - E[j, k]
                    s += diff * diff
                if best is None or s < best:
                    best, best_j = s, j
            else:
                s = 0.0
                rr = 0.0
                for k in range(table.d):
                    s += q[k] * E[j, k]
                    rr += E[j, k] * E[j, k]
                sim = s / (qn * np.sqrt(rr))
                if best is None or sim > best:
                    best, best_j = sim, j
        out.append(best_j)
    return out
