"""Nearest-row kernels.

Two interchangeable backends compute the same argmin/argmax with the same
per-coordinate summation order, so they agree bitwise on the selected ids:

* ``numba``: ``@njit`` double loop (default when numba imports).
* ``numpy``: vectorized over table rows, blocked over the vocabulary.

Set ``PEZLAB_NUMBA=0`` to force the numpy path.
"""

from __future__ import annotations

import os

import numpy as np

BLOCK = 4096

try:  # pragma: no cover - exercised implicitly
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("PEZLAB_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")


def row_norms(E: np.ndarray) -> np.ndarray:
    """Euclidean row norms with a left-to-right coordinate sum."""
    acc = np.zeros(E.shape[0])
    for k in range(E.shape[1]):
        acc += E[:, k] * E[:, k]
    return np.sqrt(acc)


def nearest_euclidean_numpy(Q: np.ndarray, E: np.ndarray, allowed: np.ndarray) -> np.ndarray:
    M, d = Q.shape
    V = E.shape[0]
    best = np.full(M, np.inf)
    best_id = np.full(M, -1, dtype=np.int64)
    for lo in range(0, V, BLOCK):
        Eb = E[lo:lo + BLOCK]
        dist = np.zeros((M, Eb.shape[0]))
        for k in range(d):
            diff = Q[:, k, None] - Eb[None, :, k]
            dist += diff * diff
        dist[:, ~allowed[lo:lo + BLOCK]] = np.inf
        j = np.argmin(dist, axis=1)
        val = dist[np.arange(M), j]
        better = val < best
        best[better] = val[better]
        best_id[better] = j[better] + lo
    return best_id


def nearest_cosine_numpy(Q: np.ndarray, E: np.ndarray, allowed: np.ndarray, E_norm: np.ndarray) -> np.ndarray:
    M, d = Q.shape
    V = E.shape[0]
    q_norm = row_norms(Q)
    best = np.full(M, -np.inf)
    best_id = np.full(M, -1, dtype=np.int64)
    for lo in range(0, V, BLOCK):
        Eb = E[lo:lo + BLOCK]
        dot = np.zeros((M, Eb.shape[0]))
        for k in range(d):
            dot += Q[:, k, None] * Eb[None, :, k]
        sim = dot / (q_norm[:, None] * E_norm[None, lo:lo + BLOCK])
        sim[:, ~allowed[lo:lo + BLOCK]] = -np.inf
        j = np.argmax(sim, axis=1)
        val = sim[np.arange(M), j]
        better = val > best
        best[better] = val[better]
        best_id[better] = j[better] + lo
    return best_id


if HAVE_NUMBA:

    @njit(cache=True)
    def nearest_euclidean_numba(Q, E, allowed):
        M, d = Q.shape
        V = E.shape[0]
        out = np.empty(M, dtype=np.int64)
        for i in range(M):
            best = np.inf
            best_j = -1
            for j in range(V):
                if not allowed[j]:
                    continue
                s = 0.0
                for k in range(d):
                    diff = Q[i, k] - E[j, k]
                    s += diff * diff
                if s < best:
                    best = s
                    best_j = j
            out[i] = best_j
        return out

    @njit(cache=True)
    def nearest_cosine_numba(Q, E, allowed, E_norm):
        M, d = Q.shape
        V = E.shape[0]
        out = np.empty(M, dtype=np.int64)
        for i in range(M):
            qq = 0.0
            for k in range(d):
                qq += Q[i, k] * Q[i, k]
            qn = np.sqrt(qq)
            best = -np.inf
            best_j = -1
            for j in range(V):
                if not allowed[j]:
                    continue
                s = 0.0
                for k in range(d):
                    s += Q[i, k] * E[j, k]
                sim = s / (qn * E_norm[j])
                if sim > best:
                    best = sim
                    best_j = j
            out[i] = best_j
        return out


def nearest_euclidean(Q, E, allowed, backend: str | None = None):
    if _pick(backend) == "numba":
        return nearest_euclidean_numba(Q, E, allowed)
    return nearest_euclidean_numpy(Q, E, allowed)


def nearest_cosine(Q, E, allowed, E_norm, backend: str | None = None):
    if _pick(backend) == "numba":
        return nearest_cosine_numba(Q, E, allowed, E_norm)
    return nearest_cosine_numpy(Q, E, allowed, E_norm)


def _pick(backend: str | None) -> str:
    if backend is None:
        return "numba" if USE_NUMBA else "numpy"
    if backend == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba backend requested but numba is not installed")
    if backend not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {backend!r}")
    return backend
