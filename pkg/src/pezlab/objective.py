"""Differentiable losses over prompt embeddings, with hand-derived gradients.

Every objective takes the embeddings it is evaluated at (``Pp``, shape ``M x d``)
and the token ids those embeddings came from, and returns ``(loss, grad)`` with
``grad`` shaped like ``Pp``. Gradients are certified against central
differences by :func:`finite_diff_check`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import logsumexp

from .embedding import EmbeddingTable, HardPrompt, as_ids
from .errors import DegenerateEncoding, EmptyBatch, InvalidDims, MissingFluencyModel

NORM_FLOOR = 1e-12

# fluency weights used for the classification experiments
FLUENCY_WEIGHT = 0.003
FEWSHOT_FLUENCY_WEIGHT = 0.03
DISTILLATION_RATIOS = (0.7, 0.5, 0.3, 0.1)

KINDS = ("invert", "distill", "classify")


def distillation_ratio(M: int, M_target: int) -> float:
    return M / M_target


def distilled_length(M_target: int, ratio: float) -> int:
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"distillation ratio must be in (0, 1], got {ratio}")
    return max(1, int(round(ratio * M_target)))


@dataclass(frozen=True, eq=False)
class ToyEncoder:
    """Positionally weighted linear encoder with unit-norm output.

    ``f(P) = u / |u|`` with ``u = W @ sum_i omega[i] * P[i]``.
    """

    W: np.ndarray
    omega: np.ndarray

    def __post_init__(self) -> None:
        W = np.asarray(self.W, dtype=np.float64)
        omega = np.asarray(self.omega, dtype=np.float64).ravel()
        if W.ndim != 2:
            raise InvalidDims(f"W must be 2-D, got {W.shape}")
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(omega))):
            raise ValueError("encoder parameters must be finite")
        if np.any(omega <= 0):
            raise ValueError("positional weights must be positive")
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "omega", omega)

    @property
    def d_f(self) -> int:
        return self.W.shape[0]

    @property
    def d(self) -> int:
        return self.W.shape[1]

    @property
    def max_len(self) -> int:
        return self.omega.shape[0]

    def forward(self, P: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
        """Return ``(f(P), u, |u|)``."""
        M = P.shape[0]
        if M > self.max_len:
            raise InvalidDims(f"prompt length {M} exceeds encoder capacity {self.max_len}")
        pooled = self.omega[:M] @ P
        u = self.W @ pooled
        norm = float(np.sqrt(u @ u))
        if not norm > NORM_FLOOR:
            raise DegenerateEncoding(f"encoded feature norm {norm:.3e} at or below {NORM_FLOOR}")
        return u / norm, u, norm

    def __call__(self, P: np.ndarray) -> np.ndarray:
        return self.forward(P)[0]

    def backward(self, P: np.ndarray, u: np.ndarray, norm: float, d_feat: np.ndarray) -> np.ndarray:
        """Pull a gradient w.r.t. the unit feature back to the prompt rows."""
        n = u / norm
        du = (d_feat - n * (n @ d_feat)) / norm
        d_pooled = self.W.T @ du
        return self.omega[:P.shape[0], None] * d_pooled[None, :]


def gen_encoder(d: int, d_f: int, seed: int, max_len: int = 64) -> ToyEncoder:
    """Seeded encoder: ``W`` entries N(0, 1/d), ``omega[i] = 1 / (1 + i)``."""
    if d < 1 or d_f < 1 or max_len < 1:
        raise InvalidDims(f"invalid encoder dims d={d}, d_f={d_f}, max_len={max_len}")
    rng = np.random.default_rng(seed)
    W = rng.normal(0.0, 1.0 / np.sqrt(d), size=(d_f, d))
    return ToyEncoder(W, 1.0 / (1.0 + np.arange(max_len)))


@dataclass(frozen=True, eq=False)
class BigramLM:
    """Next-token model: logits at position i are ``E @ (A @ prev_i)``, prev_0 = s."""

    A: np.ndarray
    s: np.ndarray
    table: EmbeddingTable

    def __post_init__(self) -> None:
        A = np.asarray(self.A, dtype=np.float64)
        s = np.asarray(self.s, dtype=np.float64).ravel()
        d = self.table.d
        if A.shape != (d, d) or s.shape != (d,):
            raise InvalidDims(f"BigramLM needs A ({d},{d}) and s ({d},), got {A.shape} and {s.shape}")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(s))):
            raise ValueError("language model parameters must be finite")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "s", s)


def gen_bigram(table: EmbeddingTable, seed: int) -> BigramLM:
    rng = np.random.default_rng(seed)
    d = table.d
    return BigramLM(rng.normal(0.0, 1.0, size=(d, d)), rng.normal(0.0, 1.0 / np.sqrt(d), size=d), table)


@dataclass(frozen=True, eq=False)
class ClassifyTask:
    """Frozen one-hidden-layer classifier fed ``[meanpool(prompt); meanpool(input)]``."""

    inputs: np.ndarray  # (n, N, d)
    labels: np.ndarray  # (n,)
    U: np.ndarray  # (H, 2d)
    C: np.ndarray  # (L, H)
    pooled: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        X = np.asarray(self.inputs, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        U = np.asarray(self.U, dtype=np.float64)
        C = np.asarray(self.C, dtype=np.float64)
        if X.ndim != 3 or y.shape != (X.shape[0],):
            raise InvalidDims(f"inputs must be (n, N, d) with n labels, got {X.shape} / {y.shape}")
        d = X.shape[2]
        if U.shape[1] != 2 * d or C.shape[1] != U.shape[0]:
            raise InvalidDims(f"U {U.shape} / C {C.shape} incompatible with d={d}")
        if y.size and (y.min() < 0 or y.max() >= C.shape[0]):
            raise ValueError("labels out of range")
        object.__setattr__(self, "inputs", X)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "U", U)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "pooled", X.mean(axis=1))

    @property
    def n_classes(self) -> int:
        return self.C.shape[0]

    def __len__(self) -> int:
        return self.labels.shape[0]

    def subset(self, idx) -> "ClassifyTask":
        idx = np.asarray(idx, dtype=np.int64)
        return ClassifyTask(self.inputs[idx], self.labels[idx], self.U, self.C)

    def logits(self, Pp: np.ndarray) -> np.ndarray:
        d = Pp.shape[1]
        pbar = Pp.mean(axis=0)
        z = self.U[:, :d] @ pbar + self.pooled @ self.U[:, d:].T
        return np.tanh(z) @ self.C.T

    def accuracy(self, Pp: np.ndarray) -> float:
        return float(np.mean(np.argmax(self.logits(Pp), axis=1) == self.labels))


@dataclass(frozen=True, eq=False)
class ObjectiveInstance:
    """One loss: an inversion, distillation or classification task, optionally fluency-weighted."""

    kind: str
    encoder: ToyEncoder | None = None
    target_feature: np.ndarray | None = None
    target_tokens: HardPrompt | None = None
    task: ClassifyTask | None = None
    lm: BigramLM | None = None
    lam: float = 0.0
    table: EmbeddingTable | None = None

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"fluency weight must lie in [0, 1], got {self.lam}")
        if self.kind == "invert":
            if self.encoder is None or self.target_feature is None:
                raise ValueError("invert objective needs encoder and target_feature")
            if self.target_tokens is not None or self.task is not None:
                raise ValueError("invert objective takes no target_tokens or task")
            object.__setattr__(self, "target_feature", _unit(self.target_feature))
        elif self.kind == "distill":
            if self.encoder is None or self.target_tokens is None:
                raise ValueError("distill objective needs encoder and target_tokens")
            if self.task is not None:
                raise ValueError("distill objective takes no task")
            table = self.table or self.target_tokens.table or (self.lm.table if self.lm else None)
            if table is None:
                raise ValueError("distill objective needs the table its target tokens index")
            object.__setattr__(self, "table", table)
            feat = self.encoder(table.matrix[self.target_tokens.as_array()])
            object.__setattr__(self, "target_feature", feat)
        else:
            if self.task is None:
                raise ValueError("classify objective needs a task")
            if self.target_feature is not None or self.target_tokens is not None:
                raise ValueError("classify objective takes no inversion target")

    def task_loss(self, Pp, ids, batch=None):
        if self.kind == "invert":
            return invert_loss(Pp, ids, self)
        if self.kind == "distill":
            return distill_loss(Pp, ids, self)
        return classify_loss(Pp, ids, batch, self)

    def __call__(self, Pp, ids, batch=None):
        return combined_loss(Pp, ids, self, batch)

    def hard_loss(self, ids, table: EmbeddingTable, batch=None) -> float:
        ids = as_ids(ids)
        return self(table.matrix[ids], ids, batch)[0]


def _unit(t) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).ravel()
    norm = float(np.sqrt(t @ t))
    if not norm > NORM_FLOOR:
        raise DegenerateEncoding("target feature has (near) zero norm")
    # already-unit targets (e.g. straight from an encoder) are kept bit-for-bit
    return t if abs(norm - 1.0) <= 1e-12 else t / norm


def _feature_match(Pp: np.ndarray, encoder: ToyEncoder, target: np.ndarray):
    Pp = np.asarray(Pp, dtype=np.float64)
    n, u, norm = encoder.forward(Pp)
    diff = n - target
    # equals 1 - <n, t> for unit vectors, and is exactly 0 when n == t bitwise
    loss = 0.5 * float(diff @ diff)
    return loss, encoder.backward(Pp, u, norm, diff)


def invert_loss(Pp, ids, obj: ObjectiveInstance):
    """``1 - cos(f(Pp), target)`` and its gradient."""
    return _feature_match(Pp, obj.encoder, obj.target_feature)


def distill_loss(Pp, ids, obj: ObjectiveInstance):
    """Feature match against the encoding of a (typically longer) target prompt."""
    return _feature_match(Pp, obj.encoder, obj.target_feature)


def classify_loss(Pp, ids, batch, obj: ObjectiveInstance):
    """Mean cross-entropy over ``batch`` (indices into ``obj.task``; None = all).

    The same prompt rows are broadcast to every example. Repeated indices are
    folded into weights, so a batch of copies of one example evaluates exactly
    like that example alone.
    """
    task = obj.task
    Pp = np.asarray(Pp, dtype=np.float64)
    idx = np.arange(len(task)) if batch is None else np.asarray(batch, dtype=np.int64).ravel()
    if idx.size == 0:
        raise EmptyBatch("classification batch is empty")
    uniq, counts = np.unique(idx, return_counts=True)
    w = counts / idx.size
    M, d = Pp.shape
    pbar = Pp.mean(axis=0)
    z = task.U[:, :d] @ pbar + task.pooled[uniq] @ task.U[:, d:].T
    h = np.tanh(z)
    logits = h @ task.C.T
    lse = logsumexp(logits, axis=1)
    y = task.labels[uniq]
    rows = np.arange(uniq.size)
    losses = lse - logits[rows, y]
    loss = float(w @ losses)
    probs = np.exp(logits - lse[:, None])
    probs[rows, y] -= 1.0
    dz = (probs @ task.C) * (1.0 - h * h)
    d_pbar = (w @ dz) @ task.U[:, :d]
    return loss, np.broadcast_to(d_pbar / M, (M, d)).copy()


def fluency_loss(Pp, ids, lm: BigramLM):
    """Mean next-token NLL of ``ids`` with contexts taken from ``Pp`` (row i predicts i+1)."""
    Pp = np.asarray(Pp, dtype=np.float64)
    ids = as_ids(ids)
    M = Pp.shape[0]
    E = lm.table.matrix
    ctx = np.vstack([lm.s[None, :], Pp[:-1]])
    hidden = ctx @ lm.A.T
    logits = hidden @ E.T
    lse = logsumexp(logits, axis=1)
    rows = np.arange(M)
    loss = float(np.mean(lse - logits[rows, ids]))
    probs = np.exp(logits - lse[:, None])
    probs[rows, ids] -= 1.0
    d_ctx = ((probs / M) @ E) @ lm.A
    grad = np.zeros_like(Pp)
    grad[:-1] = d_ctx[1:]
    return loss, grad


def combined_loss(Pp, ids, obj: ObjectiveInstance, batch=None):
    """``(1 - lam) * task + lam * fluency``; the endpoints return one component untouched."""
    lam = obj.lam
    if lam == 0.0:
        return obj.task_loss(Pp, ids, batch)
    if obj.lm is None:
        raise MissingFluencyModel(f"fluency weight {lam} requires a language model")
    if lam == 1.0:
        return fluency_loss(Pp, ids, obj.lm)
    task, g_task = obj.task_loss(Pp, ids, batch)
    flu, g_flu = fluency_loss(Pp, ids, obj.lm)
    return (1.0 - lam) * task + lam * flu, (1.0 - lam) * g_task + lam * g_flu


def quadratic_objective(P):
    """``|P|^2 / 2``; its gradient is ``P``. Used to sanity-check the checker."""
    P = np.asarray(P, dtype=np.float64)
    return 0.5 * float(np.sum(P * P)), P.copy()


class QuadraticObjective:
    """``|Pp - center|^2 / 2`` with the objective-instance call signature.

    Convex with an off-lattice minimizer; used to exercise the optimizers.
    """

    kind = "quadratic"
    lam = 0.0
    lm = None

    def __init__(self, center):
        self.center = np.asarray(center, dtype=np.float64)

    def __call__(self, Pp, ids, batch=None):
        diff = np.asarray(Pp, dtype=np.float64) - self.center
        return 0.5 * float(np.sum(diff * diff)), diff

    def hard_loss(self, ids, table: EmbeddingTable, batch=None) -> float:
        ids = as_ids(ids)
        return self(table.matrix[ids], ids, batch)[0]


def finite_diff_check(obj: ObjectiveInstance | Callable, P, h: float = 1e-6, ids=None, batch=None) -> float:
    """Max entrywise relative error between the analytic and central-difference gradients.

    ``obj`` is either an :class:`ObjectiveInstance` (evaluated with fixed ``ids``)
    or a callable ``P -> (loss, grad)``.
    """
    P = np.array(P, dtype=np.float64)
    if isinstance(obj, ObjectiveInstance):
        if ids is None:
            ids = np.zeros(P.shape[0], dtype=np.int64)
        fixed_ids = as_ids(ids)

        def fn(X):
            return obj(X, fixed_ids, batch)
    else:
        fn = obj
    _, grad = fn(P)
    numeric = np.empty_like(P)
    for idx in np.ndindex(P.shape):
        orig = P[idx]
        P[idx] = orig + h
        f_plus = fn(P)[0]
        P[idx] = orig - h
        f_minus = fn(P)[0]
        P[idx] = orig
        numeric[idx] = (f_plus - f_minus) / (2.0 * h)
    denom = np.maximum(np.maximum(np.abs(grad), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(grad - numeric) / denom))
