"""Optimizer steps, the four prompt-optimization loops, and the exhaustive oracle."""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .embedding import EmbeddingTable, HardPrompt, PromptState, sample_init
from .errors import (
    ConfigError,
    DegenerateEncoding,
    MissingFluencyModel,
    NonFiniteGrad,
    NonFiniteLoss,
    SearchSpaceTooLarge,
    ShapeMismatch,
)
from .objective import ObjectiveInstance
from .project import DEFAULT_PROJECTION, ProjectionConfig, nearest_ids

SEARCH_LIMIT = 10**7
SCHEDULES = ("constant", "linear_decay_to_zero")


@dataclass(frozen=True)
class OptimizerConfig:
    method: str = "adamw"
    gamma: float = 0.1
    T: int = 3000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    langevin_beta: float = 0.0
    schedule: str = "constant"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.method not in ("sgd", "adamw"):
            raise ConfigError(f"optimizer method must be 'sgd' or 'adamw', got {self.method!r}")
        if not self.gamma > 0:
            raise ConfigError(f"learning rate must be > 0, got {self.gamma}")
        if int(self.T) != self.T or self.T < 1:
            raise ConfigError(f"step count must be a positive integer, got {self.T}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if not self.eps > 0:
            raise ConfigError("eps must be > 0")
        if self.weight_decay < 0 or self.langevin_beta < 0:
            raise ConfigError("weight_decay and langevin_beta must be >= 0")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")

    def beta_at(self, i: int) -> float:
        """Langevin temperature for the 0-based step ``i``."""
        if self.schedule == "constant":
            return self.langevin_beta
        if self.T == 1:
            return 0.0
        return self.langevin_beta * (self.T - 1 - i) / (self.T - 1)


@dataclass
class RunResult:
    method: str
    final_tokens: HardPrompt
    best_tokens: HardPrompt
    loss_trace: list[tuple[int, float]]
    best_metric: float
    seed: int
    wall_ms: float
    final_loss: float
    checkpoints: list[tuple[int, tuple[int, ...], float]] = field(default_factory=list)
    continuous_loss: float | None = None


def _check_grad(state: PromptState, grad: np.ndarray) -> None:
    if grad.shape != state.P.shape:
        raise ShapeMismatch(f"gradient shape {grad.shape} != prompt shape {state.P.shape}")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGrad("gradient contains NaN or inf")


def sgd_step(state: PromptState, grad: np.ndarray, gamma: float) -> None:
    _check_grad(state, grad)
    state.P = state.P - gamma * grad
    state.step += 1


def adamw_step(state: PromptState, grad: np.ndarray, cfg: OptimizerConfig) -> None:
    """Adam with decoupled weight decay and bias correction."""
    _check_grad(state, grad)
    state.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    state.m = b1 * state.m + (1.0 - b1) * grad
    state.v = b2 * state.v + (1.0 - b2) * grad * grad
    m_hat = state.m / (1.0 - b1 ** state.step)
    v_hat = state.v / (1.0 - b2 ** state.step)
    P = state.P
    if cfg.weight_decay:
        P = P * (1.0 - cfg.gamma * cfg.weight_decay)
    state.P = P - cfg.gamma * (m_hat / (np.sqrt(v_hat) + cfg.eps))


def langevin_step(state: PromptState, grad: np.ndarray, gamma: float, beta: float, rng) -> None:
    """SGD step plus N(0, 2 * gamma * beta) noise; draws nothing when beta == 0."""
    if beta < 0:
        raise ValueError(f"Langevin temperature must be >= 0, got {beta}")
    if beta == 0:
        sgd_step(state, grad, gamma)
        return
    _check_grad(state, grad)
    z = rng.standard_normal(state.P.shape)
    state.P = state.P - gamma * grad + np.sqrt(2.0 * gamma * beta) * z
    state.step += 1


def _loop(name, obj, table, M, opt, proj, eval_every, *, at_projection, reproject, stepper,
          validate, init, batch) -> RunResult:
    if eval_every < 1:
        raise ConfigError(f"eval_every must be >= 1, got {eval_every}")
    t0 = time.perf_counter()
    rng = np.random.default_rng(opt.seed)
    state = init.copy() if init is not None else sample_init(table, M, rng)
    E = table.matrix
    if validate is None:
        def validate(ids):
            return -obj.hard_loss(ids, table, batch)

    trace: list[tuple[int, float]] = []
    checkpoints = []
    best_metric, best_ids = -np.inf, None
    for t in range(1, opt.T + 1):
        ids = nearest_ids(state.P, table, proj)
        Pp = E[ids] if at_projection else state.P
        loss, grad = obj(Pp, ids, batch)
        if not np.isfinite(loss):
            raise NonFiniteLoss(f"{name}: non-finite loss {loss} at step {t}; recent trace {trace[-5:]}")
        trace.append((t, loss))
        stepper(state, grad, t - 1, rng)
        if reproject:
            state.P = E[nearest_ids(state.P, table, proj)]
        if t % eval_every == 0 or t == opt.T:
            ck = nearest_ids(state.P, table, proj)
            metric = float(validate(ck))
            checkpoints.append((t, tuple(int(i) for i in ck), metric))
            if metric > best_metric or best_ids is None:
                best_metric, best_ids = metric, ck

    final = nearest_ids(state.P, table, proj)
    continuous = None if at_projection else float(obj(state.P, final, batch)[0])
    return RunResult(
        method=name,
        final_tokens=HardPrompt(tuple(final), table),
        best_tokens=HardPrompt(tuple(best_ids), table),
        loss_trace=trace,
        best_metric=best_metric,
        seed=opt.seed,
        wall_ms=(time.perf_counter() - t0) * 1e3,
        final_loss=obj.hard_loss(final, table, batch),
        checkpoints=checkpoints,
        continuous_loss=continuous,
    )


def _configured_stepper(opt: OptimizerConfig):
    if opt.method == "adamw":
        return lambda state, g, i, rng: adamw_step(state, g, opt)
    return lambda state, g, i, rng: sgd_step(state, g, opt.gamma)


def run_pez(obj: ObjectiveInstance, table: EmbeddingTable, M: int, opt: OptimizerConfig,
            proj: ProjectionConfig = DEFAULT_PROJECTION, eval_every: int = 100, *,
            validate: Callable | None = None, init: PromptState | None = None, batch=None,
            identity_projection: bool = False) -> RunResult:
    """Projected-gradient search: gradients taken at the projected prompt,
    applied to the continuous iterate, one final projection.

    ``identity_projection`` evaluates gradients at the continuous iterate
    instead (a test hook; it reduces the loop to :func:`run_soft`).
    """
    return _loop("pez", obj, table, M, opt, proj, eval_every,
                 at_projection=not identity_projection, reproject=False,
                 stepper=_configured_stepper(opt), validate=validate, init=init, batch=batch)


def run_soft(obj: ObjectiveInstance, table: EmbeddingTable, M: int, opt: OptimizerConfig,
             eval_every: int = 100, *, proj: ProjectionConfig = DEFAULT_PROJECTION,
             validate: Callable | None = None, init: PromptState | None = None, batch=None) -> RunResult:
    """Unconstrained soft-prompt training, projected to tokens only at the end."""
    return _loop("soft", obj, table, M, opt, proj, eval_every,
                 at_projection=False, reproject=False,
                 stepper=_configured_stepper(opt), validate=validate, init=init, batch=batch)


def run_autoprompt_sgd(obj: ObjectiveInstance, table: EmbeddingTable, M: int, opt: OptimizerConfig,
                       proj: ProjectionConfig = DEFAULT_PROJECTION, eval_every: int = 100, *,
                       validate: Callable | None = None, init: PromptState | None = None,
                       batch=None) -> RunResult:
    """Plain SGD with re-projection onto the vocabulary after every step."""
    return _loop("autoprompt_sgd", obj, table, M, opt, proj, eval_every,
                 at_projection=True, reproject=True,
                 stepper=lambda state, g, i, rng: sgd_step(state, g, opt.gamma),
                 validate=validate, init=_on_lattice(init, table, proj), batch=batch)


def run_fluentprompt(obj: ObjectiveInstance, table: EmbeddingTable, M: int, opt: OptimizerConfig,
                     proj: ProjectionConfig = DEFAULT_PROJECTION, eval_every: int = 100, *,
                     validate: Callable | None = None, init: PromptState | None = None,
                     batch=None) -> RunResult:
    """Langevin SGD with re-projection every step, on the fluency-weighted loss."""
    if obj.lam > 0 and obj.lm is None:
        raise MissingFluencyModel(f"fluentprompt with fluency weight {obj.lam} needs a language model")
    return _loop("fluentprompt", obj, table, M, opt, proj, eval_every,
                 at_projection=True, reproject=True,
                 stepper=lambda state, g, i, rng: langevin_step(state, g, opt.gamma, opt.beta_at(i), rng),
                 validate=validate, init=_on_lattice(init, table, proj), batch=batch)


def _on_lattice(init: PromptState | None, table: EmbeddingTable, proj: ProjectionConfig):
    if init is None:
        return None
    snapped = init.copy()
    snapped.P = table.matrix[nearest_ids(init.P, table, proj)]
    return snapped


METHODS = {
    "pez": run_pez,
    "autoprompt_sgd": run_autoprompt_sgd,
    "fluentprompt": run_fluentprompt,
}


def run_method(method: str, obj, table, M, opt, proj=DEFAULT_PROJECTION, eval_every=100, **kw) -> RunResult:
    """Dispatch by method name (``pez``, ``autoprompt_sgd``, ``fluentprompt``, ``soft``)."""
    if method == "soft":
        return run_soft(obj, table, M, opt, eval_every, proj=proj, **kw)
    try:
        runner = METHODS[method]
    except KeyError:
        raise ConfigError(f"unknown method {method!r}") from None
    return runner(obj, table, M, opt, proj, eval_every, **kw)


def exhaustive_search(obj: ObjectiveInstance, table: EmbeddingTable, M: int,
                      proj_mask: np.ndarray | None = None, batch=None) -> tuple[HardPrompt, float]:
    """Global minimizer of the hard loss over every allowed token tuple.

    Ties go to the lexicographically smallest tuple.
    """
    allowed = np.arange(table.V) if proj_mask is None else np.flatnonzero(np.asarray(proj_mask, dtype=bool))
    if allowed.size == 0:
        raise SearchSpaceTooLarge("mask allows no tokens")
    A = allowed.size
    if A ** M > SEARCH_LIMIT:
        raise SearchSpaceTooLarge(f"{A}^{M} tuples exceeds the limit of {SEARCH_LIMIT}")
    if obj.kind in ("invert", "distill") and obj.lam == 0.0:
        candidates = _feature_candidates(obj, table, M, allowed)
    else:
        candidates = itertools.product(allowed.tolist(), repeat=M)
    best, best_loss = None, np.inf
    for tup in candidates:
        try:
            loss = obj.hard_loss(np.asarray(tup, dtype=np.int64), table, batch)
        except DegenerateEncoding:
            continue
        if loss < best_loss:
            best, best_loss = tuple(tup), loss
    if best is None:
        raise DegenerateEncoding("every allowed tuple encodes to a zero vector")
    return HardPrompt(best, table), float(best_loss)


def _feature_candidates(obj: ObjectiveInstance, table: EmbeddingTable, M: int, allowed: np.ndarray,
                        chunk: int = 1 << 16, slack: float = 1e-9) -> list[tuple[int, ...]]:
    """Vectorized pre-screen: tuples whose batched loss is within ``slack`` of the minimum,
    in lexicographic order, for exact re-scoring."""
    enc = obj.encoder
    feats = table.matrix[allowed] @ enc.W.T
    A = allowed.size
    total = A ** M
    powers = A ** np.arange(M - 1, -1, -1)
    losses = np.empty(total)
    for lo in range(0, total, chunk):
        flat = np.arange(lo, min(lo + chunk, total))
        digits = (flat[:, None] // powers[None, :]) % A
        u = np.einsum("m,bmf->bf", enc.omega[:M], feats[digits])
        norm = np.sqrt(np.einsum("bf,bf->b", u, u))
        cos = (u @ obj.target_feature) / np.where(norm > 0, norm, np.inf)
        losses[lo:lo + len(flat)] = 1.0 - cos
    keep = np.flatnonzero(losses <= losses.min() + slack)
    digits = (keep[:, None] // powers[None, :]) % A
    return [tuple(int(i) for i in allowed[row]) for row in digits]
