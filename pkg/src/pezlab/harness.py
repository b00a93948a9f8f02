"""Synthetic tasks, reference-encoder scoring, and seeded method-comparison matrices."""

from __future__ import annotations

import csv
import hashlib
import io
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .embedding import EmbeddingTable, HardPrompt, as_ids, gen_table, load_table
from .errors import ConfigError, DegenerateEncoding, InvalidDims, MalformedCsv, SearchSpaceTooLarge
from .objective import (
    ClassifyTask,
    ObjectiveInstance,
    ToyEncoder,
    gen_bigram,
    gen_encoder,
)
from .optimize import SEARCH_LIMIT, OptimizerConfig, exhaustive_search, run_method
from .project import ProjectionConfig

CSV_HEADER = ("method", "seed", "M", "train_loss", "hard_loss", "ref_sim", "oracle_gap",
              "best_metric", "steps", "wall_ms", "error")
SUMMARY_TAG = "#SUMMARY"
SUMMARY_HEADER = (SUMMARY_TAG, "method", "M", "n", "train_loss_mean", "train_loss_se",
                  "hard_loss_mean", "hard_loss_se", "ref_sim_mean", "ref_sim_se",
                  "best_metric_mean", "best_metric_se")
ALL_METHODS = ("pez", "autoprompt_sgd", "fluentprompt", "soft", "oracle")
TASK_KINDS = ("invert", "distill", "classify")

N_INPUT_TOKENS = 4
HIDDEN = 16
VALIDATION_PER_CLASS = 200


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from an arbitrary tuple of ints and strings."""
    digest = hashlib.blake2b(repr(parts).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


# ---------------------------------------------------------------- tasks


class InversionTask(NamedTuple):
    table: EmbeddingTable
    objective: ObjectiveInstance
    reference: ToyEncoder
    ground_truth: HardPrompt


class FewShotTask(NamedTuple):
    table: EmbeddingTable
    objective: ObjectiveInstance
    holdout: ClassifyTask
    validation: ClassifyTask
    teacher: HardPrompt


def _check_dims(V, d, d_f, M_target):
    if V < 2 or d < 1 or d_f < 1 or M_target < 1:
        raise InvalidDims(f"invalid task dims V={V}, d={d}, d_f={d_f}, M_target={M_target}")


def _planted(V, d, d_f, M_target, seed, table):
    _check_dims(V, d, d_f, M_target)
    if table is None:
        table = gen_table(V, d, derive_seed(seed, "table"))
    elif table.V != V or table.d != d:
        raise InvalidDims(f"table is {table.V}x{table.d}, task asks for {V}x{d}")
    max_len = max(64, M_target)
    encoder = gen_encoder(d, d_f, derive_seed(seed, "encoder"), max_len)
    reference = gen_encoder(d, 2 * d_f, derive_seed(seed, "reference"), max_len)
    rng = np.random.default_rng(derive_seed(seed, "planted"))
    truth = HardPrompt(tuple(rng.integers(0, V, size=M_target)), table)
    lm = gen_bigram(table, derive_seed(seed, "lm"))
    return table, encoder, reference, truth, lm


def make_invert_task(V: int, d: int, d_f: int, M_target: int, seed: int, *, lam: float = 0.0,
                     table: EmbeddingTable | None = None) -> InversionTask:
    """Inversion instance with a planted token tuple whose feature is the target.

    The reference encoder is independently seeded and twice as wide.
    """
    table, encoder, reference, truth, lm = _planted(V, d, d_f, M_target, seed, table)
    target = encoder(table.matrix[truth.as_array()])
    obj = ObjectiveInstance("invert", encoder, target_feature=target, lm=lm, lam=lam)
    return InversionTask(table, obj, reference, truth)


def make_distill_task(V: int, d: int, d_f: int, M_target: int, seed: int, *, lam: float = 0.0,
                      table: EmbeddingTable | None = None) -> InversionTask:
    """Distillation instance: the planted tuple is the long prompt to compress."""
    table, encoder, reference, truth, lm = _planted(V, d, d_f, M_target, seed, table)
    obj = ObjectiveInstance("distill", encoder, target_tokens=truth, lm=lm, lam=lam, table=table)
    return InversionTask(table, obj, reference, truth)


def make_fewshot_classify_task(V: int, d: int, L: int, k: int, seed: int, *, M_teacher: int = 3,
                               lam: float = 0.0, table: EmbeddingTable | None = None) -> FewShotTask:
    """Teacher-labeled classification with ``k`` train and ``k`` holdout examples per class
    plus a 200-per-class validation split; all splits are disjoint input sequences."""
    if k < 1 or L < 2 or V < 2 or d < 1:
        raise InvalidDims(f"invalid few-shot dims V={V}, d={d}, L={L}, k={k}")
    if table is None:
        table = gen_table(V, d, derive_seed(seed, "table"))
    need = 2 * k + VALIDATION_PER_CLASS
    if V ** N_INPUT_TOKENS < need * L * 2:
        raise InvalidDims(f"vocabulary too small for {need} distinct inputs per class")
    for attempt in range(100):
        rng = np.random.default_rng(derive_seed(seed, "classify", attempt))
        U = rng.normal(0.0, np.sqrt(2.0 / d), size=(HIDDEN, 2 * d))
        C = rng.normal(0.0, 1.0, size=(L, HIDDEN))
        teacher = rng.integers(0, V, size=M_teacher)
        pool = np.unique(rng.integers(0, V, size=(need * L * 8, N_INPUT_TOKENS)), axis=0)
        pool = pool[rng.permutation(len(pool))]
        probe = ClassifyTask(table.matrix[pool], np.zeros(len(pool), dtype=np.int64), U, C)
        labels = np.argmax(probe.logits(table.matrix[teacher]), axis=1)
        by_class = [np.flatnonzero(labels == c) for c in range(L)]
        if min(len(ix) for ix in by_class) >= need:
            break
    else:
        raise InvalidDims("could not draw a class-balanced teacher task; try another seed")
    train = np.concatenate([ix[:k] for ix in by_class])
    hold = np.concatenate([ix[k:2 * k] for ix in by_class])
    val = np.concatenate([ix[2 * k:need] for ix in by_class])

    def split(idx):
        return ClassifyTask(table.matrix[pool[idx]], labels[idx], U, C)

    obj = ObjectiveInstance("classify", task=split(train), lm=gen_bigram(table, derive_seed(seed, "lm")), lam=lam)
    return FewShotTask(table, obj, split(hold), split(val), HardPrompt(tuple(teacher), table))


def evaluate_reference(tokens, ref: ToyEncoder, target, table: EmbeddingTable) -> float:
    """Cosine similarity under the held-out encoder between a prompt and the target.

    ``target`` is either a token sequence or an already encoded feature vector.
    """
    a = ref(table.matrix[as_ids(tokens)])
    if isinstance(target, HardPrompt) or np.asarray(target).dtype.kind in "iu":
        b = ref(table.matrix[as_ids(target)])
    else:
        b = np.asarray(target, dtype=np.float64)
        b = b / np.sqrt(b @ b)
    return float(a @ b)


# ---------------------------------------------------------------- config


@dataclass(frozen=True)
class ExperimentConfig:
    task: str = "invert"
    V: int = 64
    d: int = 16
    d_f: int = 16
    M_target: int = 8
    Ms: tuple[int, ...] = (8,)
    methods: tuple[str, ...] = ("pez",)
    seeds: tuple[int, ...] = (0,)
    opt: OptimizerConfig = field(default_factory=OptimizerConfig)
    metric: str = "euclidean"
    banned: tuple[str, ...] = ()
    lam: float = 0.0
    L: int = 4
    k_shots: int = 2
    eval_every: int = 100
    output: str | None = None
    timing: bool = False
    vocab: str | None = None

    def __post_init__(self) -> None:
        if self.task not in TASK_KINDS:
            raise ConfigError(f"task kind must be one of {TASK_KINDS}, got {self.task!r}")
        if not self.methods or not self.seeds or not self.Ms:
            raise ConfigError("methods, seeds and M must all be nonempty")
        bad = [m for m in self.methods if m not in ALL_METHODS]
        if bad:
            raise ConfigError(f"unknown methods {bad}; choose from {ALL_METHODS}")
        if any(M < 1 for M in self.Ms):
            raise ConfigError(f"prompt lengths must be >= 1, got {self.Ms}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must be in [0, 1], got {self.lam}")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        """Parse the versioned JSON config layout (``"schema": 1``)."""
        if raw.get("schema") != 1:
            raise ConfigError(f"unsupported config schema {raw.get('schema')!r}; expected 1")
        known = {"schema", "task", "M", "methods", "method", "seeds", "seed", "opt", "proj",
                 "lambda", "eval_every", "output", "timing"}
        extra = set(raw) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        task = dict(raw.get("task", {}))
        proj = dict(raw.get("proj", {}))
        try:
            opt = OptimizerConfig(**raw.get("opt", {}))
        except TypeError as exc:
            raise ConfigError(f"bad opt section: {exc}") from None
        methods = raw.get("methods", [raw.get("method", "pez")])
        seeds = raw.get("seeds", [raw.get("seed", 0)])
        if isinstance(seeds, int):
            seeds = list(range(seeds))
        Ms = raw.get("M", task.get("M_target", 8))
        Ms = [Ms] if isinstance(Ms, int) else list(Ms)
        known_task = {"kind", "V", "d", "d_f", "M_target", "L", "k", "vocab"}
        if set(task) - known_task:
            raise ConfigError(f"unknown task keys: {sorted(set(task) - known_task)}")
        if set(proj) - {"metric", "banned"}:
            raise ConfigError(f"unknown proj keys: {sorted(set(proj) - {'metric', 'banned'})}")
        try:
            return cls(
                task=task.get("kind", "invert"),
                V=int(task.get("V", 64)),
                d=int(task.get("d", 16)),
                d_f=int(task.get("d_f", 16)),
                M_target=int(task.get("M_target", 8)),
                Ms=tuple(int(m) for m in Ms),
                methods=tuple(methods if isinstance(methods, list) else [methods]),
                seeds=tuple(int(s) for s in seeds),
                opt=opt,
                metric=proj.get("metric", "euclidean"),
                banned=tuple(proj.get("banned", ())),
                lam=float(raw.get("lambda", 0.0)),
                L=int(task.get("L", 4)),
                k_shots=int(task.get("k", 2)),
                eval_every=int(raw.get("eval_every", 100)),
                output=raw.get("output"),
                timing=bool(raw.get("timing", False)),
                vocab=task.get("vocab"),
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from None


# ---------------------------------------------------------------- report


@dataclass
class CellResult:
    method: str
    seed: int
    M: int
    train_loss: float | None = None
    hard_loss: float | None = None
    ref_sim: float | None = None
    oracle_gap: float | None = None
    best_metric: float | None = None
    steps: int | None = None
    wall_ms: float | None = None
    error: str = ""
    tokens: tuple[int, ...] = field(default=(), compare=False, repr=False)


@dataclass
class SummaryRow:
    method: str
    M: int
    n: int
    train_loss_mean: float | None
    train_loss_se: float | None
    hard_loss_mean: float | None
    hard_loss_se: float | None
    ref_sim_mean: float | None
    ref_sim_se: float | None
    best_metric_mean: float | None
    best_metric_se: float | None


@dataclass
class EvalReport:
    rows: list[CellResult]
    summary: list[SummaryRow]

    def select(self, method: str | None = None, M: int | None = None) -> list[CellResult]:
        return [r for r in self.rows
                if (method is None or r.method == method) and (M is None or r.M == M)]


def _mean_se(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    arr = np.asarray(vals, dtype=np.float64)
    mean = float(arr.mean())
    se = float(arr.std(ddof=1) / math.sqrt(arr.size)) if arr.size > 1 else None
    return mean, se


def summarize(rows: list[CellResult]) -> list[SummaryRow]:
    groups: dict[tuple[str, int], list[CellResult]] = {}
    for r in rows:
        if not r.error:
            groups.setdefault((r.method, r.M), []).append(r)
    out = []
    for (method, M), grp in groups.items():
        stats = []
        for name in ("train_loss", "hard_loss", "ref_sim", "best_metric"):
            stats.extend(_mean_se(getattr(r, name) for r in grp))
        out.append(SummaryRow(method, M, len(grp), *stats))
    return out


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    return format(float(x), ".17g")


def write_report(report: EvalReport, path: str | Path | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in report.rows:
        w.writerow([r.method, r.seed, r.M] + [_fmt(getattr(r, c)) for c in CSV_HEADER[3:10]]
                   + [r.error.replace("\n", " ")])
    w.writerow(SUMMARY_HEADER)
    for s in report.summary:
        w.writerow([SUMMARY_TAG, s.method, s.M, s.n]
                   + [_fmt(getattr(s, f.name)) for f in fields(SummaryRow)[3:]])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    return text


def _num(text: str, kind=float):
    if text == "":
        return None
    try:
        return kind(text)
    except ValueError:
        raise MalformedCsv(f"cannot parse {text!r} as {kind.__name__}") from None


def read_report(path: str | Path) -> EvalReport:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise MalformedCsv(f"cannot read {path}: {exc}") from exc
    if not text.endswith("\n"):
        raise MalformedCsv(f"{path}: truncated (no trailing newline)")
    lines = list(csv.reader(io.StringIO(text)))
    if not lines or tuple(lines[0]) != CSV_HEADER:
        raise MalformedCsv(f"{path}: bad or missing header")
    rows, summary, seen_summary = [], [], False
    for line in lines[1:]:
        if line and line[0] == SUMMARY_TAG:
            if tuple(line) == SUMMARY_HEADER:
                seen_summary = True
                continue
            if not seen_summary or len(line) != len(SUMMARY_HEADER):
                raise MalformedCsv(f"{path}: malformed summary line {line}")
            summary.append(SummaryRow(line[1], int(line[2]), int(line[3]),
                                      *[_num(x) for x in line[4:]]))
            continue
        if seen_summary or len(line) != len(CSV_HEADER):
            raise MalformedCsv(f"{path}: malformed data line {line}")
        rows.append(CellResult(
            line[0], int(line[1]), int(line[2]),
            *[_num(x) for x in line[3:8]],
            _num(line[8], int), _num(line[9]), line[10],
        ))
    if not seen_summary:
        raise MalformedCsv(f"{path}: missing {SUMMARY_TAG} block")
    if len(summary) != len(summarize(rows)):
        raise MalformedCsv(f"{path}: summary block does not match data rows")
    return EvalReport(rows, summary)


# ---------------------------------------------------------------- runs


def build_task(cfg: ExperimentConfig, seed: int):
    """Instance for one seed; shared by every method and prompt length."""
    inst = derive_seed(cfg.opt.seed, "instance", seed)
    table = load_table(cfg.vocab) if cfg.vocab else None
    V, d = (table.V, table.d) if table is not None else (cfg.V, cfg.d)
    if cfg.task == "invert":
        return make_invert_task(V, d, cfg.d_f, cfg.M_target, inst, lam=cfg.lam, table=table)
    if cfg.task == "distill":
        return make_distill_task(V, d, cfg.d_f, cfg.M_target, inst, lam=cfg.lam, table=table)
    return make_fewshot_classify_task(V, d, cfg.L, cfg.k_shots, inst, lam=cfg.lam, table=table)


def projection_for(cfg: ExperimentConfig, table: EmbeddingTable) -> ProjectionConfig:
    if cfg.banned:
        return ProjectionConfig.banning(table, cfg.banned, cfg.metric)
    return ProjectionConfig(cfg.metric)


def _validator(task):
    if isinstance(task, FewShotTask):
        return lambda ids: task.holdout.accuracy(task.table.matrix[ids])
    truth = task.ground_truth
    return lambda ids: evaluate_reference(ids, task.reference, truth, task.table)


def _oracle(task, M, proj):
    try:
        return exhaustive_search(task.objective, task.table, M, proj.allowed)
    except (SearchSpaceTooLarge, DegenerateEncoding):
        return None


def run_cell(cfg: ExperimentConfig, method: str, seed: int, M: int) -> CellResult:
    """One (method, seed, M) cell with its own hash-derived RNG stream.

    Failures are recorded in the ``error`` field instead of propagating.
    """
    t0 = time.perf_counter()
    cell = CellResult(method, seed, M)
    try:
        task = build_task(cfg, seed)
        proj = projection_for(cfg, task.table)
        validate = _validator(task)
        oracle = None
        if "oracle" in cfg.methods:
            allowed = proj.mask_for(task.table).sum()
            if allowed ** M <= SEARCH_LIMIT:
                oracle = _oracle(task, M, proj)
        if method == "oracle":
            if oracle is None:
                raise SearchSpaceTooLarge(f"exhaustive search infeasible for M={M}")
            tokens, loss = oracle
            cell.train_loss = cell.hard_loss = loss
            cell.best_metric = float(validate(tokens.as_array()))
            cell.steps = 0
            ids = tokens.as_array()
        else:
            opt = replace(cfg.opt, seed=derive_seed(cfg.opt.seed, method, seed, M))
            res = run_method(method, task.objective, task.table, M, opt, proj, cfg.eval_every,
                             validate=validate)
            ids = res.final_tokens.as_array()
            cell.hard_loss = res.final_loss
            cell.train_loss = res.continuous_loss if res.continuous_loss is not None else res.final_loss
            cell.best_metric = res.best_metric
            cell.steps = opt.T
        if isinstance(task, InversionTask):
            cell.ref_sim = evaluate_reference(ids, task.reference, task.ground_truth, task.table)
        if oracle is not None:
            cell.oracle_gap = cell.hard_loss - oracle[1]
        cell.tokens = tuple(int(i) for i in ids)
    except Exception as exc:  # noqa: BLE001 - contained per cell by design
        cell.error = f"{type(exc).__name__}: {exc}"
    if cfg.timing:
        cell.wall_ms = (time.perf_counter() - t0) * 1e3
    return cell


def cells(cfg: ExperimentConfig) -> list[tuple[str, int, int]]:
    return [(m, s, M) for m in cfg.methods for s in cfg.seeds for M in cfg.Ms]


def _run_cell_args(args):
    return run_cell(*args)


def run_matrix(cfg: ExperimentConfig, jobs: int = 1, output: str | Path | None = None) -> EvalReport:
    """Run every (method, seed, M) cell; rows come back in deterministic cell order."""
    grid = cells(cfg)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_run_cell_args, [(cfg, *c) for c in grid]))
    else:
        rows = [run_cell(cfg, *c) for c in grid]
    report = EvalReport(rows, summarize(rows))
    path = output if output is not None else cfg.output
    if path:
        write_report(report, path)
    return report


def paired_bootstrap_ci(diffs, n_resamples: int = 10000, confidence: float = 0.95, seed: int = 0):
    """Percentile bootstrap interval for the mean of paired differences."""
    from scipy.stats import bootstrap

    diffs = np.asarray(diffs, dtype=np.float64)
    res = bootstrap((diffs,), np.mean, n_resamples=n_resamples, confidence_level=confidence,
                    method="percentile", random_state=np.random.default_rng(seed))
    return float(res.confidence_interval.low), float(res.confidence_interval.high)


def config_dict(cfg: ExperimentConfig) -> dict:
    d = asdict(cfg)
    d["opt"] = asdict(cfg.opt)
    return d


# ---------------------------------------------------------------- gradient certification

GRADIENT_KINDS = ("invert", "distill", "classify", "fluency", "combined")


def certify_gradients(n_instances: int = 100, h: float = 1e-6, seed: int = 0,
                      V: int = 16, d: int = 6, d_f: int = 5, M: int = 3) -> dict[str, float]:
    """Worst finite-difference relative error per objective kind over seeded random instances."""
    from .objective import finite_diff_check, fluency_loss

    worst = dict.fromkeys(GRADIENT_KINDS, 0.0)
    for i in range(n_instances):
        rng = np.random.default_rng(derive_seed(seed, "grad-instance", i))
        table = gen_table(V, d, derive_seed(seed, "grad-table", i))
        enc = gen_encoder(d, d_f, derive_seed(seed, "grad-encoder", i), max_len=16)
        lm = gen_bigram(table, derive_seed(seed, "grad-lm", i))
        P = table.matrix[rng.integers(0, V, size=M)] + rng.normal(0.0, 0.3 / np.sqrt(d), size=(M, d))
        ids = rng.integers(0, V, size=M)
        target = rng.normal(size=d_f)
        inv = ObjectiveInstance("invert", enc, target_feature=target)
        dis = ObjectiveInstance("distill", enc, target_tokens=HardPrompt(tuple(rng.integers(0, V, size=2 * M)), table),
                                table=table)
        X = table.matrix[rng.integers(0, V, size=(6, N_INPUT_TOKENS))]
        y = rng.integers(0, 3, size=6)
        task = ClassifyTask(X, y, rng.normal(0.0, np.sqrt(2.0 / d), size=(HIDDEN, 2 * d)),
                            rng.normal(size=(3, HIDDEN)))
        cls = ObjectiveInstance("classify", task=task)
        comb = ObjectiveInstance("invert", enc, target_feature=target, lm=lm, lam=float(rng.uniform(0.05, 0.95)))
        errs = {
            "invert": finite_diff_check(inv, P, h, ids=ids),
            "distill": finite_diff_check(dis, P, h, ids=ids),
            "classify": finite_diff_check(cls, P, h, ids=ids),
            "fluency": finite_diff_check(lambda X, ids=ids, lm=lm: fluency_loss(X, ids, lm), P, h),
            "combined": finite_diff_check(comb, P, h, ids=ids),
        }
        for k, e in errs.items():
            worst[k] = max(worst[k], e)
    return worst
