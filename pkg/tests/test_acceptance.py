"""Acceptance suite: each test checks one criterion at its stated tolerance
and records a single PASS/FAIL line (shown in the terminal summary)."""

import json
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

import pezlab
from pezlab import _kernels
from pezlab.cli import dispatch
from pezlab.embedding import EmbeddingTable, PromptState, gen_table, sample_init
from pezlab.harness import (
    ExperimentConfig,
    evaluate_reference,
    make_distill_task,
    make_invert_task,
    paired_bootstrap_ci,
    read_report,
    run_matrix,
)
from pezlab.objective import ObjectiveInstance, ToyEncoder, gen_bigram, gen_encoder
from pezlab.optimize import (
    OptimizerConfig,
    exhaustive_search,
    langevin_step,
    run_autoprompt_sgd,
    run_fluentprompt,
    run_pez,
    run_soft,
    sgd_step,
)
from pezlab.project import ProjectionConfig, nearest_ids, project_bruteforce

pytestmark = pytest.mark.acceptance

CONFIGS = Path(pezlab.__file__).parent / "configs"
N_SEEDS = 50


def load_cfg(name: str, **changes) -> ExperimentConfig:
    cfg = ExperimentConfig.from_dict(json.loads((CONFIGS / name).read_text()))
    return replace(cfg, output=None, **changes)


# 1 ---------------------------------------------------------------------------


def test_c01_gradient_certification(verdict, capsys):
    t0 = time.perf_counter()
    code = dispatch(["check-grads", "--instances", "100", "--h", "1e-6", "--tol", "1e-4"])
    elapsed = time.perf_counter() - t0
    table = capsys.readouterr().out.strip().replace("\n", "; ")
    verdict(1, code == 0 and elapsed < 30, f"{table}; {elapsed:.1f}s")


# 2 ---------------------------------------------------------------------------


def projection_cases(metric, n=1000, seed=0):
    rng = np.random.default_rng(seed)
    for i in range(n):
        V, d = int(rng.integers(2, 40)), int(rng.integers(1, 6))
        E = rng.normal(size=(V, d))
        if i % 3 == 0:  # duplicated rows force exact ties
            E[rng.integers(0, V, size=V // 2)] = E[0]
        if i % 7 == 0:
            E = np.round(E)  # lattice rows give many equidistant queries
            E[np.all(E == 0, axis=1)] = 1.0
        table = EmbeddingTable(tuple(f"t{j}" for j in range(V)), E)
        mask = None
        if i % 2 == 0:
            mask = rng.random(V) < 0.5
            mask[rng.integers(0, V)] = True
        cfg = ProjectionConfig(metric, mask)
        Q = rng.normal(size=(4, d))
        Q[0] = E[rng.integers(0, V)]
        if i % 5 == 0:
            Q[1] = np.round(Q[1])
            if not Q[1].any():
                Q[1, 0] = 1.0
        yield Q, table, cfg


def test_c02_projection_equals_bruteforce(verdict):
    backends = ["numpy"] + (["numba"] if _kernels.HAVE_NUMBA else [])
    mismatches, total = 0, 0
    for metric in ("euclidean", "cosine"):
        for Q, table, cfg in projection_cases(metric):
            expected = project_bruteforce(Q, table, cfg)
            for backend in backends:
                total += 1
                mismatches += nearest_ids(Q, table, cfg, backend=backend).tolist() != expected
    verdict(2, mismatches == 0,
            f"{mismatches} mismatches over {total} batches (2 metrics x 1000 cases x {backends})")


# 3 ---------------------------------------------------------------------------


def test_c03_reduction_identities(verdict):
    failures = []
    for seed in range(10):
        table = gen_table(32, 8, seed)
        obj = ObjectiveInstance("invert", gen_encoder(8, 8, seed), target_feature=np.random.default_rng(seed).normal(size=8),
                                lm=gen_bigram(table, seed))
        opt = OptimizerConfig(method="sgd", gamma=0.5, T=200, seed=seed)
        a = run_fluentprompt(obj, table, 4, opt, eval_every=20)
        b = run_autoprompt_sgd(obj, table, 4, opt, eval_every=20)
        if (a.loss_trace, a.checkpoints, a.final_tokens) != (b.loss_trace, b.checkpoints, b.final_tokens):
            failures.append(f"fluent/autoprompt seed {seed}")
        adam = replace(opt, method="adamw", gamma=0.1)
        c = run_pez(obj, table, 4, adam, eval_every=20, identity_projection=True)
        s = run_soft(obj, table, 4, adam, eval_every=20)
        if (c.loss_trace, c.checkpoints, c.continuous_loss) != (s.loss_trace, s.checkpoints, s.continuous_loss):
            failures.append(f"pez-identity/soft seed {seed}")
        g = np.random.default_rng(seed).normal(size=(4, 8))
        x, y = PromptState.from_matrix(g * 3), PromptState.from_matrix(g * 3)
        rng = np.random.default_rng(seed)
        before = rng.bit_generator.state
        langevin_step(x, g, 0.2, 0.0, rng)
        sgd_step(y, g, 0.2)
        if not np.array_equal(x.P, y.P) or rng.bit_generator.state != before:
            failures.append(f"langevin/sgd seed {seed}")
    verdict(3, not failures, "bitwise over 10 seeds x 3 identities" + (f"; broken: {failures}" if failures else ""))


# 4 ---------------------------------------------------------------------------


def test_c04_oracle_optimality_tiny(verdict):
    t0 = time.perf_counter()
    exact = close = 0
    for seed in range(N_SEEDS):
        task = make_invert_task(16, 8, 8, 2, seed)
        _, best = exhaustive_search(task.objective, task.table, 2)
        res = run_pez(task.objective, task.table, 2, OptimizerConfig(method="adamw", gamma=0.1, T=500, seed=seed))
        exact += abs(res.final_loss - best) <= 1e-9
        close += res.final_loss <= best + 0.1 * abs(best) + 1e-9
    elapsed = time.perf_counter() - t0
    ok = exact >= 0.6 * N_SEEDS and close >= 0.9 * N_SEEDS and elapsed < 120
    verdict(4, ok, f"exact {exact}/{N_SEEDS} (need 30), within 10% {close}/{N_SEEDS} (need 45), {elapsed:.1f}s")


# 5 ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def bench_report():
    t0 = time.perf_counter()
    report = run_matrix(load_cfg("bench.json"))
    return report, time.perf_counter() - t0


def test_c05_method_ordering(verdict, bench_report):
    report, elapsed = bench_report
    loss = {m: np.array([r.hard_loss for r in report.select(m, 8)]) for m in ("pez", "autoprompt_sgd", "soft")}
    ap_lo, ap_hi = paired_bootstrap_ci(loss["pez"] - loss["autoprompt_sgd"])
    soft_lo, soft_hi = paired_bootstrap_ci(loss["pez"] - loss["soft"])
    n = min(len(v) for v in loss.values())
    ok = n == 100 and ap_hi <= 0 and soft_hi < 0 and elapsed < 600
    verdict(5, ok, f"means pez {loss['pez'].mean():.4f} autoprompt {loss['autoprompt_sgd'].mean():.4f} "
                   f"soft {loss['soft'].mean():.4f}; CI pez-ap [{ap_lo:.4f}, {ap_hi:.4f}] "
                   f"pez-soft [{soft_lo:.4f}, {soft_hi:.4f}]; {elapsed:.1f}s")


# 6 ---------------------------------------------------------------------------


def test_c06_stagnation(verdict):
    # token a sits 0.05 from token b; the target points at b
    table = EmbeddingTable(("a", "b", "w", "s"),
                           np.array([[1.0, 0.0], [1.0, 0.05], [-1.0, 0.0], [0.0, -1.0]]))
    target = table.matrix[1] / np.linalg.norm(table.matrix[1])
    obj = ObjectiveInstance("invert", ToyEncoder(np.eye(2), [1.0]), target_feature=target)
    init = PromptState.from_matrix(table.matrix[[0]])
    start = obj.hard_loss([0], table)
    ap = run_autoprompt_sgd(obj, table, 1, OptimizerConfig(method="sgd", gamma=1e-4, T=1000), eval_every=1, init=init)
    pez = run_pez(obj, table, 1, OptimizerConfig(method="adamw", gamma=1e-4, T=1000), eval_every=1, init=init)
    ap_frozen = all(ids == (0,) for _, ids, _ in ap.checkpoints) and ap.final_tokens.token_ids == (0,)
    pez_moved = any(ids != (0,) for _, ids, _ in pez.checkpoints)
    ok = ap_frozen and pez_moved and pez.final_loss < start
    verdict(6, ok, f"autoprompt frozen={ap_frozen}; pez moved={pez_moved}, hard loss {start:.3g} -> {pez.final_loss:.3g}")


# 7 ---------------------------------------------------------------------------


def test_c07_length_ablation(verdict):
    report = run_matrix(load_cfg("length_sweep.json"))
    Ms = (1, 2, 4, 8)
    monotone = 0
    means = {M: np.mean([r.train_loss for r in report.select("pez", M)]) for M in Ms}
    for seed in range(N_SEEDS):
        by_M = {r.M: r.train_loss for r in report.rows if r.seed == seed}
        monotone += all(by_M[a] >= by_M[b] for a, b in zip(Ms, Ms[1:]))
    ok = monotone >= 0.9 * N_SEEDS
    mean_txt = ", ".join(f"M={M}: {v:.3f}" for M, v in means.items())
    verdict(7, ok, f"non-increasing in {monotone}/{N_SEEDS} seeds (need 45); mean train loss {mean_txt}")


# 8 ---------------------------------------------------------------------------


def test_c08_distillation(verdict):
    passed = 0
    for seed in range(N_SEEDS):
        task = make_distill_task(64, 16, 16, 8, seed)
        res = run_pez(task.objective, task.table, 4, OptimizerConfig(T=1000, seed=seed))
        sim = evaluate_reference(res.final_tokens, task.reference, task.ground_truth, task.table)
        rng = np.random.default_rng(seed + 10_000)
        rand = np.array([evaluate_reference(rng.integers(0, 64, size=4), task.reference, task.ground_truth, task.table)
                         for _ in range(1000)])
        passed += sim >= rand.mean() + 3 * rand.std(ddof=1)
    verdict(8, passed >= 0.9 * N_SEEDS, f"distilled prompt beats random by 3 SD in {passed}/{N_SEEDS} seeds (need 45)")


# 9 ---------------------------------------------------------------------------


def test_c09_restricted_projection(verdict):
    mask_violations = loss_violations = 0
    for seed in range(N_SEEDS):
        task = make_invert_task(16, 8, 8, 2, seed)
        best, _ = exhaustive_search(task.objective, task.table, 2)
        proj = ProjectionConfig.banning(task.table, set(best.token_ids))
        opt = OptimizerConfig(T=500, seed=seed)
        free = run_pez(task.objective, task.table, 2, opt, eval_every=10)
        banned = run_pez(task.objective, task.table, 2, opt, proj, eval_every=10)
        emitted = [ids for _, ids, _ in banned.checkpoints] + [banned.final_tokens.token_ids]
        mask_violations += sum(not proj.allowed[i] for ids in emitted for i in ids)
        loss_violations += banned.final_loss < free.final_loss
    ok = mask_violations == 0 and loss_violations == 0
    verdict(9, ok, f"mask violations {mask_violations}; seeds where the banned run beat the free run "
                   f"{loss_violations}/{N_SEEDS}")


# 10 --------------------------------------------------------------------------


def test_c10_determinism(verdict, tmp_path, capsys):
    outs = []
    for name, jobs in (("a", 1), ("b", 1), ("c", 4)):
        out = tmp_path / f"{name}.csv"
        code = dispatch(["compare", "--config", str(CONFIGS / "bench.json"), "--jobs", str(jobs), "--out", str(out)])
        assert code == 0
        outs.append(out.read_bytes())
    capsys.readouterr()
    same = outs[0] == outs[1] == outs[2]
    verdict(10, same, f"3 runs of the shipped benchmark (jobs 1, 1, 4) byte-identical={same}, {len(outs[0])} bytes")


# 11 --------------------------------------------------------------------------


def test_c11_cli_pipeline(verdict, tmp_path, capsys):
    vocab = tmp_path / "vocab.emb1"
    raw = json.loads((CONFIGS / "tiny.json").read_text())
    raw["task"]["vocab"] = "vocab.emb1"
    cfg = tmp_path / "tiny.json"
    cfg.write_text(json.dumps(raw))
    codes = [dispatch(["gen-vocab", "--V", "16", "--d", "8", "--seed", "7", "--out", str(vocab)]),
             dispatch(["invert", "--config", str(cfg), "--out", str(tmp_path / "invert.csv")]),
             dispatch(["oracle", "--config", str(cfg), "--out", str(tmp_path / "oracle.csv")])]
    capsys.readouterr()
    inv = read_report(tmp_path / "invert.csv").rows[0].hard_loss
    orc = read_report(tmp_path / "oracle.csv").rows[0].hard_loss
    ok = codes == [0, 0, 0] and inv >= orc
    verdict(11, ok, f"exit codes {codes}; invert hard loss {inv:.6g} >= oracle {orc:.6g}")
