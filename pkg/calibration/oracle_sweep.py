"""Oracle sweep on the tiny inversion instance (V=16, d=8, d_f=8, M=2, 50 seeds).

For each optimizer variant, counts how often the final hard loss of the
projected-gradient run matches the exhaustive optimum exactly (1e-9) and
within 10% relative. Run once before fixing the tiny-scale thresholds:

    python calibration/oracle_sweep.py > calibration/oracle_sweep.txt
"""

from dataclasses import replace

from pezlab.harness import make_invert_task
from pezlab.optimize import OptimizerConfig, exhaustive_search, run_pez
from pezlab.project import ProjectionConfig

SEEDS = range(50)
BASE = OptimizerConfig(method="adamw", gamma=0.1, T=500)
VARIANTS = {
    "adamw g=0.1 T=500 (frozen setting)": (BASE, "euclidean", 8),
    "cosine projection": (BASE, "cosine", 8),
    "d_f=16": (BASE, "euclidean", 16),
    "sgd g=0.1": (replace(BASE, method="sgd"), "euclidean", 8),
    "weight_decay=0.1": (replace(BASE, weight_decay=0.1), "euclidean", 8),
    "weight_decay=1": (replace(BASE, weight_decay=1.0), "euclidean", 8),
    "T=3000": (replace(BASE, T=3000), "euclidean", 8),
    "g=0.01": (replace(BASE, gamma=0.01), "euclidean", 8),
}


def sweep(opt, metric, d_f):
    exact = close = 0
    for seed in SEEDS:
        task = make_invert_task(16, 8, d_f, 2, seed)
        _, best = exhaustive_search(task.objective, task.table, 2)
        res = run_pez(task.objective, task.table, 2, replace(opt, seed=seed), ProjectionConfig(metric))
        exact += abs(res.final_loss - best) <= 1e-9
        close += res.final_loss <= best + 0.1 * abs(best) + 1e-9
    return exact, close


def main():
    n = len(SEEDS)
    print(f"{'variant':40s} {'exact':>7s} {'within10%':>10s}")
    for name, (opt, metric, d_f) in VARIANTS.items():
        exact, close = sweep(opt, metric, d_f)
        print(f"{name:40s} {exact:>3d}/{n} {close:>6d}/{n}")


if __name__ == "__main__":
    main()
