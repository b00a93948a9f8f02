"""``pezlab`` command-line entry point.

Exit codes: 0 success, 1 invocation/config error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from .embedding import gen_table, save_table
from .errors import ConfigError, InvalidDims, PezlabError
from .harness import (
    CSV_HEADER,
    EvalReport,
    ExperimentConfig,
    build_task,
    certify_gradients,
    run_cell,
    run_matrix,
    summarize,
    write_report,
)

log = logging.getLogger("pezlab")

SUBCOMMANDS = ("gen-vocab", "invert", "distill", "classify", "compare", "oracle", "check-grads")
GRAD_TOL = 1e-4


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pezlab", description="Discrete prompt optimization over embedding tables.")
    p.add_argument("--verbose", "-v", action="store_true", help="progress on stderr")
    sub = p.add_subparsers(dest="command", metavar="SUBCOMMAND", parser_class=_Parser)
    common = _Parser(add_help=False)
    common.add_argument("--verbose", "-v", action="store_true", default=argparse.SUPPRESS)

    g = sub.add_parser("gen-vocab", parents=[common], help="write a synthetic EMB1 vocabulary")
    g.add_argument("--V", type=int, required=True)
    g.add_argument("--d", type=int, required=True)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--out", required=True, help="path of the .emb1 file; tokens go next to it")

    for name in ("invert", "distill", "classify", "oracle", "compare"):
        s = sub.add_parser(name, parents=[common])
        s.add_argument("--config", required=True, help="JSON config (schema 1)")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted-key override, e.g. opt.gamma=0.1")
        s.add_argument("--seed", type=int, default=None)
        s.add_argument("--banned", default=None, help="file of token strings to exclude, one per line")
        s.add_argument("--out", default=None, help="CSV output path")
        if name == "compare":
            s.add_argument("--jobs", type=int, default=1)

    c = sub.add_parser("check-grads", parents=[common], help="certify analytic gradients against finite differences")
    c.add_argument("--instances", type=int, default=100)
    c.add_argument("--h", type=float, default=1e-6)
    c.add_argument("--tol", type=float, default=GRAD_TOL)
    c.add_argument("--seed", type=int, default=None)
    return p


def _coerce(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw: dict, pairs: list[str]) -> dict:
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {pair!r} is not KEY=VALUE")
        node = raw
        *parents, leaf = key.split(".")
        for part in parents:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-object")
        node[leaf] = _coerce(value)
    return raw


def _env_seed() -> int | None:
    value = os.environ.get("PEZLAB_SEED")
    if value is None or value.strip() == "":
        return None
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"PEZLAB_SEED must be an integer, got {value!r}") from None


def load_config(args) -> ExperimentConfig:
    try:
        raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {args.config}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {args.config} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    raw = apply_overrides(raw, args.set)
    if args.banned:
        try:
            lines = Path(args.banned).read_text(encoding="utf-8").split("\n")
        except OSError as exc:
            raise ConfigError(f"cannot read banned-token file: {exc}") from None
        raw.setdefault("proj", {})["banned"] = [t for t in lines if t]
    task = raw.get("task", {})
    if isinstance(task.get("vocab"), str) and not Path(task["vocab"]).is_absolute():
        task["vocab"] = str((Path(args.config).parent / task["vocab"]).resolve())
    cfg = ExperimentConfig.from_dict(raw)
    if args.command == "compare":
        if args.seed is not None:
            cfg = replace(cfg, opt=replace(cfg.opt, seed=args.seed))
        return cfg
    seed = args.seed
    if seed is None and "seed" not in raw:
        seed = _env_seed()
    if seed is None:
        seed = int(raw.get("seed", 0))
    kind = cfg.task if args.command == "oracle" else args.command
    method = "oracle" if args.command == "oracle" else cfg.methods[0]
    return replace(cfg, task=kind, methods=(method,), seeds=(seed,), Ms=(cfg.Ms[0],))


def _single(args, cfg: ExperimentConfig) -> int:
    method, seed, M = cfg.methods[0], cfg.seeds[0], cfg.Ms[0]
    log.info("running %s on %s task, seed=%d, M=%d, T=%d", method, cfg.task, seed, M, cfg.opt.T)
    cell = run_cell(cfg, method, seed, M)
    out = args.out or cfg.output or f"{args.command}.csv"
    write_report(EvalReport([cell], summarize([cell])), out)
    if cell.error:
        print(f"error: {cell.error}", file=sys.stderr)
        return 2
    table = build_task(cfg, seed).table
    print(" ".join(table.tokens[i] for i in cell.tokens))
    print(out)
    log.info("hard loss %.6g", cell.hard_loss)
    return 0


def _compare(args, cfg: ExperimentConfig) -> int:
    out = args.out or cfg.output or "compare.csv"
    log.info("compare: %d cells, jobs=%d", len(cfg.methods) * len(cfg.seeds) * len(cfg.Ms), args.jobs)
    report = run_matrix(cfg, jobs=max(1, args.jobs), output=out)
    failed = sum(1 for r in report.rows if r.error)
    if failed:
        log.warning("%d cells recorded errors", failed)
    for s in report.summary:
        log.info("%-16s M=%-3d n=%-4d hard_loss=%.4g", s.method, s.M, s.n, s.hard_loss_mean or float("nan"))
    print(out)
    return 0


def _gen_vocab(args) -> int:
    seed = args.seed if args.seed is not None else _env_seed()
    try:
        table = gen_table(args.V, args.d, 0 if seed is None else seed)
    except InvalidDims as exc:
        raise ConfigError(str(exc)) from None
    save_table(table, args.out)
    print(args.out)
    print(Path(args.out).with_suffix(".tokens"))
    return 0


def _check_grads(args) -> int:
    seed = args.seed if args.seed is not None else (_env_seed() or 0)
    worst = certify_gradients(args.instances, h=args.h, seed=seed)
    failed = False
    for kind, err in worst.items():
        ok = err < args.tol
        failed |= not ok
        print(f"{kind:9s} max_rel_err={err:.3e} {'PASS' if ok else 'FAIL'}")
    return 2 if failed else 0


def _setup_logging(verbose: bool) -> None:
    for h in [h for h in log.handlers if getattr(h, "_pezlab", False)]:
        log.removeHandler(h)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    handler._pezlab = True
    log.addHandler(handler)
    log.setLevel(logging.INFO if verbose else logging.WARNING)
    log.propagate = False


def dispatch(argv: list[str] | None = None) -> int:
    try:
        args = _parser().parse_args(argv)
        if args.command is None:
            raise UsageError(f"missing subcommand; choose from {', '.join(SUBCOMMANDS)}")
        _setup_logging(args.verbose)
        if args.command == "gen-vocab":
            return _gen_vocab(args)
        if args.command == "check-grads":
            return _check_grads(args)
        cfg = load_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except PezlabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        if args.command == "compare":
            return _compare(args, cfg)
        return _single(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch())


__all__ = ["dispatch", "main", "apply_overrides", "CSV_HEADER"]


if __name__ == "__main__":
    main()
