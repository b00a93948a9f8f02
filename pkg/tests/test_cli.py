import json
import subprocess
import sys
from pathlib import Path

import pytest

import pezlab
from pezlab.cli import apply_overrides, dispatch
from pezlab.embedding import load_table
from pezlab.errors import ConfigError
from pezlab.harness import read_report

CONFIGS = Path(pezlab.__file__).parent / "configs"


def tiny(tmp_path, **extra):
    raw = json.loads((CONFIGS / "tiny.json").read_text())
    raw.update(extra)
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(raw))
    return path


def run(capsys, *argv):
    code = dispatch([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_gen_vocab(tmp_path, capsys):
    out = tmp_path / "vocab.emb1"
    code, stdout, _ = run(capsys, "gen-vocab", "--V", 64, "--d", 16, "--seed", 7, "--out", out)
    assert code == 0
    assert out.exists() and (tmp_path / "vocab.tokens").exists()
    table = load_table(out)
    assert (table.V, table.d) == (64, 16)
    assert stdout.split() == [str(out), str(tmp_path / "vocab.tokens")]


def test_gen_vocab_bad_dims(tmp_path, capsys):
    code, _, err = run(capsys, "gen-vocab", "--V", 0, "--d", 16, "--out", tmp_path / "v.emb1")
    assert code == 1 and "config error" in err


@pytest.mark.parametrize("argv", [[], ["frobnicate"], ["invert"], ["invert", "--config", "missing.json"],
                                  ["gen-vocab", "--V", "x", "--d", "2", "--out", "v"]])
def test_usage_errors_exit_1(argv, capsys):
    assert dispatch(argv) == 1


def test_bad_config_exit_1(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run(capsys, "invert", "--config", bad)[0] == 1
    bad.write_text(json.dumps({"schema": 1, "typo": 3}))
    assert run(capsys, "invert", "--config", bad)[0] == 1
    assert run(capsys, "invert", "--config", tiny(tmp_path), "--set", "opt.gamma")[0] == 1


def test_invert_prints_tokens_and_path(tmp_path, capsys):
    out = tmp_path / "inv.csv"
    code, stdout, _ = run(capsys, "invert", "--config", tiny(tmp_path), "--out", out)
    assert code == 0
    tokens, path = stdout.strip().split("\n")
    assert len(tokens.split()) == 2 and path == str(out)
    (row,) = read_report(out).rows
    assert row.method == "pez" and row.M == 2 and not row.error


def test_runtime_error_exits_2(tmp_path, capsys):
    cfg = tiny(tmp_path, M=7)
    code, _, err = run(capsys, "oracle", "--config", cfg, "--out", tmp_path / "o.csv")
    assert code == 2 and "SearchSpaceTooLarge" in err
    assert read_report(tmp_path / "o.csv").rows[0].error


def test_override_wins_over_file(tmp_path, capsys):
    out = tmp_path / "o.csv"
    run(capsys, "invert", "--config", tiny(tmp_path), "--set", "opt.T=7", "--out", out)
    assert read_report(out).rows[0].steps == 7


def test_apply_overrides():
    raw = apply_overrides({"opt": {"gamma": 0.1}}, ["opt.gamma=0.5", "task.kind=distill", "M=[1,2]"])
    assert raw == {"opt": {"gamma": 0.5}, "task": {"kind": "distill"}, "M": [1, 2]}
    with pytest.raises(ConfigError):
        apply_overrides({"opt": 3}, ["opt.gamma=1"])


def test_seed_priority(tmp_path, capsys, monkeypatch):
    no_seed = json.loads((CONFIGS / "tiny.json").read_text())
    del no_seed["seed"]
    cfg = tmp_path / "noseed.json"
    cfg.write_text(json.dumps(no_seed))
    monkeypatch.setenv("PEZLAB_SEED", "5")
    run(capsys, "invert", "--config", cfg, "--out", tmp_path / "env.csv")
    assert read_report(tmp_path / "env.csv").rows[0].seed == 5
    run(capsys, "invert", "--config", cfg, "--seed", 9, "--out", tmp_path / "flag.csv")
    assert read_report(tmp_path / "flag.csv").rows[0].seed == 9
    run(capsys, "invert", "--config", tiny(tmp_path, seed=3), "--out", tmp_path / "file.csv")
    assert read_report(tmp_path / "file.csv").rows[0].seed == 3
    monkeypatch.setenv("PEZLAB_SEED", "five")
    assert run(capsys, "invert", "--config", cfg)[0] == 1


def test_banned_file(tmp_path, capsys):
    out = tmp_path / "o.csv"
    code, stdout, _ = run(capsys, "oracle", "--config", tiny(tmp_path), "--out", out)
    assert code == 0
    best = stdout.split("\n")[0].split()
    banned = tmp_path / "banned.txt"
    banned.write_text("\n".join(best) + "\n")
    code, stdout, _ = run(capsys, "invert", "--config", tiny(tmp_path), "--banned", banned, "--out", out)
    assert code == 0
    assert not set(stdout.split("\n")[0].split()) & set(best)
    code, stdout, _ = run(capsys, "oracle", "--config", tiny(tmp_path), "--banned", banned, "--out", out)
    assert not set(stdout.split("\n")[0].split()) & set(best)


def test_distill_and_classify(tmp_path, capsys):
    code, stdout, _ = run(capsys, "distill", "--config", CONFIGS / "distill.json", "--set", "opt.T=50",
                          "--out", tmp_path / "d.csv")
    assert code == 0 and len(stdout.split("\n")[0].split()) == 4
    code, stdout, _ = run(capsys, "classify", "--config", CONFIGS / "fewshot.json", "--set", "opt.T=50",
                          "--out", tmp_path / "c.csv")
    assert code == 0 and len(stdout.split("\n")[0].split()) == 3


def test_compare_writes_matrix(tmp_path, capsys):
    out = tmp_path / "cmp.csv"
    code, stdout, _ = run(capsys, "compare", "--config", CONFIGS / "bench.json", "--set", "seeds=2",
                          "--set", "opt.T=30", "--out", out)
    assert code == 0 and stdout.strip() == str(out)
    assert len(read_report(out).rows) == 6


def test_relative_vocab_path(tmp_path, capsys):
    run(capsys, "gen-vocab", "--V", 16, "--d", 8, "--seed", 1, "--out", tmp_path / "v.emb1")
    cfg = tiny(tmp_path, task={"kind": "invert", "vocab": "v.emb1", "d_f": 8, "M_target": 2})
    assert run(capsys, "invert", "--config", cfg, "--out", tmp_path / "o.csv")[0] == 0


def test_verbose_logs_to_stderr(tmp_path, capsys):
    code, _, err = run(capsys, "invert", "--config", tiny(tmp_path), "--set", "opt.T=5", "--verbose",
                       "--out", tmp_path / "o.csv")
    assert code == 0 and "running pez" in err


def test_check_grads(capsys):
    code, stdout, _ = run(capsys, "check-grads", "--instances", 10)
    assert code == 0
    assert len(stdout.strip().split("\n")) == 5 and "FAIL" not in stdout
    code, stdout, _ = run(capsys, "check-grads", "--instances", 3, "--tol", 1e-15)
    assert code == 2 and "FAIL" in stdout


def test_console_script(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "pezlab.cli", "gen-vocab", "--V", "8", "--d", "4",
                           "--out", str(tmp_path / "v.emb1")], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    proc = subprocess.run([sys.executable, "-m", "pezlab.cli", "nope"], capture_output=True, text=True)
    assert proc.returncode == 1
