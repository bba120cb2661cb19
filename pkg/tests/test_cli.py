import json
import re
import subprocess
import sys
import time
from pathlib import Path

import pytest

from segtad.cli import main
from segtad.config import ConfigError, load_config

REPO = Path(__file__).resolve().parents[1]
ERROR_LINE = re.compile(r'^segtad-error kind=\w+ msg=".*"$')

SMALL = [
    "--set", "ssn.C_in=4", "--set", "ssn.D=2", "--set", "ssn.T=32", "--set", "ssn.L=2",
    "--set", "ssn.C_hidden=6", "--set", "ssn.dilations=[1,2]", "--set", "ssn.K_s=3",
    "--set", "pdn.eta=4", "--set", "pdn.m0=4", "--set", "pdn.k=2",
]  # fmt: skip


def run_cli(*args, env=None):
    return subprocess.run([sys.executable, "-m", "segtad.cli", *map(str, args)], capture_output=True, text=True, env=env)


def gen_small(root: Path, n=2):
    spec = ["n_videos=%d" % n, "C=4", "D=2", "T=32", "min_len=4", "max_len=10"]
    assert main(["gen-data", "--out", str(root), *sum((["--set", s] for s in spec), [])]) == 0


def test_gradcheck_tiny_config_exits_zero():
    proc = run_cli("gradcheck", "--trials", "2")
    assert proc.returncode == 0, proc.stderr
    assert "checks passed" in proc.stdout and "FAIL" not in proc.stdout


def test_gradcheck_failure_exits_nonzero(monkeypatch, capsys):
    import segtad.cli as cli
    from segtad.gradcheck import GradResult

    monkeypatch.setattr(cli, "run_suite", lambda *a, **k: [GradResult("relu[0]", 1e-9, 0.0), GradResult("conv1d[0]", 3e-3, 0.0)])
    assert main(["gradcheck"]) == 1
    err = capsys.readouterr().err.strip()
    assert ERROR_LINE.match(err) and "kind=CliError" in err


def test_eval_annotations_against_themselves(tmp_path, capsys):
    gen_small(tmp_path / "data")
    ann = tmp_path / "data" / "annotations.json"
    assert main(["eval", "--predictions", str(ann), "--data", str(tmp_path / "data"), "--out", str(tmp_path / "r.json")]) == 0
    assert "average mAP 1.0000" in capsys.readouterr().out
    assert json.loads((tmp_path / "r.json").read_text())["average_mAP"] == 1.0


def test_pipeline_smoke(tmp_path, capsys):
    t0 = time.perf_counter()
    data, run = tmp_path / "data", tmp_path / "run"
    gen_small(data)
    assert main(["train", "--data", str(data), "--run", str(run), *SMALL, "--set", "train.epochs=2"]) == 0
    assert (run / "checkpoints" / "last.stad").exists() and (run / "loss_log.csv").exists()
    # infer picks up the run's stored config
    assert main(["infer", "--data", str(data), "--run", str(run), "--dump-scores", str(tmp_path / "s.npz")]) == 0
    preds = json.loads((run / "predictions.json").read_text())
    assert set(preds["results"]) == {"video_000", "video_001"}
    assert main(["eval", "--predictions", str(run / "predictions.json"), "--data", str(data)]) == 0
    report = json.loads((run / "report.json").read_text())
    assert 0.0 <= report["average_mAP"] <= 1.0
    assert "average mAP" in capsys.readouterr().out
    assert time.perf_counter() - t0 < 300


@pytest.mark.parametrize(
    "args,kind",
    [
        (["train", "--data", "/nonexistent", "--run", "/tmp/x"], None),
        (["eval", "--predictions", "/nonexistent.json", "--annotations", "/nonexistent.json"], None),
        (["gen-data", "--out", "/tmp/x", "--set", "bogus=1"], "CliError"),
        (["gen-data", "--out", "/tmp/x", "--set", "T=30", "--set", "min_len=20", "--set", "max_actions=3"], "ValueError"),
        (["train", "--data", "d"], "UsageError"),
        (["frobnicate"], "UsageError"),
        (["eval", "--predictions", "p.json"], "UsageError"),
    ],
)
def test_failures_print_one_parsable_line(args, kind):
    proc = run_cli(*args)
    assert proc.returncode != 0
    lines = proc.stderr.strip().splitlines()
    assert len(lines) == 1 and ERROR_LINE.match(lines[0]), proc.stderr
    if kind:
        assert f"kind={kind} " in lines[0]
    json.loads(lines[0].split(" msg=", 1)[1])


def test_mismatched_channels_are_reported(tmp_path, capsys):
    gen_small(tmp_path / "data")
    assert main(["train", "--data", str(tmp_path / "data"), "--run", str(tmp_path / "run")]) == 1
    assert "C_in" in capsys.readouterr().err


@pytest.mark.parametrize("path", sorted(p.relative_to(REPO) for p in (REPO / "configs").rglob("*.json")), ids=str)
def test_shipped_configs_load(path):
    cfg = load_config(REPO / path)
    if "ablations" in path.parts:
        base = load_config(REPO / "configs" / json.loads((REPO / path).read_text())["extends"].split("/")[-1])
        assert cfg.to_dict() != base.to_dict()


def test_config_extends_cycle_and_bad_json(tmp_path):
    (tmp_path / "a.json").write_text('{"extends": "b.json"}')
    (tmp_path / "b.json").write_text('{"extends": "a.json"}')
    with pytest.raises(ConfigError, match="extends itself"):
        load_config(tmp_path / "a.json")
    (tmp_path / "c.json").write_text("{nope")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "c.json")


def test_env_seed_overrides_config(tmp_path, monkeypatch):
    (tmp_path / "c.json").write_text('{"train": {"seed": 5}}')
    assert load_config(tmp_path / "c.json").train.seed == 5
    monkeypatch.setenv("SEGTAD_SEED", "42")
    assert load_config(tmp_path / "c.json", ["train.seed=7"]).train.seed == 42
