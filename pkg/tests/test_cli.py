import csv
import subprocess
import sys

import pytest

from samba.cli import build_parser, main
from samba.config import dump_config, load_config

SUBCOMMANDS = {"train", "evaluate", "heatmap", "export-traces", "compare", "config"}


def test_subcommands_present():
    parser = build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    assert SUBCOMMANDS <= set(sub.choices)


def test_unknown_command_exits():
    with pytest.raises(SystemExit):
        main(["fly"])


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "cfg.yaml"
    assert main(["config", "--out", str(cfg_path)]) == 0
    cfg = load_config(cfg_path)
    cfg.runner.env_iterations, cfg.runner.control_iterations, cfg.runner.model_batch = 2, 1, 4
    cfg.agent.update_epochs = cfg.agent.value_epochs = 2
    cfg.agent.hidden = [8]
    dump_config(cfg, cfg_path)
    out = root / "run"
    assert main(["train", "--config", str(cfg_path), "--seed", "3", "--out", str(out), "--quiet"]) == 0
    return root, cfg_path, out


def test_train_outputs(run_dir):
    _, _, out = run_dir
    assert load_config(out / "config_effective.yaml").runner.seed == 3
    for name in ("policy.npz", "model.npz", "run_log.csv", "diagnostics.csv"):
        assert (out / name).exists()


def test_evaluate_heatmap_traces_compare(run_dir, capsys):
    root, cfg_path, out = run_dir
    assert main(["evaluate", "--policy", str(out / "policy.npz"), "--samples", "60", "--seeds", "0", "1",
                 "--out", str(out)]) == 0
    with open(out / "eval_report.csv", newline="") as fh:
        assert [r["seed"] for r in csv.DictReader(fh)] == ["0", "1", "all"]

    assert main(["heatmap", "--model", str(out / "model.npz"), "--metric", "entropy", "--resolution", "5",
                 "--out", str(root / "h.csv")]) == 0
    assert (root / "h.csv.meta.json").exists()

    assert main(["export-traces", "--model", str(out / "model.npz"), "--traces", "2", "--horizon", "3",
                 "--out", str(root / "t.csv")]) == 0
    with open(root / "t.csv", newline="") as fh:
        assert len(list(csv.DictReader(fh))) == 3 * 4

    (root / "empty").mkdir()
    assert main(["compare", str(out), str(root / "empty"), "--out", str(root / "cmp.csv")]) == 0
    assert "no evaluation report" in capsys.readouterr().err


def test_errors_return_nonzero(tmp_path, capsys):
    assert main(["evaluate", "--policy", str(tmp_path / "missing.npz"), "--out", str(tmp_path)]) == 2
    bad = tmp_path / "bad.yaml"
    bad.write_text("runner:\n  sed: 1\n")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "unknown config keys" in capsys.readouterr().err


def test_console_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "samba.cli", "config", "--out", str(tmp_path / "c.yaml")],
                         capture_output=True, text=True)
    assert res.returncode == 0 and (tmp_path / "c.yaml").exists()
