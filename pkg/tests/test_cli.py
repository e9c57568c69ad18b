import hashlib
import json
from pathlib import Path

import pytest

from adaptsense.cli import main

TINY = {
    "dataset": {"n_episodes": 16, "T": 4, "seed": 5},
    "train": {"seed": 0, "epochs_stage1": 2, "epochs_stage2": 2, "epochs_stage3": 2,
              "batch_episodes": 4, "patience": 10},
}


def write_config(tmp_path, extra=None) -> Path:
    raw = json.loads(json.dumps(TINY))
    for key, value in (extra or {}).items():
        node = raw
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    path = tmp_path / "config.json"
    path.write_text(json.dumps(raw))
    return path


def tree_hash(root: Path) -> str:
    digest = hashlib.sha256()
    for path in sorted(root.rglob("*")):
        if path.is_file():
            digest.update(path.name.encode())
            digest.update(path.read_bytes())
    return digest.hexdigest()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One generated dataset plus one trained run, shared by the module."""
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root)
    assert main(["gen-data", "--config", str(cfg), "--out", str(root / "data")]) == 0
    assert main(["train", "--config", str(cfg), "--data", str(root / "data"),
                 "--out", str(root / "run")]) == 0
    return root, cfg


class TestGenData:
    def test_writes_episodes_and_manifest(self, workspace):
        root, _ = workspace
        manifest = json.loads((root / "data" / "manifest.json").read_text())
        assert manifest["format"] == "adaptsense.episode.v1"
        assert len(manifest["episodes"]) == 16
        assert len(list((root / "data").glob("*.bin"))) == 16 * 3

    def test_rerun_is_idempotent(self, workspace, tmp_path):
        root, cfg = workspace
        assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "d2")]) == 0
        assert tree_hash(root / "data") == tree_hash(tmp_path / "d2")

    def test_malformed_config_exits_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        code = main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "x")])
        assert code == 2
        assert capsys.readouterr().err.startswith("ERROR:")

    def test_env_seed_override(self, tmp_path, monkeypatch):
        cfg = write_config(tmp_path)
        monkeypatch.setenv("ADAPTSENSE_SEED", "77")
        assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 0
        manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
        assert manifest["config"]["seed"] == 77


class TestTrain:
    def test_run_directory_contents(self, workspace):
        root, _ = workspace
        for name in ("config.json", "metrics.csv", "report.json", "decisions.csv"):
            assert (root / "run" / name).exists()

    def test_stage3_without_checkpoints_refused(self, workspace, tmp_path, capsys):
        root, cfg = workspace
        code = main(["train", "--config", str(cfg), "--data", str(root / "data"),
                     "--out", str(tmp_path / "r3"), "--stages", "3"])
        assert code == 2
        assert "ERROR:" in capsys.readouterr().err

    def test_resume_equals_straight_through(self, workspace, tmp_path):
        root, cfg = workspace
        out = tmp_path / "staged"
        for stages in ("1", "2", "3"):
            args = ["train", "--config", str(cfg), "--data", str(root / "data"),
                    "--out", str(out), "--stages", stages]
            if stages != "1":
                args.append("--resume")
            assert main(args) == 0
        staged = json.loads((out / "report.json").read_text())
        full = json.loads((root / "run" / "report.json").read_text())
        assert staged["evals"] == full["evals"]

    def test_mismatched_dataset_config_rejected(self, workspace, tmp_path, capsys):
        root, _ = workspace
        other = write_config(tmp_path, {"dataset.seed": 99})
        code = main(["train", "--config", str(other), "--data", str(root / "data"),
                     "--out", str(tmp_path / "r")])
        assert code == 2


class TestEval:
    def test_oracle_policy_exact(self, workspace, capsys):
        root, _ = workspace
        assert main(["eval", "--run", str(root / "run"), "--data", str(root / "data"),
                     "--policy", "oracle"]) == 0
        report = json.loads((root / "run" / "evals" / "eval_oracle.json").read_text())
        assert report["accuracy"] == 1.0

    def test_unknown_policy_exits_2(self, workspace, capsys):
        root, _ = workspace
        code = main(["eval", "--run", str(root / "run"), "--data", str(root / "data"),
                     "--policy", "bogus"])
        assert code == 2
        assert capsys.readouterr().err.startswith("ERROR:")

    def test_snr_eval_writes_tagged_report(self, workspace):
        root, _ = workspace
        assert main(["eval", "--run", str(root / "run"), "--data", str(root / "data"),
                     "--policy", "learned", "--snr", "-10"]) == 0
        path = root / "run" / "evals" / "eval_learned_snr-10.json"
        assert path.exists()
        assert json.loads(path.read_text())["snr_db"] == -10.0

    def test_all_on_macs_match_graph(self, workspace):
        root, _ = workspace
        assert main(["eval", "--run", str(root / "run"), "--data", str(root / "data"),
                     "--policy", "all_on"]) == 0
        report = json.loads((root / "run" / "evals" / "eval_all_on.json").read_text())
        assert report["mean_macs_per_segment"] == report["all_on_macs_per_segment"]

    def test_decisions_csv_columns(self, workspace):
        root, _ = workspace
        main(["eval", "--run", str(root / "run"), "--data", str(root / "data"),
              "--policy", "learned"])
        header = (root / "run" / "evals" / "decisions_learned.csv").read_text().splitlines()[0]
        assert header == "episode,t,action,hard,p_select"


class TestAblate:
    def test_grid_produces_cartesian_rows(self, workspace, tmp_path):
        root, cfg = workspace
        grid = tmp_path / "grid.json"
        grid.write_text(json.dumps({"lam": [[0, 0, 0], [1, 0.05, 0.03]], "gamma": [0, 10]}))
        out = tmp_path / "abl"
        assert main(["ablate", "--config", str(cfg), "--grid", str(grid),
                     "--data", str(root / "data"), "--out", str(out)]) == 0
        rows = (out / "ablation.csv").read_text().splitlines()
        assert len(rows) == 5  # header + 4 grid points
        header = rows[0].split(",")
        for col in ("point", "lam", "gamma", "accuracy", "mean_macs", "usage_visual"):
            assert col in header
        import csv as csv_mod
        with (out / "ablation.csv").open() as fh:
            table = list(csv_mod.DictReader(fh))
        top = max(table, key=lambda r: float(r["mean_macs"]))
        assert top["lam"] == "[0, 0, 0]" and float(top["gamma"]) == 0.0

    def test_empty_grid_exits_2(self, workspace, tmp_path, capsys):
        root, cfg = workspace
        grid = tmp_path / "grid.json"
        grid.write_text(json.dumps({"gamma": []}))
        code = main(["ablate", "--config", str(cfg), "--grid", str(grid),
                     "--data", str(root / "data"), "--out", str(tmp_path / "a")])
        assert code == 2
        assert capsys.readouterr().err.startswith("ERROR:")


class TestReport:
    def test_run_summary_and_plots(self, workspace, tmp_path):
        root, _ = workspace
        main(["eval", "--run", str(root / "run"), "--data", str(root / "data"),
              "--policy", "learned", "--snr", "-10"])
        out = tmp_path / "rep"
        assert main(["report", "--run", str(root / "run"), "--out", str(out),
                     "--plots"]) == 0
        assert (out / "summary.md").exists()
        assert (out / "accuracy_vs_energy.png").exists()
        assert (out / "loss_curves.png").exists()
        assert (out / "usage_over_snr.png").exists()  # the snr eval above produced points

    def test_missing_inputs_exit_2(self, tmp_path, capsys):
        code = main(["report", "--run", str(tmp_path / "nothing")])
        assert code == 2
        assert capsys.readouterr().err.startswith("ERROR:")

    def test_report_is_read_only_over_run(self, workspace, tmp_path):
        root, _ = workspace
        before = tree_hash(root / "run" / "checkpoints")
        main(["report", "--run", str(root / "run"), "--out", str(tmp_path / "r2")])
        assert tree_hash(root / "run" / "checkpoints") == before
