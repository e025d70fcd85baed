"""Command-line interface: argument handling, file outputs, exit codes."""

import json
import subprocess
import sys

import numpy as np
import pytest

from qgnas.cli import build_parser, main
from qgnas.graphdata import save_dataset
from qgnas.harness import ExperimentRecord
from qgnas.quant import QUANT_PAIRS
from qgnas.supernet import ArchChoice, Choices, quant_site_names


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    rng = np.random.default_rng(1)
    n, f, c = 40, 12, 3
    edges = np.stack([rng.integers(0, n, 90), rng.integers(0, n, 90)], axis=1)
    feats = (rng.random((n, f)) < 0.3).astype(float)
    labels = rng.integers(0, c, n)
    root = tmp_path_factory.mktemp("data")
    return save_dataset(root, "tiny", n, f, c, edges, feats, labels)


QUICK_SEARCH = ["--epochs", "3", "--arch-start", "1", "--quant-start", "1",
                "--inner-steps", "1", "--final-epochs", "4"]


def run_cli(args, capsys):
    code = main(args)
    out = capsys.readouterr()
    return code, out.out, out.err


class TestParser:
    def test_all_subcommands_exist(self):
        parser = build_parser()
        for cmd in ("search", "baseline", "gridsearch", "sweep", "stats",
                    "convert-dataset", "eval"):
            assert cmd in parser.format_help()

    def test_missing_subcommand_is_a_usage_error(self):
        with pytest.raises(SystemExit) as e:
            build_parser().parse_args([])
        assert e.value.code == 2

    def test_stats_requires_at_least_one_record(self):
        with pytest.raises(SystemExit) as e:
            build_parser().parse_args(["stats"])
        assert e.value.code == 2

    def test_comma_lists(self):
        args = build_parser().parse_args(
            ["sweep", "--layers", "1,2", "--channels", "8", "--betas", "0,0.1"])
        assert args.layers == [1, 2]
        assert args.channels == [8]
        assert args.betas == [0.0, 0.1]


class TestSearchCommand:
    def test_writes_record_checkpoint_and_log(self, dataset_dir, tmp_path,
                                              capsys):
        out = tmp_path / "run"
        code, stdout, _ = run_cli(
            ["search", "--dataset", str(dataset_dir), "--layers", "1",
             "--channels", "4", "--out", str(out), *QUICK_SEARCH], capsys)
        assert code == 0
        payload = json.loads(stdout)
        assert payload["config"]["epochs"] == 3
        assert (out / "record.json").exists()
        assert (out / "checkpoint.npz").exists()
        log_rows = [json.loads(l) for l in
                    (out / "search.jsonl").read_text().splitlines()]
        assert len(log_rows) == 4  # three epochs plus the final summary row
        assert "arch_names" in log_rows[0]
        record = ExperimentRecord.load(out / "record.json")
        assert record.to_json() == {k: payload[k] for k in record.to_json()}

    def test_config_file_overrides_defaults_and_flags_win(self, dataset_dir,
                                                          tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"epochs": 3, "arch_start": 1,
                                   "quant_start": 1, "inner_steps": 1,
                                   "lr": 0.01}))
        code, stdout, _ = run_cli(
            ["search", "--dataset", str(dataset_dir), "--layers", "1",
             "--channels", "4", "--config", str(cfg), "--lr", "0.02",
             "--final-epochs", "3", "--out", str(tmp_path / "r")], capsys)
        assert code == 0
        payload = json.loads(stdout)
        assert payload["config"]["epochs"] == 3  # from the file
        assert payload["config"]["lr"] == 0.02  # flag beats file

    def test_unknown_config_key_fails(self, dataset_dir, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"epoch": 3}))
        code, _, stderr = run_cli(
            ["search", "--dataset", str(dataset_dir), "--config", str(cfg)],
            capsys)
        assert code == 1
        assert "unknown config keys" in stderr

    def test_unknown_dataset_fails_nonzero(self, capsys, monkeypatch):
        monkeypatch.delenv("QGNAS_DATA", raising=False)
        code, _, stderr = run_cli(["search", "--dataset", "nope"], capsys)
        assert code == 1
        assert "error:" in stderr


class TestBaselineCommand:
    def test_trains_and_records(self, dataset_dir, tmp_path, capsys):
        out = tmp_path / "b"
        code, stdout, _ = run_cli(
            ["baseline", "--model", "graphsage", "--dataset", str(dataset_dir),
             "--quant", "w4a8", "--epochs", "3", "--out", str(out)], capsys)
        assert code == 0
        payload = json.loads(stdout)
        assert payload["config"]["quantisation"] == "w4a8"
        assert (out / "record.json").exists()
        assert (out / "checkpoint.npz").exists()

    def test_unknown_model_is_a_usage_error(self):
        with pytest.raises(SystemExit) as e:
            build_parser().parse_args(["baseline", "--model", "mlp"])
        assert e.value.code == 2


class TestEvalCommand:
    def test_round_trips_a_checkpoint(self, dataset_dir, tmp_path, capsys):
        out = tmp_path / "b"
        code, stdout, _ = run_cli(
            ["baseline", "--model", "graphsage", "--dataset", str(dataset_dir),
             "--quant", "w8a8", "--epochs", "3", "--out", str(out)], capsys)
        assert code == 0
        trained = json.loads(stdout)
        code, stdout, _ = run_cli(
            ["eval", "--checkpoint", str(out / "checkpoint.npz"),
             "--dataset", str(dataset_dir)], capsys)
        assert code == 0
        evaluated = json.loads(stdout)
        assert evaluated["accuracy"] == trained["accuracy"]
        assert evaluated["model_bytes"] == trained["model_bytes"]

    def test_missing_checkpoint_fails(self, dataset_dir, capsys):
        code, _, stderr = run_cli(
            ["eval", "--checkpoint", "/no/such.npz",
             "--dataset", str(dataset_dir)], capsys)
        assert code == 1
        assert "error:" in stderr


class TestSweepCommand:
    def test_merged_outputs(self, dataset_dir, tmp_path, capsys):
        out = tmp_path / "sw"
        code, stdout, _ = run_cli(
            ["sweep", "--dataset", str(dataset_dir), "--layers", "1",
             "--channels", "4,8", "--betas", "0.1", "--workers", "0",
             "--out", str(out), *QUICK_SEARCH], capsys)
        assert code == 0
        summary = json.loads(stdout)
        assert len(summary["rows"]) == 2
        assert (out / "results.csv").exists()
        assert (out / "frontier.csv").exists()
        assert len(list(out.glob("point-*.json"))) == 2


class TestGridsearchCommand:
    def test_emits_trace_and_choice(self, dataset_dir, tmp_path, capsys):
        out = tmp_path / "g"
        code, stdout, _ = run_cli(
            ["gridsearch", "--model", "graphsage", "--dataset",
             str(dataset_dir), "--epochs", "2", "--out", str(out)], capsys)
        assert code == 0
        report = json.loads(stdout)
        assert 1 <= len(report["trace"]) <= 17
        assert (out / "gridsearch.json").exists()


class TestStatsCommand:
    def test_reads_records_and_writes_reports(self, tmp_path, capsys):
        sites = quant_site_names(1)
        for i, row in enumerate((6, 6, 10)):
            rec = ExperimentRecord(
                dataset="unit", config={"layers": 1, "channels": 8},
                choices=Choices((ArchChoice(),), ((0,),),
                                {s: QUANT_PAIRS[row] for s in sites}),
                accuracy=0.5, model_bytes=10 + i, buffer_bytes=100,
                seconds=0.1, seed=i)
            rec.save(tmp_path / f"r{i}.json")
        code, stdout, stderr = run_cli(
            ["stats", *(str(tmp_path / f"r{i}.json") for i in range(3)),
             "--out", str(tmp_path / "stats.json"),
             "--csv", str(tmp_path / "stats.csv")], capsys)
        assert code == 0
        stats = json.loads(stdout)
        assert stats["records"] == 3
        assert stats["modal"]["weight_bits"] == 4
        assert "modal weight bits" in stderr
        assert json.loads((tmp_path / "stats.json").read_text()) == stats
        assert (tmp_path / "stats.csv").read_text().startswith(
            "category,kind,bits,count")

    def test_corrupt_record_fails_nonzero(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text("{}")
        code, _, stderr = run_cli(["stats", str(bad)], capsys)
        assert code == 1
        assert "error:" in stderr


class TestConvertDatasetCommand:
    def test_converts_raw_citation_files(self, tmp_path, capsys):
        content = tmp_path / "raw.content"
        cites = tmp_path / "raw.cites"
        content.write_text(
            "a\t1\t0\t0\tx\n"
            "b\t0\t1\t0\ty\n"
            "c\t0\t0\t1\tx\n"
            "d\t1\t1\t0\ty\n")
        cites.write_text("a\tb\nb\tc\nc\td\nz\ta\n")  # z is outside the corpus
        code, stdout, _ = run_cli(
            ["convert-dataset", "--content", str(content), "--cites",
             str(cites), "--out-root", str(tmp_path), "--name", "mini"],
            capsys)
        assert code == 0
        written = json.loads(stdout)["written"]
        meta = json.loads((tmp_path / "mini" / "meta.json").read_text())
        assert meta == {"n": 4, "f": 3, "c": 2, "labels": "single",
                        "sparse_features": True}
        assert written == str(tmp_path / "mini")

    def test_missing_input_fails(self, tmp_path, capsys):
        code, _, stderr = run_cli(
            ["convert-dataset", "--content", "/no/file", "--cites", "/no/file",
             "--out-root", str(tmp_path), "--name", "x"], capsys)
        assert code == 1
        assert "error:" in stderr


def test_console_entry_point_runs():
    proc = subprocess.run([sys.executable, "-m", "qgnas.cli", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert "search" in proc.stdout
