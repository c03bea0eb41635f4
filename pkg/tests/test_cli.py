"""Command-line surface: routing, exit codes, config files, artifacts."""

import json
import subprocess
import sys

import numpy as np
import pytest

from debris_edge.cli import build_parser, cli_dispatch
from debris_edge.imaging import Image, pnm_load, pnm_save
from debris_edge.pubsub import BrokerClient


def run_cli(argv) -> int:
    return cli_dispatch(list(argv))


def blob_frame(i: int) -> Image:
    px = np.full((100, 120, 3), 55, dtype=np.uint8)
    x = 6 + 3 * i
    px[30:54, x : x + 24] = (210, 215, 220)
    return Image(px)


@pytest.fixture(scope="module")
def frame_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli_frames")
    for i in range(8):
        pnm_save(d / f"frame_{i:04d}.ppm", blob_frame(i))
    return d


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli_corpus")
    code = run_cli(["gen-data", "--classes", "2", "--per-class", "6",
                    "--seed", "3", "--out", str(d)])
    assert code == 0
    return d


@pytest.fixture(scope="module")
def trained_dir(tmp_path_factory, corpus_dir):
    d = tmp_path_factory.mktemp("cli_model")
    code = run_cli([
        "train", "--data", str(corpus_dir), "--split", "0.7",
        "--solver", "adam", "--iters", "30", "--eval-interval", "10",
        "--patience", "0", "--input-size", "16", "--batch-size", "8",
        "--seed", "1", "--out", str(d),
    ])
    assert code == 0
    return d


class TestRouting:
    def test_no_arguments_usage_exit_2(self, capsys):
        assert run_cli([]) == 2
        assert "usage" in capsys.readouterr().err.lower()

    def test_unknown_subcommand_exit_2(self, capsys):
        assert run_cli(["frobnicate"]) == 2
        assert "usage" in capsys.readouterr().err.lower()

    def test_unknown_flag_exit_2(self, capsys):
        assert run_cli(["gen-data", "--bogus", "1"]) == 2

    def test_help_exit_0(self, capsys):
        assert run_cli(["--help"]) == 0
        out = capsys.readouterr().out
        for name in ("gen-data", "preprocess", "train", "eval", "sweep",
                     "detect", "serve-broker", "run-pipeline", "bench", "report"):
            assert name in out

    def test_every_subcommand_has_common_flags(self):
        parser = build_parser()
        sub = next(a for a in parser._actions
                   if isinstance(a, type(parser._subparsers._group_actions[0])))
        for name, p in sub.choices.items():
            flags = {s for action in p._actions for s in action.option_strings}
            assert {"--seed", "--out", "--config"} <= flags, name

    def test_invalid_log_level_exit_2(self, monkeypatch, capsys):
        monkeypatch.setenv("DEBRIS_EDGE_LOG", "loud")
        assert run_cli(["gen-data", "--classes", "1"]) == 2
        assert "DEBRIS_EDGE_LOG" in capsys.readouterr().err

    def test_log_level_applied(self, monkeypatch, tmp_path):
        import logging

        monkeypatch.setenv("DEBRIS_EDGE_LOG", "debug")
        assert run_cli(["gen-data", "--classes", "1", "--per-class", "1",
                        "--seed", "0", "--out", str(tmp_path)]) == 0
        assert logging.getLogger("debris_edge").level == logging.DEBUG

    def test_missing_required_value_exit_2(self, capsys):
        assert run_cli(["train"]) == 2
        assert "--data" in capsys.readouterr().err

    def test_runtime_error_exit_1(self, tmp_path, capsys):
        code = run_cli(["detect", "--input", str(tmp_path / "absent"),
                        "--out", str(tmp_path)])
        assert code == 1
        assert "error" in capsys.readouterr().err


class TestGenData:
    def test_counts_and_manifest(self, corpus_dir, capsys):
        manifest = corpus_dir / "manifest.jsonl"
        records = [json.loads(l) for l in manifest.read_text().splitlines()]
        assert len(records) == 12
        images = sorted(corpus_dir.glob("*.ppm"))
        assert len(images) == 12
        assert {r["label"] for r in records} == {"plastic", "wood"}

    def test_same_seed_same_bytes(self, tmp_path):
        for sub in ("a", "b"):
            assert run_cli(["gen-data", "--classes", "2", "--per-class", "2",
                            "--seed", "9", "--out", str(tmp_path / sub)]) == 0
        a = (tmp_path / "a" / "manifest.jsonl").read_bytes()
        b = (tmp_path / "b" / "manifest.jsonl").read_bytes()
        assert a == b
        for img in sorted((tmp_path / "a").glob("*.ppm")):
            assert img.read_bytes() == (tmp_path / "b" / img.name).read_bytes()

    def test_bad_class_count_exit_2(self, tmp_path, capsys):
        assert run_cli(["gen-data", "--classes", "9",
                        "--out", str(tmp_path)]) == 2


class TestPreprocess:
    def test_grayscale_chain(self, frame_dir, tmp_path, capsys):
        code = run_cli(["preprocess", "--input", str(frame_dir),
                        "--chain", '["grayscale"]', "--out", str(tmp_path)])
        assert code == 0
        outputs = sorted(tmp_path.glob("*.pgm"))
        assert len(outputs) == 8
        assert pnm_load(outputs[0]).channels == 1
        assert "processed 8" in capsys.readouterr().out

    def test_single_file_with_params(self, frame_dir, tmp_path):
        src = sorted(frame_dir.glob("*.ppm"))[0]
        chain = json.dumps(["grayscale", ["gaussian", {"sigma": 1.5}]])
        assert run_cli(["preprocess", "--input", str(src), "--chain", chain,
                        "--out", str(tmp_path)]) == 0
        assert (tmp_path / (src.stem + ".pgm")).exists()

    def test_bad_chain_op_exit_1(self, frame_dir, tmp_path):
        assert run_cli(["preprocess", "--input", str(frame_dir),
                        "--chain", '["sharpen"]', "--out", str(tmp_path)]) == 1


class TestTrainEval:
    def test_artifacts_written(self, trained_dir, capsys):
        history = (trained_dir / "history.csv").read_text().splitlines()
        assert history[0] == "iteration,train_loss,test_loss,train_acc,test_acc"
        assert len(history) > 1
        assert (trained_dir / "model.wdn").read_bytes()[:4] == b"WDN1"
        assert json.loads((trained_dir / "classes.json").read_text()) == [
            "plastic", "wood",
        ]

    def test_eval_writes_confusion(self, corpus_dir, trained_dir, tmp_path, capsys):
        code = run_cli(["eval", "--data", str(corpus_dir),
                        "--model", str(trained_dir / "model.wdn"),
                        "--out", str(tmp_path)])
        assert code == 0
        rows = (tmp_path / "confusion.csv").read_text().splitlines()
        assert rows[0].startswith("actual\\predicted") or "plastic" in rows[0]
        assert "accuracy" in capsys.readouterr().out

    def test_eval_split_uses_holdout(self, corpus_dir, trained_dir, tmp_path, capsys):
        code = run_cli(["eval", "--data", str(corpus_dir),
                        "--model", str(trained_dir / "model.wdn"),
                        "--split", "0.7", "--seed", "1", "--out", str(tmp_path)])
        assert code == 0
        # 30% of 12 images
        assert "evaluated 4 samples" in capsys.readouterr().out

    def test_config_file_fills_flags(self, corpus_dir, tmp_path, capsys):
        cfg = tmp_path / "train.json"
        cfg.write_text(json.dumps({
            "data": str(corpus_dir), "iters": 10, "eval_interval": 5,
            "patience": 0, "input_size": 16, "batch_size": 8, "seed": 2,
            "out": str(tmp_path / "run"),
        }))
        assert run_cli(["train", "--config", str(cfg)]) == 0
        assert (tmp_path / "run" / "model.wdn").exists()

    def test_flag_overrides_config(self, corpus_dir, tmp_path):
        cfg = tmp_path / "train.json"
        cfg.write_text(json.dumps({
            "data": str(corpus_dir), "iters": 500, "eval_interval": 5,
            "patience": 0, "input_size": 16, "batch_size": 8,
        }))
        out = tmp_path / "short"
        assert run_cli(["train", "--config", str(cfg), "--iters", "10",
                        "--out", str(out)]) == 0
        rows = (out / "history.csv").read_text().splitlines()
        last_iter = int(rows[-1].split(",")[0])
        assert last_iter <= 10

    def test_bad_solver_exit_2(self, corpus_dir, tmp_path):
        assert run_cli(["train", "--data", str(corpus_dir),
                        "--solver", "lbfgs", "--out", str(tmp_path)]) == 2


class TestSweepReport:
    def test_sweep_then_report(self, tmp_path, capsys):
        out = tmp_path / "sweep"
        code = run_cli(["sweep", "--input-sizes", "4,6", "--iters", "40",
                        "--solvers", "Adam", "--nn-sizes", "8",
                        "--seed", "5", "--out", str(out)])
        assert code == 0
        records = json.loads((out / "records.json").read_text())
        assert len(records) == 2
        assert {r["solver_type"] for r in records} == {"Adam"}
        assert all(r["history"] is not None for r in records)

        rep = tmp_path / "report"
        code = run_cli(["report", "--records", str(out / "records.json"),
                        "--max-lag", "3", "--out", str(rep)])
        assert code == 0
        table = (rep / "sweep.csv").read_text().splitlines()
        assert table[0] == "config,test_loss,input_size,iters,solver_type,nn_size"
        assert any(line.startswith("mean,") for line in table)
        assert (rep / "losses.svg").exists()
        assert (rep / "correlations.svg").exists()

    def test_report_single_record_skips_stats(self, tmp_path, capsys):
        out = tmp_path / "one"
        assert run_cli(["sweep", "--input-sizes", "4", "--iters", "30",
                        "--solvers", "SGD", "--nn-sizes", "8",
                        "--seed", "1", "--out", str(out)]) == 0
        rep = tmp_path / "rep"
        assert run_cli(["report", "--records", str(out / "records.json"),
                        "--out", str(rep)]) == 0
        table = (rep / "sweep.csv").read_text()
        assert "mean," not in table

    def test_report_missing_records_exit_1(self, tmp_path):
        assert run_cli(["report", "--records", str(tmp_path / "nope.json"),
                        "--out", str(tmp_path)]) == 1


class TestDetect:
    def test_directory(self, frame_dir, tmp_path, capsys):
        code = run_cli(["detect", "--input", str(frame_dir),
                        "--min-area", "200", "--out", str(tmp_path)])
        assert code == 0
        lines = (tmp_path / "detections.jsonl").read_text().splitlines()
        assert len(lines) == 8  # one blob per frame
        rec = json.loads(lines[0])
        assert set(rec) == {"frame", "path", "x", "y", "w", "h", "score", "class"}
        assert "8 frames" in capsys.readouterr().out

    def test_single_file(self, frame_dir, tmp_path):
        src = sorted(frame_dir.glob("*.ppm"))[2]
        assert run_cli(["detect", "--input", str(src), "--min-area", "200",
                        "--out", str(tmp_path)]) == 0
        lines = (tmp_path / "detections.jsonl").read_text().splitlines()
        assert len(lines) == 1
        assert json.loads(lines[0])["path"] == src.name


class TestPipelineBench:
    def test_run_pipeline_artifacts(self, frame_dir, tmp_path, capsys):
        out = tmp_path / "run"
        code = run_cli(["run-pipeline", "--frames", str(frame_dir),
                        "--min-area", "200", "--workers", "2", "--limit", "6",
                        "--out", str(out)])
        assert code == 0
        stats = [json.loads(l) for l in (out / "stats.jsonl").read_text().splitlines()]
        assert [s["frame"] for s in stats] == list(range(6))
        assert all(set(s) == {"frame", "count", "inference_ms", "avg_duration_s"}
                   for s in stats)
        meters = json.loads((out / "meters.json").read_text())
        assert meters["frames"] == 6
        assert meters["fps"] > 0
        assert meters["broker_drops"] == 0
        assert "6 frames" in capsys.readouterr().out

    def test_run_pipeline_publishes_to_broker(self, frame_dir, tmp_path):
        from debris_edge.pubsub import start_broker

        broker = start_broker(("127.0.0.1", 0))
        try:
            host, port = broker.address
            sub = BrokerClient(host, port)
            sub.subscribe("debris/stats")
            code = run_cli(["run-pipeline", "--frames", str(frame_dir),
                            "--min-area", "200", "--limit", "4",
                            "--broker", f"{host}:{port}",
                            "--out", str(tmp_path / "pub")])
            assert code == 0
            got = [json.loads(sub.next_message(timeout=2.0)[1]) for _ in range(4)]
            assert [g["frame"] for g in got] == [0, 1, 2, 3]
            sub.close()
        finally:
            broker.stop()

    def test_bench_artifacts(self, frame_dir, tmp_path, capsys):
        out = tmp_path / "bench"
        profiles = json.dumps([{"name": "solo", "worker_threads": 1, "batch": 8}])
        code = run_cli(["bench", "--frames", str(frame_dir), "--count", "4",
                        "--min-area", "200", "--profiles", profiles,
                        "--out", str(out)])
        assert code == 0
        rows = (out / "bench.csv").read_text().splitlines()
        assert rows[0] == "profile,model_load_ms,total_inference_ms,fps"
        assert len(rows) == 2 and rows[1].startswith("solo,")
        assert (out / "bench.svg").read_bytes().startswith(b"<?xml")
        assert "solo:" in capsys.readouterr().out


class TestServeBroker:
    def test_serves_and_stops(self, tmp_path):
        proc = subprocess.Popen(
            [sys.executable, "-m", "debris_edge.cli", "serve-broker",
             "--port", "0", "--run-seconds", "2.5"],
            stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True,
        )
        try:
            line = proc.stdout.readline()
            assert "listening on" in line
            host, port = line.rsplit(" ", 1)[1].strip().rsplit(":", 1)
            with BrokerClient(host, int(port)) as client:
                client.ping()
                client.subscribe("t")
                client.publish("t", "hello")
                assert client.next_message(timeout=2.0) == ("t", "hello")
            out, err = proc.communicate(timeout=10)
            assert proc.returncode == 0
            assert "broker stopped" in out
        finally:
            if proc.poll() is None:
                proc.kill()
