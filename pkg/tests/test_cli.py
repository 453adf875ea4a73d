import json
import threading
import time
from pathlib import Path

import pytest
import uvicorn

from qtod.cli import main
from qtod.service import create_app

from wire_stub import running_stub


def invoke(argv, capsys):
    with pytest.raises(SystemExit) as exc_info:
        main([str(a) for a in argv])
    captured = capsys.readouterr()
    code = exc_info.value.code
    return (0 if code is None else code), captured.out + captured.err


@pytest.fixture(scope="session")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "synthetic"
    with pytest.raises(SystemExit) as exc_info:
        main(["make-synthetic", "--dialogues", "30", "--seed", "0",
              "--pool", "64", "--out", str(out)])
    assert exc_info.value.code == 0
    return out


@pytest.fixture(scope="session")
def run_dir(data_dir, tmp_path_factory):
    """A completed rule-backend run over the test split."""
    out = tmp_path_factory.mktemp("runs")
    with pytest.raises(SystemExit) as exc_info:
        main(["run", "--dataset", str(data_dir), "--split", "test",
              "--backend", "rule", "--out", str(out)])
    assert exc_info.value.code == 0
    (only,) = list(out.iterdir())
    return only


def read_results(run_dir: Path) -> list[dict]:
    lines = (run_dir / "results.jsonl").read_text(encoding="utf-8").splitlines()
    return [json.loads(line) for line in lines if line.strip()]


class TestRun:
    def test_artifacts_and_ordering(self, run_dir):
        assert run_dir.name.startswith("run-")
        rows = read_results(run_dir)
        assert rows
        keys = [(r["session_id"], r["turn"]) for r in rows]
        assert keys == sorted(keys)
        assert {"query", "retrieved", "response", "timings"} <= set(rows[0])
        config = json.loads((run_dir / "config.json").read_text())
        assert config["split"] == "test" and config["backend_kind"] == "rule"

    def test_jobs_parallel_equals_serial(self, data_dir, run_dir, tmp_path, capsys):
        code, _ = invoke(
            ["run", "--dataset", data_dir, "--split", "test", "--jobs", "4",
             "--out", tmp_path], capsys)
        assert code == 0
        (parallel,) = list(tmp_path.iterdir())

        def stable(rows):
            return [{k: v for k, v in r.items() if k != "timings"} for r in rows]

        assert stable(read_results(parallel)) == stable(read_results(run_dir))

    def test_config_file_fills_defaults_flags_win(self, data_dir, tmp_path, capsys):
        config_path = tmp_path / "conf.json"
        config_path.write_text(json.dumps({"mode": "identity", "top-n": 5}))
        code, _ = invoke(
            ["run", "--dataset", data_dir, "--split", "test",
             "--config", config_path, "--out", tmp_path / "a"], capsys)
        assert code == 0
        (run_a,) = list((tmp_path / "a").iterdir())
        effective = json.loads((run_a / "config.json").read_text())
        assert effective["mode"] == "identity" and effective["top_n"] == 5

        code, _ = invoke(
            ["run", "--dataset", data_dir, "--split", "test",
             "--config", config_path, "--mode", "qtod", "--out", tmp_path / "b"],
            capsys)
        assert code == 0
        (run_b,) = list((tmp_path / "b").iterdir())
        assert json.loads((run_b / "config.json").read_text())["mode"] == "qtod"

    def test_missing_dataset_is_usage_error(self, tmp_path, capsys):
        code, output = invoke(
            ["run", "--dataset", tmp_path / "nowhere", "--out", tmp_path], capsys)
        assert code == 1
        assert "Error" in output

    def test_unreachable_remote_backend_exits_2(self, data_dir, tmp_path, capsys):
        code, output = invoke(
            ["run", "--dataset", data_dir, "--split", "test", "--backend", "remote",
             "--backend-url", "http://127.0.0.1:9", "--out", tmp_path], capsys)
        assert code == 2
        assert "error" in output.lower()


class TestEval:
    def test_roundtrip_reports_perfect_scores(self, data_dir, run_dir, tmp_path, capsys):
        code, output = invoke(
            ["eval", "--results", run_dir / "results.jsonl", "--dataset", data_dir,
             "--split", "test", "--out", tmp_path], capsys)
        assert code == 0
        report = json.loads((tmp_path / "report.json").read_text())
        assert report["entity_f1"] == 1.0
        assert report["bleu"] == 1.0
        assert report["recall_at_3"] == 1.0
        assert (tmp_path / "report.csv").exists()
        assert "entity_f1" in output

    def test_misaligned_results_exit_1(self, data_dir, run_dir, tmp_path, capsys):
        rows = read_results(run_dir)
        clipped = tmp_path / "clipped.jsonl"
        with open(clipped, "w", encoding="utf-8") as fh:
            for row in rows[:-1]:
                fh.write(json.dumps(row) + "\n")
        code, output = invoke(
            ["eval", "--results", clipped, "--dataset", data_dir, "--split", "test"],
            capsys)
        assert code == 1
        assert "misalignment" in output


class TestBenchAndAblation:
    def test_bench_kb_artifacts(self, data_dir, tmp_path, capsys):
        code, output = invoke(
            ["bench-kb", "--dataset", data_dir, "--split", "test",
             "--pool", data_dir / "pool.json", "--sizes", "8,16",
             "--out", tmp_path], capsys)
        assert code == 0
        csv_lines = (tmp_path / "scaling.csv").read_text().splitlines()
        assert csv_lines[0] == "kb_size,metric,latency_ms"
        assert len(csv_lines) == 3
        points = json.loads((tmp_path / "scaling.json").read_text())["points"]
        assert [p["kb_size"] for p in points] == [8, 16]
        assert "kb_size" in output

    def test_bench_kb_is_seed_deterministic(self, data_dir, tmp_path, capsys):
        outputs = []
        for name in ("x", "y"):
            code, _ = invoke(
                ["bench-kb", "--dataset", data_dir, "--split", "test",
                 "--pool", data_dir / "pool.json", "--sizes", "8,16",
                 "--seed", "7", "--out", tmp_path / name], capsys)
            assert code == 0
            points = json.loads((tmp_path / name / "scaling.json").read_text())["points"]
            outputs.append(
                [(p["kb_size"], p["entity_f1"], p["recall"]) for p in points])
        assert outputs[0] == outputs[1]

    def test_topn_ablation(self, data_dir, tmp_path, capsys):
        code, output = invoke(
            ["topn", "--dataset", data_dir, "--split", "test",
             "--n-values", "1,3", "--out", tmp_path], capsys)
        assert code == 0
        table = json.loads((tmp_path / "ablation.json").read_text())
        assert set(table) == {"1", "3"}
        assert all("entity_f1" in row for row in table.values())
        assert "n=1" in output and "n=3" in output


class TestDatasetTools:
    def test_build_crossdomain(self, data_dir, tmp_path, capsys):
        recipe = tmp_path / "recipe.json"
        recipe.write_text(json.dumps([[[0, "restaurant"], [0, "hotel"]]]))
        code, output = invoke(
            ["build-crossdomain", "--source", data_dir, "--recipe", recipe,
             "--count", "4", "--ratio", "2,1,1", "--out", tmp_path / "xd"], capsys)
        assert code == 0
        from qtod.data import load_dataset

        merged = load_dataset(tmp_path / "xd")
        assert (len(merged.train), len(merged.validation), len(merged.test)) == (2, 1, 1)
        domains = {t.domain for d in merged.train for t in d.turns if t.domain}
        assert domains == {"restaurant", "hotel"}

    def test_build_crossdomain_capacity_exhaustion(self, data_dir, tmp_path, capsys):
        recipe = tmp_path / "recipe.json"
        recipe.write_text(json.dumps([[[0, "restaurant"], [0, "hotel"]]]))
        code, output = invoke(
            ["build-crossdomain", "--source", data_dir, "--recipe", recipe,
             "--count", "500", "--out", tmp_path / "xd2"], capsys)
        assert code == 1

    def test_fewshot(self, data_dir, tmp_path, capsys):
        code, output = invoke(
            ["fewshot", "--dataset", data_dir, "--fraction", "0.25",
             "--out", tmp_path / "few"], capsys)
        assert code == 0
        from qtod.data import load_dataset

        full = load_dataset(data_dir)
        few = load_dataset(tmp_path / "few")
        assert len(few.train) == 6  # ceil(0.25 * 24)
        assert {d.session_id for d in few.train} <= {d.session_id for d in full.train}
        assert len(few.test) == len(full.test)

    def test_export_training(self, data_dir, tmp_path, capsys):
        out = tmp_path / "pairs.jsonl"
        code, output = invoke(
            ["export-training", "--dataset", data_dir, "--split", "train",
             "--out", out], capsys)
        assert code == 0
        rows = [json.loads(l) for l in out.read_text().splitlines()]
        assert rows and {r["task"] for r in rows} == {"query", "response"}
        assert all({"task", "prompt", "target"} <= set(r) for r in rows)

        code, _ = invoke(
            ["export-training", "--dataset", data_dir, "--split", "train",
             "--use-gold-records", "--out", tmp_path / "gold.jsonl"], capsys)
        assert code == 0
        gold_rows = (tmp_path / "gold.jsonl").read_text().splitlines()
        assert len(gold_rows) == len(rows)


class TestCheckServer:
    def test_conforming_server_passes(self, capsys):
        with running_stub() as stub:
            code, output = invoke(["check-server", "--backend-url", stub.url], capsys)
        assert code == 0
        assert "[PASS]" in output and "[FAIL]" not in output

    def test_broken_server_exits_1(self, capsys):
        with running_stub() as stub:
            stub.bad_relevance_label = True
            code, output = invoke(["check-server", "--backend-url", stub.url], capsys)
        assert code == 1
        assert "[FAIL] relevance_schema" in output

    def test_dead_server_exits_2(self, capsys):
        code, _ = invoke(["check-server", "--backend-url", "http://127.0.0.1:9"], capsys)
        assert code == 2

    def test_url_from_environment(self, monkeypatch, capsys):
        with running_stub() as stub:
            monkeypatch.setenv("QTOD_BACKEND_URL", stub.url)
            code, output = invoke(["check-server"], capsys)
        assert code == 0
        assert "[PASS]" in output


class TestChat:
    def test_scripted_session(self, tmp_path, monkeypatch, capsys):
        kb_path = tmp_path / "kb.json"
        kb_path.write_text(json.dumps({
            "scope": "session",
            "records": [
                {"id": "r1", "domain": "restaurant",
                 "slots": [["name", "peking house"], ["category", "chinese"],
                           ["price", "cheap"], ["area", "north"]]},
                {"id": "r2", "domain": "restaurant",
                 "slots": [["name", "golden fork"], ["category", "italian"],
                           ["price", "expensive"], ["area", "centre"]]},
                {"id": "r3", "domain": "restaurant",
                 "slots": [["name", "blue lagoon"], ["category", "seafood"],
                           ["price", "moderate"], ["area", "south"]]},
            ],
        }))
        feed = iter([
            "find a cheap chinese restaurant in the north",
            "/mode identity",
            "/mode warp",
            "/reset",
            "/quit",
        ])
        monkeypatch.setattr("builtins.input", lambda prompt="": next(feed))
        code, output = invoke(["chat", "--kb", kb_path], capsys)
        assert code == 0
        assert "there are 1 options: peking house" in output
        assert "mode set to identity" in output
        assert "usage: /mode" in output
        assert "context cleared" in output

    def test_backend_error_does_not_kill_repl(self, tmp_path, monkeypatch, capsys):
        kb_path = tmp_path / "kb.json"
        kb_path.write_text(json.dumps([{"name": "peking house", "area": "north"}]))
        feed = iter(["hello there", "/quit"])
        monkeypatch.setattr("builtins.input", lambda prompt="": next(feed))
        code, output = invoke(["chat", "--kb", kb_path, "--backend", "scripted"], capsys)
        assert code == 0
        assert "error (query):" in output


@pytest.fixture(scope="module")
def server_url():
    config = uvicorn.Config(
        create_app(), host="127.0.0.1", port=0, log_level="error")
    server = uvicorn.Server(config)
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    deadline = time.time() + 10
    while not server.started:
        if time.time() > deadline:
            raise RuntimeError("service did not start")
        time.sleep(0.02)
    (socket_server,) = server.servers
    port = socket_server.sockets[0].getsockname()[1]
    yield f"http://127.0.0.1:{port}"
    server.should_exit = True
    thread.join(timeout=5)


class TestThinClient:
    def test_server_run_matches_local_run(
            self, data_dir, run_dir, server_url, tmp_path, capsys):
        code, _ = invoke(
            ["run", "--dataset", data_dir, "--split", "test",
             "--server", server_url, "--out", tmp_path], capsys)
        assert code == 0
        (remote_dir,) = list(tmp_path.iterdir())

        def essence(rows):
            return [
                (r["session_id"], r["turn"], r["query"], r["response"],
                 [rid for rid, _ in r["retrieved"]])
                for r in rows
            ]

        assert essence(read_results(remote_dir)) == essence(read_results(run_dir))

    def test_server_run_is_evaluable(self, data_dir, server_url, tmp_path, capsys):
        code, _ = invoke(
            ["run", "--dataset", data_dir, "--split", "test",
             "--server", server_url, "--out", tmp_path / "r"], capsys)
        assert code == 0
        (remote_dir,) = list((tmp_path / "r").iterdir())
        code, _ = invoke(
            ["eval", "--results", remote_dir / "results.jsonl",
             "--dataset", data_dir, "--split", "test", "--out", tmp_path / "e"],
            capsys)
        assert code == 0
        report = json.loads((tmp_path / "e" / "report.json").read_text())
        assert report["entity_f1"] == 1.0


def test_version_flag(capsys):
    code, output = invoke(["--version"], capsys)
    assert code == 0
    assert "qtod" in output
