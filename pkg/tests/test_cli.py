import csv
import json
import shutil

import pytest

from qtune.cli import EXIT_INFEASIBLE, EXIT_INVALID, EXIT_IO, main


def run(ws, *args):
    return main([*args, "--out", str(ws)])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    ws = tmp_path_factory.mktemp("ws")
    (ws / "config.json").write_text(json.dumps({"preset": "ivf_pq", "k": 10, "seed": 5,
                                                "split": {"train_fraction": 0.5, "seed": 1}}))
    cfg = ["--config", str(ws / "config.json")]
    assert run(ws, "gen-synthetic", "--n", "10000", "--d", "16", "--queries", "300", "--clusters", "16", *cfg) == 0
    for cmd in ("gt", "build", "stats"):
        assert run(ws, cmd, *cfg) == 0, cmd
    assert run(ws, "tune", "--frontier", *cfg) == 0
    assert run(ws, "bench", "--no-timing", *cfg) == 0
    return ws, cfg


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


class TestPipeline:
    def test_frontier_csv(self, pipeline):
        ws, _ = pipeline
        front = json.loads((ws / "tune.json").read_text())
        rows = read_csv(ws / "bench.csv")
        assert len(rows) == len(front) >= 5
        assert list(rows[0]) == ["tuning_id", "t_1", "t_2", "t_3", "modeled_cost", "bytes_per_query",
                                 "recall_at_k", "qps"]
        costs = [float(r["modeled_cost"]) for r in rows]
        assert costs == sorted(costs)
        assert [int(r["t_1"]) for r in rows] == [p["t"][0] for p in front]
        assert all(0 <= float(r["recall_at_k"]) <= 1 for r in rows)

    def test_stats_rerun_is_byte_identical(self, pipeline):
        ws, cfg = pipeline
        before = {f.name: f.read_bytes() for f in (ws / "stats").iterdir()}
        assert run(ws, "stats", *cfg) == 0
        after = {f.name: f.read_bytes() for f in (ws / "stats").iterdir()}
        assert before == after

    def test_single_targets(self, pipeline):
        ws, cfg = pipeline
        assert run(ws, "tune", "--recall", "0.9", *cfg) == 0
        one = json.loads((ws / "tune.json").read_text())
        assert set(one) == {"lambda", "t", "modeled_cost", "modeled_recall"}
        assert one["modeled_recall"] >= 0.9
        assert run(ws, "tune", "--budget", str(one["modeled_cost"]), "--recall-target", "0.8", *cfg) == 0
        two = json.loads((ws / "tune.json").read_text())
        assert len(two) == 2 and two[0]["t"] == one["t"]

    def test_bench_explicit_tunings(self, pipeline):
        ws, cfg = pipeline
        assert run(ws, "bench", "--tuning", "10000,10000,10", "--on", "all", "--no-timing", *cfg) == 0
        row = read_csv(ws / "bench.csv")[0]
        assert float(row["recall_at_k"]) == 1.0
        assert row["qps"] == ""

    def test_infeasible_budget(self, pipeline):
        ws, cfg = pipeline
        before = (ws / "tune.json").read_bytes()
        assert run(ws, "tune", "--budget", "1e-12", *cfg) == EXIT_INFEASIBLE
        assert (ws / "tune.json").read_bytes() == before

    def test_invalid_inputs(self, pipeline):
        ws, cfg = pipeline
        assert run(ws, "bench", "--tuning", "10,20,10", "--no-timing", *cfg) == EXIT_INVALID
        assert run(ws, "tune", "--recall", "1.5", *cfg) == EXIT_INVALID
        assert run(ws, "grid", *cfg) == EXIT_INVALID
        # an 80/20 split of 300 queries leaves 60 for the holdout
        assert run(ws, "validate", "--config", str(_write(ws, "small.json", {"split": {"train_fraction": 0.8}}))) \
            == EXIT_INVALID


def _write(ws, name, obj):
    path = ws / name
    path.write_text(json.dumps(obj))
    return path


class TestFailures:
    def test_missing_dataset_leaves_no_outputs(self, tmp_path):
        assert run(tmp_path, "gt") == EXIT_IO
        assert run(tmp_path, "build") == EXIT_IO
        assert list(tmp_path.iterdir()) == []

    def test_missing_config_file(self, tmp_path):
        assert run(tmp_path, "build", "--config", str(tmp_path / "nope.json")) == EXIT_IO

    @pytest.mark.parametrize("obj", [
        {"presett": "ivf_pq"},
        {"preset": "no_such_preset"},
        {"k": 0},
        {"split": {"train_fraction": 1.0}},
        {"metric": "cosine-ish"},
        {"validate": {"replicas": 1}},
    ])
    def test_bad_config(self, tmp_path, obj):
        assert run(tmp_path, "build", "--config", str(_write(tmp_path, "c.json", obj))) == EXIT_INVALID
        assert not (tmp_path / "hierarchy").exists()

    def test_unparsable_config(self, tmp_path):
        (tmp_path / "c.json").write_text("{")
        assert run(tmp_path, "build", "--config", str(tmp_path / "c.json")) == EXIT_INVALID

    def test_stale_stats_rejected(self, pipeline, tmp_path):
        ws, cfg = pipeline
        copy = tmp_path / "ws"
        shutil.copytree(ws, copy)
        assert run(copy, "build", *cfg, "--seed", "6") == 0
        assert run(copy, "validate", *cfg) == EXIT_INVALID
