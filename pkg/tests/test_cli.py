import json

import numpy as np
import pytest
from click.testing import CliRunner

from alquery.cli import main
from alquery.config import EngineConfig
from alquery.difficulty import DifficultyState, load_difficulty_state, update_difficulties
from alquery.records import (
    MatchEvent,
    RoundState,
    save_round_state,
    write_detections,
    write_match_events,
)
from alquery.sampler import ppal_select
from alquery.simharness import WorldConfig, build_world, simulate_detector


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def workspace(tmp_path):
    """Small synthetic dump + round state + event stream on disk."""
    world = build_world(WorldConfig(num_classes=5, num_images=30, feature_dim=8, rare_classes=(4,)))
    labelled = world.image_ids[:6]
    records, events = simulate_detector(world, labelled, seed=1, train_iters=6, batch_size=3)
    detections = tmp_path / "detections.ndjson"
    write_detections(records, detections)
    events_path = tmp_path / "events.ndjson"
    write_match_events(events, events_path)
    state = RoundState(
        round=0,
        labelled_ids=set(labelled),
        unlabelled_ids=set(world.image_ids) - set(labelled),
        budget=5,
    )
    round_state = tmp_path / "round_state.json"
    save_round_state(state, round_state)
    return {
        "tmp": tmp_path,
        "world": world,
        "records": records,
        "events": events,
        "detections": detections,
        "events_path": events_path,
        "round_state": round_state,
    }


class TestTrack:
    def test_missing_state_creates_fresh(self, runner, workspace):
        state_path = workspace["tmp"] / "difficulty.json"
        result = runner.invoke(
            main, ["track", str(workspace["events_path"]), "--state", str(state_path)]
        )
        assert result.exit_code == 0, result.output
        state = load_difficulty_state(state_path)
        assert state.num_classes == 5

    def test_matches_library_updates(self, runner, workspace):
        state_path = workspace["tmp"] / "difficulty.json"
        result = runner.invoke(
            main,
            ["track", str(workspace["events_path"]), "--state", str(state_path), "--classes", "5"],
        )
        assert result.exit_code == 0, result.output
        expected = DifficultyState.fresh(5)
        for _, matches in workspace["events"]:
            expected = update_difficulties(expected, matches)
        got = load_difficulty_state(state_path)
        assert np.allclose(got.difficulties, expected.difficulties)
        assert np.allclose(got.momenta, expected.momenta)

    def test_empty_events_leave_existing_state_unchanged(self, runner, workspace, tmp_path):
        from alquery.difficulty import save_difficulty_state

        state_path = tmp_path / "difficulty.json"
        initial = DifficultyState(np.array([0.4, 0.7]), np.array([0.9, 0.8]))
        save_difficulty_state(initial, state_path)
        empty = tmp_path / "empty.ndjson"
        empty.write_text("")
        result = runner.invoke(main, ["track", str(empty), "--state", str(state_path)])
        assert result.exit_code == 0, result.output
        back = load_difficulty_state(state_path)
        assert np.array_equal(back.difficulties, initial.difficulties)
        assert np.array_equal(back.momenta, initial.momenta)

    def test_empty_events_without_state_or_classes_fails(self, runner, tmp_path):
        empty = tmp_path / "empty.ndjson"
        empty.write_text("")
        result = runner.invoke(
            main, ["track", str(empty), "--state", str(tmp_path / "s.json")]
        )
        assert result.exit_code == 1
        assert "classes" in result.output

    def test_missing_events_file_is_io_error(self, runner, tmp_path):
        result = runner.invoke(
            main, ["track", str(tmp_path / "none.ndjson"), "--state", str(tmp_path / "s.json")]
        )
        assert result.exit_code == 2

    def test_malformed_events_are_validation_errors(self, runner, tmp_path):
        bad = tmp_path / "bad.ndjson"
        bad.write_text("{broken\n")
        result = runner.invoke(main, ["track", str(bad), "--state", str(tmp_path / "s.json")])
        assert result.exit_code == 1
        assert ":1:" in result.output


class TestScore:
    def test_output_sorted_descending(self, runner, workspace):
        out = workspace["tmp"] / "scores.ndjson"
        result = runner.invoke(main, ["score", str(workspace["detections"]), "--out", str(out)])
        assert result.exit_code == 0, result.output
        rows = [json.loads(line) for line in out.read_text().splitlines()]
        assert len(rows) == 30
        values = [r["uncertainty"] for r in rows]
        assert values == sorted(values, reverse=True)
        meta = json.loads((workspace["tmp"] / "scores.ndjson.meta.json").read_text())
        assert meta["config"]["measure"] == "entropy"

    def test_measure_flag(self, runner, workspace):
        out = workspace["tmp"] / "scores.ndjson"
        result = runner.invoke(
            main,
            ["score", str(workspace["detections"]), "--out", str(out), "--measure", "margin"],
        )
        assert result.exit_code == 0, result.output
        meta = json.loads((workspace["tmp"] / "scores.ndjson.meta.json").read_text())
        assert meta["config"]["measure"] == "margin"


class TestSelect:
    def _select(self, runner, workspace, out_name="queries.json", extra=()):
        out = workspace["tmp"] / out_name
        result = runner.invoke(
            main,
            [
                "select",
                str(workspace["detections"]),
                "--round-state", str(workspace["round_state"]),
                "--out", str(out),
                *extra,
            ],
        )
        return result, out

    def test_ppal_matches_library(self, runner, workspace):
        result, out = self._select(runner, workspace, extra=("--strategy", "ppal"))
        assert result.exit_code == 0, result.output
        payload = json.loads(out.read_text())
        config = EngineConfig()
        state = RoundState(
            round=0,
            labelled_ids=set(workspace["world"].image_ids[:6]),
            unlabelled_ids=set(workspace["world"].image_ids[6:]),
            budget=5,
        )
        tracker = DifficultyState.fresh(5, m0=config.m0, xi=config.xi)
        expected = ppal_select(workspace["records"], state, tracker, config)
        assert payload["ids"] == expected.ids
        assert payload["round"] == 0
        assert payload["config"]["delta"] == 4.0  # default echoed
        for image_id in payload["ids"]:
            assert set(payload["provenance"][image_id]) == {"uncertainty", "cluster", "stage"}

    def test_deterministic_across_runs(self, runner, workspace):
        _, out_a = self._select(runner, workspace, "a.json", ("--strategy", "random", "--seed", "7"))
        _, out_b = self._select(runner, workspace, "b.json", ("--strategy", "random", "--seed", "7"))
        assert out_a.read_bytes() == out_b.read_bytes()

    def test_budget_above_unlabelled_fails_with_one(self, runner, workspace):
        result, _ = self._select(runner, workspace, extra=("--budget", "100"))
        assert result.exit_code == 1
        assert "exceeds" in result.output

    def test_invalid_budget_rejected(self, runner, workspace):
        result, _ = self._select(runner, workspace, extra=("--budget", "0"))
        assert result.exit_code == 1

    def test_unknown_strategy(self, runner, workspace):
        result, _ = self._select(runner, workspace, extra=("--strategy", "mystery"))
        assert result.exit_code == 1
        assert "unknown strategy" in result.output

    def test_config_file_overridden_by_flags(self, runner, workspace):
        config_path = workspace["tmp"] / "config.json"
        config_path.write_text(json.dumps({"delta": 2.0, "seed": 3}))
        result, out = self._select(
            runner, workspace,
            extra=("--config", str(config_path), "--delta", "3.0"),
        )
        assert result.exit_code == 0, result.output
        payload = json.loads(out.read_text())
        assert payload["config"]["delta"] == 3.0
        assert payload["config"]["seed"] == 3

    def test_grid_strategy(self, runner, workspace):
        result, out = self._select(runner, workspace, extra=("--strategy", "entropy/kl"))
        assert result.exit_code == 0, result.output
        payload = json.loads(out.read_text())
        assert len(payload["ids"]) == 5


class TestSimulate:
    def test_minimal_config(self, runner, tmp_path):
        config = {
            "strategies": ["random"],
            "rounds": 1,
            "budget": 3,
            "seeds": [0],
            "init_labelled": 5,
            "train_iters": 4,
            "batch_size": 3,
            "world": {"num_classes": 4, "num_images": 25, "feature_dim": 8, "rare_classes": [3]},
        }
        config_path = tmp_path / "bench.json"
        config_path.write_text(json.dumps(config))
        out_dir = tmp_path / "out"
        result = runner.invoke(main, ["simulate", str(config_path), "--out", str(out_dir)])
        assert result.exit_code == 0, result.output
        lines = (out_dir / "report.csv").read_text().strip().splitlines()
        assert lines[0].startswith("strategy,seed,round")
        assert len(lines) == 2  # one row per (strategy, seed, round)
        payload = json.loads((out_dir / "report.json").read_text())
        assert payload["config"]["budget"] == 3

    def test_unknown_strategy_fails(self, runner, tmp_path):
        config_path = tmp_path / "bench.json"
        config_path.write_text(json.dumps({"strategies": ["quantum"], "rounds": 1,
                                           "world": {"num_images": 50}}))
        result = runner.invoke(main, ["simulate", str(config_path), "--out", str(tmp_path / "o")])
        assert result.exit_code == 1
        assert "unknown strategy" in result.output


class TestRetrieveBench:
    def _config(self, tmp_path, **overrides):
        payload = {
            "world": {"num_classes": 4, "num_images": 30, "feature_dim": 8, "rare_classes": [3]},
            "kinds": ["ccms", "global"],
            "seeds": [0],
            "k": 5,
        }
        payload.update(overrides)
        path = tmp_path / "retrieval_config.json"
        path.write_text(json.dumps(payload))
        return path

    def test_report_written(self, runner, tmp_path):
        config_path = self._config(tmp_path)
        out_dir = tmp_path / "out"
        result = runner.invoke(main, ["retrieve-bench", str(config_path), "--out", str(out_dir)])
        assert result.exit_code == 0, result.output
        payload = json.loads((out_dir / "retrieval.json").read_text())
        assert payload["k"] == 5
        assert set(payload["reports"]) == {"ccms", "global"}
        assert payload["config"]["world"]["num_images"] == 30

    def test_default_k_is_twenty(self, runner, tmp_path):
        config_path = self._config(tmp_path)
        payload = json.loads(config_path.read_text())
        del payload["k"]
        config_path.write_text(json.dumps(payload))
        out_dir = tmp_path / "out"
        result = runner.invoke(main, ["retrieve-bench", str(config_path), "--out", str(out_dir)])
        assert result.exit_code == 0, result.output
        assert json.loads((out_dir / "retrieval.json").read_text())["k"] == 20

    def test_matrix_dump(self, runner, tmp_path):
        from alquery.similarity import SimilarityMatrix

        config_path = self._config(tmp_path, kinds=["ccms"])
        out_dir = tmp_path / "out"
        prefix = tmp_path / "mat"
        result = runner.invoke(
            main,
            ["retrieve-bench", str(config_path), "--out", str(out_dir),
             "--matrix-out", str(prefix)],
        )
        assert result.exit_code == 0, result.output
        mat = SimilarityMatrix.load(f"{prefix}.ccms.seed0.bin")
        assert mat.n == 30

    def test_k_too_large_fails(self, runner, tmp_path):
        config_path = self._config(tmp_path, k=30)
        result = runner.invoke(
            main, ["retrieve-bench", str(config_path), "--out", str(tmp_path / "o")]
        )
        assert result.exit_code == 1
        assert "smaller than the pool" in result.output
