import warnings
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from mlci import experiments
from mlci.cli import main
from mlci.config import load_config
from mlci.demogen import write_demos

warnings.filterwarnings("ignore", message=".*never entered.*")

CONFIG = Path(__file__).parent.parent / "configs" / "pendulum_small.yaml"


@pytest.fixture(scope="module")
def small_config():
    return load_config(CONFIG)


@pytest.fixture(scope="module")
def small_demos(small_config):
    demos, records = experiments.acquire_demos(small_config)
    return demos, records


class TestConfig:
    def test_round_trip_fields(self, small_config):
        assert small_config.system.name == "pendulum"
        assert small_config.grid_cells == (10, 10)
        assert small_config.planning_steps == 10
        assert small_config.true_constraint is not None
        assert small_config.hypothesis_dims == (0, 1)

    def test_hash_stable_and_sensitive(self, small_config):
        again = load_config(CONFIG)
        assert small_config.config_hash() == again.config_hash()
        changed = load_config(CONFIG, overrides={"seed": 123})
        assert changed.config_hash() != small_config.config_hash()

    def test_dim_labels_resolved(self, small_config):
        hyp = small_config.hypotheses()
        assert hyp.dims == (0, 1)
        assert len(hyp) == 100

    def test_indivisible_horizon_rejected(self, small_config):
        bad = load_config(CONFIG, overrides={"horizon": 2.6})
        with pytest.raises(ValueError):
            bad.planning_steps


class TestRunners:
    def test_accuracy_rows_and_csv(self, small_config, tmp_path):
        rows, path = experiments.run_accuracy_experiment(small_config, tmp_path)
        assert len(rows) == 2
        finite = [r for r in rows if np.isfinite(r[2])]
        assert all(r[2] >= 0.0 for r in finite)
        lines = path.read_text().splitlines()
        assert lines[0].startswith("# config=")
        assert "seed=" in lines[0]
        assert lines[1].split(",")[0] == "cells"

    def test_ranking_counts_skips(self, small_config, small_demos, tmp_path):
        demos, _ = small_demos
        rows, path = experiments.run_ranking_experiment(
            small_config, tmp_path, demos=demos
        )
        n_used = rows[0][5]
        assert rows[-1][0] == min(small_config.max_demos_ranked, n_used)
        assert all(r[1] >= 1.0 for r in rows)

    def test_distance_in_bounds(self, small_config, small_demos, tmp_path):
        demos, _ = small_demos
        rows, _ = experiments.run_distance_experiment(
            small_config, tmp_path, demos=demos
        )
        for _, _, dist, used, _ in rows:
            if used:
                assert 0.0 <= dist <= 100.0

    def test_confidence_starts_at_prior_and_monotone(self, small_config,
                                                     small_demos, tmp_path):
        demos, _ = small_demos
        rows, _ = experiments.run_confidence_report(small_config, tmp_path,
                                                    demos=demos)
        assert rows[0][1] == pytest.approx(small_config.prior)
        posteriors = [r[1] for r in rows]
        assert all(b >= a - 1e-12 for a, b in zip(posteriors, posteriors[1:]))

    def test_compare_round_trips_bitsets(self, small_config, small_demos, tmp_path):
        demos, _ = small_demos
        sampled, path = experiments.compare_trajectories(
            small_config, 0, 7, tmp_path, demos=demos
        )
        lines = path.read_text().splitlines()
        kinds = [line.split(",")[0] for line in lines[2:]]
        assert "demo" in kinds and "mdp" in kinds
        mdp_bits = next(line for line in lines if line.startswith("mdp_violations"))
        raw = mdp_bits.rsplit(",", 1)[1]
        parsed = {int(tok) for tok in raw.split("|") if tok}
        n_plain = len(small_config.hypotheses())
        assert parsed == set(np.where(sampled.violated[:n_plain])[0])
        first_mdp = next(line for line in lines if line.startswith("mdp,"))
        assert int(first_mdp.split(",")[5]) == sampled.cells[0]

    def test_inference_writes_report(self, small_config, small_demos, tmp_path):
        demos, _ = small_demos
        report, elapsed = experiments.run_inference(small_config, tmp_path,
                                                    demos=demos)
        assert (tmp_path / "report.csv").exists()
        assert (tmp_path / "summary.txt").exists()
        assert report.top is not None

    def test_ingested_demos_via_csv(self, small_config, small_demos, tmp_path):
        demos, _ = small_demos
        path = tmp_path / "demos.csv"
        write_demos(path, demos, small_config.system)
        cfg = load_config(CONFIG, overrides={
            "demos": {"source": str(path), "dt_sim": 0.01},
        })
        loaded, records = experiments.acquire_demos(cfg)
        assert len(loaded) == len(demos)
        assert records == []


class TestAccuracyGeometry:
    def test_equilibrium_error_bounded_by_cell_radius(self, tmp_path):
        # start = goal = the hanging equilibrium, which on a 9x9 grid is
        # exactly a cell center; with a 2-step horizon the executed policy
        # cannot drift further than the discretization radius
        from mlci.config import config_from_dict

        config = config_from_dict({
            "system": {"name": "pendulum"},
            "mdp": {"cells": [9, 9], "action_levels": [5], "dt": 0.1,
                    "substeps": 10},
            "horizon": 0.2,
            "hypotheses": {"dims": ["theta", "theta_dot"], "counts": [10, 10]},
            "true_constraint": {"dims": ["theta", "theta_dot"],
                                "lower": [1.0, 3.0], "upper": [1.5, 4.0]},
            "accuracy": {"cells": [[9, 9]], "dts": [0.1], "pairs": 1},
            "seed": 0,
        })
        point = np.array([np.pi, 0.0])
        rows, _ = experiments.run_accuracy_experiment(
            config, tmp_path, pairs=[(point, point)])
        cells, dt, err, used, skipped = rows[0]
        assert used == 1 and skipped == 0
        cell_radius = np.hypot(1.0 / 18.0, 1.0 / 18.0)  # normalized half-widths
        assert 0.0 <= err <= cell_radius


class TestDeterminism:
    def test_byte_identical_outputs(self, small_config, tmp_path):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            demos, _ = experiments.acquire_demos(small_config)
            experiments.run_ranking_experiment(small_config, out, demos=demos)
            experiments.run_accuracy_experiment(small_config, out)
            experiments.run_confidence_report(small_config, out, demos=demos)
            outs.append(out)
        for fname in ("ranking.csv", "accuracy.csv", "confidence.csv"):
            a = (outs[0] / fname).read_bytes()
            b = (outs[1] / fname).read_bytes()
            assert a == b, f"{fname} differs between identical runs"


class TestCli:
    def test_gen_demos_and_infer(self, tmp_path):
        runner = CliRunner()
        out = tmp_path / "run"
        result = runner.invoke(main, [
            "gen-demos", "--config", str(CONFIG), "--out", str(out),
        ], catch_exceptions=False)
        assert result.exit_code == 0, result.output
        assert (out / "demos.csv").exists()
        assert (out / "pairs.csv").exists()
        assert "accepted" in result.output

        result = runner.invoke(main, [
            "infer", "--config", str(CONFIG), "--out", str(out),
        ], catch_exceptions=False)
        assert result.exit_code == 0, result.output
        assert (out / "report.csv").exists()
        assert "rank" in result.output

    def test_build_mdp_caches(self, tmp_path):
        runner = CliRunner()
        out = tmp_path / "run"
        cache = tmp_path / "cache"
        result = runner.invoke(main, [
            "build-mdp", "--config", str(CONFIG), "--out", str(out),
            "--cache", str(cache),
        ], catch_exceptions=False)
        assert result.exit_code == 0, result.output
        assert list(cache.glob("mdp_*.npz"))

    def test_accuracy_command(self, tmp_path):
        runner = CliRunner()
        out = tmp_path / "run"
        result = runner.invoke(main, [
            "accuracy", "--config", str(CONFIG), "--out", str(out),
        ], catch_exceptions=False)
        assert result.exit_code == 0, result.output
        assert (out / "accuracy.csv").exists()

    def test_compare_command(self, tmp_path):
        runner = CliRunner()
        out = tmp_path / "run"
        result = runner.invoke(main, [
            "compare", "--config", str(CONFIG), "--out", str(out),
            "--demo-id", "0", "--seed", "0",
        ], catch_exceptions=False)
        assert result.exit_code == 0, result.output
        assert (out / "compare_demo0.csv").exists()
