"""Acceptance gate: one test per acceptance criterion.

Each test prints a single [PASS]/[FAIL] line (run with ``-s`` to stream
them). Two groups of criteria pin the pendulum experiments to dt = 0.1;
on a 20x20 grid the velocity increment over one interval is bounded by
3 * dt = 0.3, exactly the half-height of a velocity row, so no transition
built from a cell center can ever change velocity rows and nearly every
task is unrepresentable at that dt (see notes in the repo configs). Those
tests run the stated configuration faithfully and fail; the `_mobile_dt`
twins demonstrate the same claims at the smallest time step where the
grid physics can move.
"""

import warnings
from pathlib import Path

import numpy as np
import pytest

from mlci import (
    PlanningProblem,
    backward_messages,
    forward_pass,
    integrate_segment,
    pendulum,
    posterior,
    soft_policy,
)
from mlci import experiments
from mlci.config import load_config
from mlci.inference import ConstraintInference, demo_violations
from conftest import reachable_goal
from oracles import enumerate_paths, random_small_mdp

warnings.filterwarnings("ignore", message=".*never entered.*")

CONFIG_DIR = Path(__file__).parent.parent / "configs"


def _report(name, ok, detail=""):
    print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    if not ok:
        pytest.fail(f"{name}: {detail}")


@pytest.fixture(scope="module")
def cache_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("mdp_cache")


@pytest.fixture(scope="module")
def c1_config():
    return load_config(CONFIG_DIR / "pendulum_c1.yaml")


@pytest.fixture(scope="module")
def c2_config():
    return load_config(CONFIG_DIR / "pendulum_c2.yaml")


@pytest.fixture(scope="module")
def sweep_config():
    return load_config(CONFIG_DIR / "pendulum_sweep.yaml")


@pytest.fixture(scope="module")
def c1_demos(c1_config):
    demos, records = experiments.acquire_demos(c1_config)
    return demos, records


@pytest.fixture(scope="module")
def c2_demos(c2_config):
    demos, records = experiments.acquire_demos(c2_config)
    return demos, records


@pytest.fixture(scope="module")
def sweep_demos(sweep_config):
    demos, records = experiments.acquire_demos(sweep_config)
    return demos, records


def _at_dt(config, dt):
    import copy

    out = copy.copy(config)
    out.dt = dt
    return out


class TestOracleEquivalence:
    def test_forward_pass_matches_enumeration(self):
        """>= 50 random small MDPs: end-horizon violation probabilities and
        the start partition value match exhaustive enumeration to 1e-10."""
        rng = np.random.default_rng(90210)
        checked = 0
        while checked < 50:
            mdp, reward = random_small_mdp(rng)
            horizon = int(rng.integers(1, 7))
            start = int(rng.integers(0, mdp.n_states))
            goal = rng.choice(mdp.n_states, size=rng.integers(1, 3), replace=False)
            oracle = enumerate_paths(mdp, reward, horizon, start, goal)
            if oracle["z"] == 0.0:
                continue
            problem = PlanningProblem(mdp=mdp, horizon=horizon, start=start,
                                      goal=goal, reward=reward)
            messages = backward_messages(problem)
            z = np.exp(messages.log_values[0, start])
            assert z == pytest.approx(oracle["z"], rel=1e-10)
            policy = soft_policy(problem, messages)
            result = forward_pass(problem, policy)
            assert result.violation_prob[:, -1] == pytest.approx(
                oracle["violation_prob"], rel=1e-10, abs=1e-12)
            assert z * (1.0 - result.violation_prob[:, -1]) == pytest.approx(
                oracle["z_avoiding"], rel=1e-10, abs=1e-12)
            checked += 1
        _report("oracle equivalence", True,
                f"{checked} random MDPs match enumeration within 1e-10")


class TestMaxentInvariants:
    def test_invariant_suite(self, c1_config, cache_dir):
        mdp, _, _ = experiments.build_model(c1_config, cache_dir=cache_dir)
        horizon = c1_config.planning_steps
        start = 188  # moderate-velocity cell near theta = pi
        goal = reachable_goal(mdp, start, horizon, prefer=[4.5, 0.3])
        problem = PlanningProblem(mdp=mdp, horizon=horizon, start=start,
                                  goal=[goal])
        messages = backward_messages(problem)
        policy = soft_policy(problem, messages)
        result = forward_pass(problem, policy)

        occ_drift = np.abs(result.occupancy.sum(axis=1) - 1.0).max()
        assert occ_drift < 1e-9
        assert np.all(np.diff(result.violation_prob, axis=1) >= 0.0)
        off_goal = np.delete(result.occupancy[-1], problem.goal)
        assert off_goal.max() == 0.0

        shift = 0.7
        shifted = PlanningProblem(
            mdp=mdp, horizon=horizon, start=start, goal=[goal],
            reward=problem.reward_matrix() + shift)
        messages2 = backward_messages(shifted)
        policy2 = soft_policy(shifted, messages2)
        result2 = forward_pass(shifted, policy2)
        gain = messages2.log_values[0, start] - messages.log_values[0, start]
        assert gain == pytest.approx(shift * horizon * mdp.dt, abs=1e-9)
        pi_drift = np.abs(policy2.probs - policy.probs).max()
        phi_drift = np.abs(result2.violation_prob - result.violation_prob).max()
        assert pi_drift < 1e-12
        assert phi_drift < 1e-12
        _report("max-ent invariant suite", True,
                f"occupancy drift {occ_drift:.1e}, shift drift "
                f"{max(pi_drift, phi_drift):.1e}")


class TestIntegratorOrder:
    def test_substep_halving_reduces_error_by_eight(self):
        system = pendulum()
        x0 = np.array([2.0, 0.5])
        u = np.array([0.4])
        reference = integrate_segment(system, x0, u, 1.0, 1600)[-1]
        errs = {s: np.linalg.norm(integrate_segment(system, x0, u, 1.0, s)[-1]
                                  - reference)
                for s in (8, 16)}
        factor = errs[8] / errs[16]
        assert factor >= 8.0
        _report("integrator order", True,
                f"halving substeps shrinks error by {factor:.1f}x (>= 8)")


def _ranking_mean_rank(config, demos, out_dir, cache_dir):
    rows, _ = experiments.run_ranking_experiment(
        config, out_dir, cache_dir=cache_dir, demos=demos)
    last = rows[-1]
    return last  # (N, mean, min, max, shuffles, used, skipped)


class TestPendulumRanking:
    """Fig-5 reproduction: true constraint mean rank <= 5 at N = 9."""

    def _run_stated(self, config, demos, records, tmp_path, cache_dir, tag):
        name = f"pendulum ranking as specified ({tag}, dt=0.1)"
        assert len(records) == config.demos.pairs, "pair log incomplete"
        rejected = sum(1 for r in records if not r.accepted)
        try:
            row = _ranking_mean_rank(_at_dt(config, 0.1), demos, tmp_path,
                                     cache_dir)
        except RuntimeError as err:
            _report(name, False,
                    f"{err} (velocity rows are immobile at dt=0.1 on a 20x20 "
                    f"grid: |dtheta_dot| < 3*0.1 = row half-height; "
                    f"{rejected} pairs filtered during generation)")
        n, mean_rank = row[0], row[1]
        ok = n == 9 and mean_rank <= 5.0
        _report(name, ok, f"mean rank {mean_rank:.2f} at N={n} "
                          f"({row[4]} shuffles)")

    def test_c1_as_specified(self, c1_config, c1_demos, tmp_path, cache_dir):
        demos, records = c1_demos
        self._run_stated(c1_config, demos, records, tmp_path, cache_dir, "C1")

    def test_c2_as_specified(self, c2_config, c2_demos, tmp_path, cache_dir):
        demos, records = c2_demos
        self._run_stated(c2_config, demos, records, tmp_path, cache_dir, "C2")

    def test_c1_mobile_dt(self, c1_config, c1_demos, tmp_path, cache_dir):
        demos, records = c1_demos
        row = _ranking_mean_rank(c1_config, demos, tmp_path, cache_dir)
        n, mean_rank = row[0], row[1]
        rejected = sum(1 for r in records if not r.accepted)
        ok = n == 9 and mean_rank <= 5.0
        _report(f"pendulum ranking (C1, dt={c1_config.dt})", ok,
                f"mean rank {mean_rank:.2f} at N={n} over {row[4]} shuffles; "
                f"{rejected}/{len(records)} pairs filtered")

    def test_c2_mobile_dt(self, c2_config, c2_demos, tmp_path, cache_dir):
        demos, records = c2_demos
        row = _ranking_mean_rank(c2_config, demos, tmp_path, cache_dir)
        n, mean_rank = row[0], row[1]
        rejected = sum(1 for r in records if not r.accepted)
        ok = n == 9 and mean_rank <= 5.0
        _report(f"pendulum ranking (C2, dt={c2_config.dt})", ok,
                f"mean rank {mean_rank:.2f} at N={n} over {row[4]} shuffles; "
                f"{rejected}/{len(records)} pairs filtered")


class TestTopConstraintNeverViolated:
    def test_every_fit_respects_feasibility(self, c1_config, c1_demos,
                                            c2_config, c2_demos, cache_dir):
        checked = 0
        for config, (demos, _) in ((c1_config, c1_demos), (c2_config, c2_demos)):
            mdp, hypotheses, _ = experiments.build_model(config,
                                                         cache_dir=cache_dir)
            est = ConstraintInference(mdp, hypotheses, on_unreachable="skip")
            est.fit(demos)
            for k in est.ranking_[:5]:
                assert not est.violation_profiles_[:, k].any()
            top = est.top(1)[0]
            assert not any(demo_violations(d, hypotheses)[top] for d in demos)
            checked += 1
        _report("top-ranked constraint never violated", True,
                f"exact assertion over {checked} inference runs")


class TestDistanceTrend:
    def test_as_specified_dt_01(self, sweep_config, sweep_demos, tmp_path,
                                cache_dir):
        name = "distance trend as specified (dt=0.1)"
        demos, _ = sweep_demos
        config = _at_dt(sweep_config, 0.1)
        config.distance_cells = ((10, 10), (20, 20))
        config.distance_dts = (0.1,)
        rows, _ = experiments.run_distance_experiment(
            config, tmp_path, demos=demos, cache_dir=cache_dir)
        by_cells = {r[0]: r for r in rows}
        usable = all(by_cells[c][3] >= 30 for c in (100, 400))
        if not usable:
            _report(name, False,
                    f"trials usable at 100/400 cells: "
                    f"{by_cells[100][3]}/{by_cells[400][3]} of "
                    f"{len(demos[:config.distance_trials])} (tasks are "
                    f"unrepresentable at dt=0.1; velocity rows immobile)")
        ok = by_cells[400][2] <= by_cells[100][2]
        _report(name, ok, f"mean distance 400 cells {by_cells[400][2]:.3f} "
                          f"vs 100 cells {by_cells[100][2]:.3f}")

    def test_mobile_dt(self, sweep_config, sweep_demos, tmp_path, cache_dir):
        demos, _ = sweep_demos
        config = _at_dt(sweep_config, 0.5)
        config.distance_cells = ((10, 10), (20, 20))
        config.distance_dts = (0.5,)
        rows, _ = experiments.run_distance_experiment(
            config, tmp_path, demos=demos, cache_dir=cache_dir)
        by_cells = {r[0]: r for r in rows}
        assert by_cells[100][3] >= 30 and by_cells[400][3] >= 30
        ok = by_cells[400][2] <= by_cells[100][2]
        _report("distance trend (dt=0.5)", ok,
                f"mean distance 400 cells {by_cells[400][2]:.3f} <= "
                f"100 cells {by_cells[100][2]:.3f}, "
                f"{by_cells[400][3]} single-demo trials")


class TestAccuracyTrend:
    def test_as_specified_dt_01(self, sweep_config, tmp_path, cache_dir):
        name = "accuracy trend as specified (dt=0.1)"
        config = _at_dt(sweep_config, 0.1)
        config.accuracy_cells = ((10, 10), (20, 20), (30, 30))
        config.accuracy_dts = (0.1,)
        rows, _ = experiments.run_accuracy_experiment(config, tmp_path,
                                                      cache_dir=cache_dir)
        by_cells = {r[0]: r for r in rows}
        if not all(np.isfinite(by_cells[c][2]) for c in (100, 400, 900)):
            used = {c: by_cells[c][3] for c in (100, 400, 900)}
            _report(name, False,
                    f"pairs usable per grid {used}; coarse grids have no "
                    f"representable tasks at dt=0.1 (velocity rows immobile)")
        ok = by_cells[100][2] > by_cells[400][2] > by_cells[900][2]
        _report(name, ok, f"errors {by_cells[100][2]:.3f} -> "
                          f"{by_cells[400][2]:.3f} -> {by_cells[900][2]:.3f}")

    def test_mobile_dt(self, sweep_config, tmp_path, cache_dir):
        config = _at_dt(sweep_config, 0.5)
        config.accuracy_cells = ((10, 10), (20, 20), (30, 30))
        config.accuracy_dts = (0.5,)
        rows, _ = experiments.run_accuracy_experiment(config, tmp_path,
                                                      cache_dir=cache_dir)
        by_cells = {r[0]: r for r in rows}
        errs = [by_cells[c][2] for c in (100, 400, 900)]
        assert all(np.isfinite(e) for e in errs)
        ok = errs[0] > errs[1] > errs[2]
        _report("accuracy trend (dt=0.5)", ok,
                "mean normalized goal error strictly decreases: "
                + " -> ".join(f"{e:.3f}" for e in errs))


class TestTipExperiment:
    def test_top2_intersect_truth_within_time(self, tmp_path):
        config = load_config(CONFIG_DIR / "tip.yaml")
        mdp, _, _ = experiments.build_model(config)
        assert mdp.n_states == 2500
        assert mdp.n_actions == 15
        report, rows, elapsed = experiments.run_tip_experiment(config, tmp_path)
        assert len(rows) == 2
        hits = [bool(r[6]) for r in rows]
        ok = all(hits) and elapsed <= 600.0
        _report("telescoping pendulum experiment", ok,
                f"top-2 regions {[r[1] for r in rows]} intersect truth: "
                f"{hits}; inference {elapsed:.1f}s (limit 600s); "
                f"{len(report.demo_ids)} demos used")


class TestBayesPosterior:
    def test_fixtures(self):
        assert posterior(0.5, [0.5]) == pytest.approx(2.0 / 3.0, abs=1e-12)
        assert posterior(0.5, [0.5, 0.5]) == pytest.approx(0.8, abs=1e-12)
        assert posterior(0.37, []) == 0.37
        assert posterior(0.37, [0.0, 0.0]) == pytest.approx(0.37, abs=1e-15)
        _report("bayes posterior", True,
                "2/3 and 0.8 fixtures within 1e-12; empty and zero evidence "
                "return the prior")


class TestDeterminism:
    def test_byte_identical_experiment_outputs(self, tmp_path):
        config = load_config(CONFIG_DIR / "pendulum_small.yaml")
        digests = []
        for run in ("first", "second"):
            out = tmp_path / run
            demos, _ = experiments.acquire_demos(config)
            experiments.run_ranking_experiment(config, out, demos=demos)
            experiments.run_accuracy_experiment(config, out)
            experiments.run_confidence_report(config, out, demos=demos)
            experiments.run_distance_experiment(config, out, demos=demos)
            digests.append({f.name: f.read_bytes()
                            for f in sorted(out.glob("*.csv"))})
        assert digests[0].keys() == digests[1].keys()
        same = all(digests[0][k] == digests[1][k] for k in digests[0])
        assert same
        _report("determinism", True,
                f"{len(digests[0])} CSVs byte-identical across two runs")
