"""Config-driven experiment runners with plot-ready CSV output.

Every runner is reproducible bit-for-bit from (config, seed): randomness
flows through explicitly derived generators, floats are serialized with
round-trip repr, and CSV headers carry the config hash and seed.
"""

from __future__ import annotations

import csv
import time
import warnings
from itertools import product
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .demogen import generate_demos, read_demos
from .dynamics import normalized_distance, rollout
from .gridmdp import build_or_load, cell_of, center_of
from .inference import (
    ConstraintInference,
    demo_violation_probability,
    demo_violations,
    distribution_distance,
    feasible_set,
    posterior,
    rank_constraints,
)
from .maxent import (
    GoalUnreachableError,
    PlanningProblem,
    backward_messages,
    sample_trajectory,
    soft_policy,
)


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (np.integer,)):
        return str(int(value))
    return str(value)


def write_csv(path, meta: dict, header: list, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        f.write("# " + " ".join(f"{k}={v}" for k, v in meta.items()) + "\n")
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])
    return path


def _meta(config: ExperimentConfig, **extra) -> dict:
    meta = {"config": config.config_hash(), "seed": config.seed,
            "system": config.system.name}
    meta.update(extra)
    return meta


def acquire_demos(config: ExperimentConfig, threads=None):
    """Generate (or ingest) the demonstration set named by the config.

    With ``bidirectional`` generation, pairs are drawn alternately from
    (bounds -> goal_bounds) and the swapped corridor so demonstrations
    traverse the task region in both directions.
    """
    d = config.demos
    if d.source != "generate":
        demos = read_demos(d.source, config.system)
        if config.n_demos is not None:
            demos = demos[: config.n_demos]
        return demos, []

    kwargs = dict(
        horizon=config.horizon,
        dt_sim=d.dt_sim,
        goal_tolerance=d.goal_tolerance,
        restarts=d.restarts,
        max_iters=d.max_iters,
        init_scale=d.init_scale,
        terminal_weight=d.terminal_weight,
        penalty_weight=d.penalty_weight,
        penalty_margin=d.penalty_margin,
        goal_box=d.goal_box,
        threads=threads,
    )
    if d.bidirectional:
        half = (d.pairs + 1) // 2
        fwd, rec_f = generate_demos(
            config.system, config.true_constraint, half, seed=config.seed,
            bounds=d.bounds, goal_bounds=d.goal_bounds, **kwargs,
        )
        bwd, rec_b = generate_demos(
            config.system, config.true_constraint, d.pairs - half,
            seed=config.seed + 1000,
            bounds=d.goal_bounds, goal_bounds=d.bounds, **kwargs,
        )
        demos = [demo for pair in zip(fwd, bwd) for demo in pair]
        demos += fwd[len(bwd):] + bwd[len(fwd):]
        records = rec_f + rec_b
    else:
        demos, records = generate_demos(
            config.system, config.true_constraint, d.pairs, seed=config.seed,
            bounds=d.bounds, goal_bounds=d.goal_bounds, **kwargs,
        )
    if config.n_demos is not None:
        demos = demos[: config.n_demos]
    for i, demo in enumerate(demos):
        demo.demo_id = i
    return demos, records


def build_model(config: ExperimentConfig, cells=None, dt=None,
                include_constraint=False, cache_dir=None):
    """Build (or load) the tabular MDP for one hyperparameter combination.

    With ``include_constraint`` the true keep-out box is appended to the
    hypothesis set and marked as a baseline (known) constraint, which
    forbids every transition that traverses it.
    """
    hypotheses = config.hypotheses()
    baseline = None
    if include_constraint:
        if config.true_constraint is None:
            raise ValueError("config declares no true constraint")
        hypotheses, extra = hypotheses.extended(config.true_constraint)
        baseline = np.zeros(len(hypotheses), dtype=bool)
        baseline[extra] = True
    mdp = build_or_load(
        config.system, config.grid(cells), config.actions(), dt or config.dt,
        hypotheses, config.substeps, cache_dir=cache_dir,
    )
    return mdp, hypotheses, baseline


def demo_probabilities(mdp, demos, baseline=None):
    """Per-demo end-horizon violation probabilities, skipping tasks the
    grid cannot represent. Returns (probs, used demo list, skipped ids)."""
    probs, used, skipped = [], [], []
    for demo in demos:
        try:
            probs.append(demo_violation_probability(mdp, demo, baseline=baseline))
        except (GoalUnreachableError, ValueError):
            skipped.append(demo.demo_id)
            continue
        used.append(demo)
    return np.array(probs), used, skipped


def _sample_pairs(config: ExperimentConfig, n_pairs, rng):
    bounds = (config.demos.bounds if config.demos.bounds is not None
              else config.system.state_bounds())
    box = config.true_constraint
    pairs = []
    while len(pairs) < n_pairs:
        start = rng.uniform(bounds[:, 0], bounds[:, 1])
        goal = rng.uniform(bounds[:, 0], bounds[:, 1])
        if box is not None and (box.contains(start) or box.contains(goal)):
            continue
        pairs.append((start, goal))
    return pairs


def run_accuracy_experiment(config: ExperimentConfig, out_dir, cache_dir=None,
                            pairs=None):
    """Fig-3-style dynamics accuracy: execute a sampled grid policy on the
    continuous system and measure the normalized final-state error."""
    rng = np.random.default_rng([config.seed, 11])
    if pairs is None:
        pairs = _sample_pairs(config, config.accuracy_pairs, rng)
    rows = []
    for cells, dt in product(config.accuracy_cells, config.accuracy_dts):
        mdp, hypotheses, baseline = build_model(
            config, cells=cells, dt=dt, include_constraint=True,
            cache_dir=cache_dir,
        )
        horizon = int(round(config.horizon / dt))
        errors, skipped = [], 0
        for i, (start, goal) in enumerate(pairs):
            start_cell = cell_of(mdp.grid, start)
            goal_cell = cell_of(mdp.grid, goal)
            if start_cell < 0 or goal_cell < 0:
                skipped += 1
                continue
            problem = PlanningProblem(
                mdp=mdp, horizon=horizon, start=start_cell, goal=[goal_cell],
                baseline=baseline,
            )
            try:
                policy = soft_policy(problem, backward_messages(problem))
            except GoalUnreachableError:
                skipped += 1
                continue
            sampled = sample_trajectory(
                problem, policy, np.random.default_rng([config.seed, 13, i])
            )
            controls = mdp.actions[sampled.actions]
            executed = rollout(config.system, center_of(mdp.grid, start_cell),
                               controls, dt, config.substeps)
            errors.append(normalized_distance(config.system,
                                              executed.states[-1], goal))
        mean_error = float(np.mean(errors)) if errors else float("nan")
        rows.append((int(np.prod(cells)), dt, mean_error, len(errors), skipped))
    path = write_csv(
        Path(out_dir) / "accuracy.csv",
        _meta(config, units="error=span-normalized euclidean distance, dt=s"),
        ["cells", "dt", "mean_goal_error", "pairs_used", "pairs_skipped"],
        rows,
    )
    return rows, path


def run_ranking_experiment(config: ExperimentConfig, out_dir, cache_dir=None,
                           threads=None, demos=None):
    """Fig-5-style ranking: mean rank of the true constraint as the number
    of demonstrations grows, averaged over shuffles of the demo order."""
    if config.true_constraint is None:
        raise ValueError("ranking experiment needs a true constraint")
    if demos is None:
        demos, _ = acquire_demos(config, threads=threads)
    mdp, hypotheses, _ = build_model(config, cache_dir=cache_dir)
    truth = hypotheses.find_region(config.true_constraint)

    probs, used, skipped = demo_probabilities(mdp, demos)
    if not used:
        raise RuntimeError(
            f"no demonstration task is representable on the grid "
            f"(all {len(demos)} skipped); cells={config.grid_cells} dt={config.dt}"
        )
    profiles = np.array([demo_violations(d, hypotheses) for d in used])
    assert not profiles[:, truth].any(), \
        "accepted demonstrations must never violate the true constraint"

    n_used = len(used)
    n_max = min(config.max_demos_ranked, n_used)
    rng = np.random.default_rng([config.seed, 17])
    ranks = np.zeros((config.shuffles, n_max), dtype=np.int64)
    with warnings.catch_warnings():
        # subset probes repeat the same model-mismatch warnings many times;
        # the full-set inference still surfaces them
        warnings.simplefilter("ignore", UserWarning)
        for s in range(config.shuffles):
            perm = rng.permutation(n_used)
            for n in range(1, n_max + 1):
                sub = perm[:n]
                _, _, rank_vec = rank_constraints(probs[sub],
                                                  feasible_set(profiles[sub]))
                ranks[s, n - 1] = rank_vec[truth]
    rows = [
        (n, float(ranks[:, n - 1].mean()), int(ranks[:, n - 1].min()),
         int(ranks[:, n - 1].max()), config.shuffles, n_used, len(skipped))
        for n in range(1, n_max + 1)
    ]
    path = write_csv(
        Path(out_dir) / "ranking.csv",
        _meta(config, true_region=truth, units="rank=1 is most likely"),
        ["n_demos", "mean_rank", "min_rank", "max_rank", "shuffles",
         "demos_used", "demos_skipped"],
        rows,
    )
    return rows, path


def run_distance_experiment(config: ExperimentConfig, out_dir, cache_dir=None,
                            threads=None, demos=None):
    """Fig-4-style gap between model-expected and observed violations,
    averaged over single-demonstration trials."""
    if demos is None:
        demos, _ = acquire_demos(config, threads=threads)
    demos = demos[: config.distance_trials]
    plain_hypotheses = config.hypotheses()
    n_regions = len(plain_hypotheses)
    rows = []
    for cells, dt in product(config.distance_cells, config.distance_dts):
        mdp, _, baseline = build_model(config, cells=cells, dt=dt,
                                       include_constraint=True,
                                       cache_dir=cache_dir)
        probs, used, skipped = demo_probabilities(mdp, demos, baseline=baseline)
        distances = [
            distribution_distance(
                probs[j, None, :n_regions],
                demo_violations(demo, plain_hypotheses)[None, :],
            )
            for j, demo in enumerate(used)
        ]
        mean_distance = float(np.mean(distances)) if distances else float("nan")
        rows.append((int(np.prod(cells)), dt, mean_distance, len(used),
                     len(skipped)))
    path = write_csv(
        Path(out_dir) / "distance.csv",
        _meta(config, units="distance=L1 over regions, dt=s"),
        ["cells", "dt", "mean_distance", "trials_used", "trials_skipped"],
        rows,
    )
    return rows, path


def run_inference(config: ExperimentConfig, out_dir, cache_dir=None,
                  threads=None, demos=None):
    """Full inference on the configured demo set; writes report and summary."""
    out_dir = Path(out_dir)
    records = []
    if demos is None:
        demos, records = acquire_demos(config, threads=threads)
    mdp, hypotheses, _ = build_model(config, cache_dir=cache_dir)
    estimator = ConstraintInference(mdp, hypotheses, prior=config.prior,
                                    on_unreachable="skip")
    started = time.perf_counter()
    estimator.fit(demos)
    elapsed = time.perf_counter() - started
    report = estimator.report_
    report.to_csv(out_dir / "report.csv",
                  meta=_meta(config, units="score=log-likelihood gain"))
    (out_dir / "summary.txt").write_text(report.summary() + "\n")
    if records:
        write_csv(
            out_dir / "pairs.csv",
            _meta(config, units="goal_error=span-normalized distance"),
            ["pair", "accepted", "reason", "goal_error", "cost"],
            [(r.pair_index, int(r.accepted), r.reason, r.goal_error, r.cost)
             for r in records],
        )
    return report, elapsed


def run_tip_experiment(config: ExperimentConfig, out_dir, cache_dir=None,
                       threads=None):
    """Constraint inference on the telescoping model; reports whether the
    top-2 regions geometrically overlap the misaligned true box."""
    out_dir = Path(out_dir)
    demos, records = acquire_demos(config, threads=threads)
    mdp, hypotheses, _ = build_model(config, cache_dir=cache_dir)
    estimator = ConstraintInference(mdp, hypotheses, prior=config.prior,
                                    on_unreachable="skip")
    started = time.perf_counter()
    estimator.fit(demos)
    elapsed = time.perf_counter() - started
    report = estimator.report_
    report.to_csv(out_dir / "report.csv",
                  meta=_meta(config, units="score=log-likelihood gain"))
    rows = []
    for i in report.ranking[:2]:
        region = hypotheses.region(int(i))
        rows.append((
            int(report.ranks[i]), int(i),
            region.lower[0], region.upper[0], region.lower[1], region.upper[1],
            int(region.intersects(config.true_constraint)),
        ))
    path = write_csv(
        out_dir / "tip_top2.csv",
        _meta(config, inference_seconds=round(elapsed, 3),
              units="theta=rad, length=m"),
        ["rank", "region", "theta_lower", "theta_upper", "length_lower",
         "length_upper", "intersects_truth"],
        rows,
    )
    (out_dir / "summary.txt").write_text(report.summary() + "\n")
    return report, rows, elapsed


def run_confidence_report(config: ExperimentConfig, out_dir, cache_dir=None,
                          threads=None, demos=None):
    """Posterior of the top-ranked region as demonstrations accumulate."""
    if demos is None:
        demos, _ = acquire_demos(config, threads=threads)
    mdp, hypotheses, _ = build_model(config, cache_dir=cache_dir)
    probs, used, skipped = demo_probabilities(mdp, demos)
    if not used:
        raise RuntimeError("no demonstration is representable on the grid")
    profiles = np.array([demo_violations(d, hypotheses) for d in used])
    _, ranking, _ = rank_constraints(probs, feasible_set(profiles))
    top = int(ranking[0])
    rows = [(n, posterior(config.prior, probs[:n, top]), top)
            for n in range(len(used) + 1)]
    path = write_csv(
        Path(out_dir) / "confidence.csv",
        _meta(config, prior=config.prior, units="posterior=probability"),
        ["n_demos", "posterior", "region"],
        rows,
    )
    return rows, path


def compare_trajectories(config: ExperimentConfig, demo_id: int, seed: int,
                         out_dir, cache_dir=None, demos=None):
    """Side-by-side dump of one continuous demonstration and one discrete
    trajectory sampled from the true-constraint MDP for the same task."""
    if demos is None:
        demos, _ = acquire_demos(config)
    demo = next(d for d in demos if d.demo_id == demo_id)
    mdp, hypotheses, baseline = build_model(config, include_constraint=True,
                                            cache_dir=cache_dir)
    plain_hypotheses = config.hypotheses()
    n_regions = len(plain_hypotheses)

    start_cell = cell_of(mdp.grid, demo.start)
    horizon = int(round(demo.trajectory.duration / mdp.dt))
    from .inference import goal_cells

    problem = PlanningProblem(
        mdp=mdp, horizon=horizon, start=start_cell,
        goal=goal_cells(mdp, demo.goal), baseline=baseline,
    )
    policy = soft_policy(problem, backward_messages(problem))
    sampled = sample_trajectory(problem, policy,
                                np.random.default_rng([seed, demo_id]))

    def bitset(mask):
        return "|".join(str(i) for i in np.where(mask[:n_regions])[0])

    n_state = config.system.n_states
    state_cols = [f"x{k}_{label}" for k, label in
                  enumerate(config.system.state_labels)]
    rows = []
    for s in range(demo.trajectory.states.shape[0]):
        rows.append(["demo", s, s * demo.trajectory.dt_sim]
                    + list(demo.trajectory.states[s]) + ["", ""])
    for t in range(horizon + 1):
        center = center_of(mdp.grid, int(sampled.cells[t]))
        action = int(sampled.actions[t]) if t < horizon else ""
        rows.append(["mdp", t, t * mdp.dt] + list(center)
                    + [int(sampled.cells[t]), action])
    rows.append(["demo_violations", "", "",
                 *[""] * n_state, "", bitset(demo_violations(demo, plain_hypotheses))])
    rows.append(["mdp_violations", "", "", *[""] * n_state, "",
                 bitset(sampled.violated)])
    path = write_csv(
        Path(out_dir) / f"compare_demo{demo_id}.csv",
        _meta(config, demo=demo_id, sample_seed=seed,
              units="t=s, states in system units"),
        ["kind", "step", "t", *state_cols, "cell", "action_or_bitset"],
        rows,
    )
    return sampled, path
