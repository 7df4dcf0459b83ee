"""Constraint inference from continuous demonstrations.

Each demonstration is projected onto the hypothesis regions it passes
through, and onto its own fixed-horizon planning problem on the tabular
MDP. Candidate regions violated by any demonstration are infeasible;
the rest are ranked by how much adding the region would concentrate the
trajectory distribution onto what was actually demonstrated, i.e. by the
dataset log-likelihood gain  sum_j -log(1 - v_ij)  where v_ij is the
probability that an unconstrained trajectory for demonstration j's task
would have entered region i.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .dynamics import ContinuousTrajectory
from .gridmdp import Box, HypothesisSet, TabularMdp, cell_of, membership
from .maxent import (
    GoalUnreachableError,
    PlanningProblem,
    Reward,
    backward_messages,
    control_penalty,
    forward_pass,
    soft_policy,
)

PROB_CLAMP = 1e-12


@dataclass(eq=False)
class Demonstration:
    """One observed continuous trajectory with its task endpoints."""

    trajectory: ContinuousTrajectory
    start: np.ndarray
    goal: np.ndarray | Box
    demo_id: int = 0

    def __post_init__(self):
        self.start = np.asarray(self.start, dtype=float)
        gap = np.abs(self.trajectory.states[0] - self.start)
        if gap.max() > 1e-6:
            raise ValueError("trajectory does not begin at the declared start")


def demo_violations(demo: Demonstration, hypotheses: HypothesisSet) -> np.ndarray:
    """(H,) bits: regions any trajectory sample passes through."""
    return membership(hypotheses, demo.trajectory.states).any(axis=0)


def feasible_set(profiles: np.ndarray) -> np.ndarray:
    """Regions violated by no demonstration; profiles is (N, H) bool."""
    profiles = np.atleast_2d(np.asarray(profiles, dtype=bool))
    if profiles.shape[0] == 0:
        raise ValueError("need at least one demonstration")
    return ~profiles.any(axis=0)


def rank_constraints(
    violation_prob: np.ndarray, feasible: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Score and order feasible regions.

    violation_prob is (N, H): per demonstration, the probability that an
    unconstrained max-ent trajectory for that task enters each region.
    Returns (scores, ranking, ranks): scores is the per-region likelihood
    gain, ranking lists feasible region indices best-first (ties broken
    by lower index), ranks holds dense 1-based positions with -1 on
    infeasible regions.
    """
    violation_prob = np.atleast_2d(np.asarray(violation_prob, dtype=float))
    clipped = np.minimum(violation_prob, 1.0 - PROB_CLAMP)
    scores = -np.log1p(-clipped).sum(axis=0)

    mismatched = feasible & (violation_prob >= 1.0 - PROB_CLAMP).any(axis=0)
    if mismatched.any():
        warnings.warn(
            "regions predicted certain to be violated were never entered by "
            f"any demonstration (indices {np.where(mismatched)[0].tolist()}); "
            "the tabular model likely mismatches the demonstrations",
            stacklevel=2,
        )
    if not feasible.any():
        warnings.warn("every candidate region is violated by some demonstration",
                      stacklevel=2)

    order = np.lexsort((np.arange(scores.size), -scores))
    ranking = order[feasible[order]]
    ranks = np.full(scores.size, -1, dtype=np.int64)
    ranks[ranking] = np.arange(1, ranking.size + 1)
    return scores, ranking, ranks


def posterior(prior: float, violation_probs) -> float:
    """Probability the top candidate is a real constraint after observing
    demonstrations that all avoid it.

    Avoiding by coincidence has probability prod_j (1 - v_j) under the
    unconstrained model, while a real constraint forces avoidance, so
    Bayes' rule gives  p / (p + (1 - p) * prod_j (1 - v_j)).
    """
    if not 0.0 < prior < 1.0:
        raise ValueError("prior must lie strictly inside (0, 1)")
    v = np.asarray(list(violation_probs), dtype=float)
    if v.size and (v.min() < 0.0 or v.max() > 1.0):
        raise ValueError("violation probabilities must lie in [0, 1]")
    coincidence = np.prod(1.0 - v) if v.size else 1.0
    return float(prior / (prior + (1.0 - prior) * coincidence))


def distribution_distance(violation_prob: np.ndarray, profiles: np.ndarray) -> float:
    """L1 gap between model-expected and observed violation frequencies."""
    violation_prob = np.atleast_2d(np.asarray(violation_prob, dtype=float))
    profiles = np.atleast_2d(np.asarray(profiles, dtype=bool))
    if violation_prob.shape[0] == 0:
        raise ValueError("need at least one demonstration")
    if violation_prob.shape != profiles.shape:
        raise ValueError("violation probabilities and profiles must align")
    expected = violation_prob.mean(axis=0)
    observed = profiles.mean(axis=0)
    return float(np.abs(expected - observed).sum())


def goal_cells(mdp: TabularMdp, goal: np.ndarray | Box) -> np.ndarray:
    """Flat cells whose centers satisfy the goal (a point maps to one cell)."""
    if isinstance(goal, Box):
        cells = np.where(goal.contains(mdp.cell_centers))[0]
        if cells.size == 0:
            raise ValueError("goal box contains no cell centers")
        return cells
    cell = cell_of(mdp.grid, np.asarray(goal, dtype=float))
    if cell < 0:
        raise ValueError(f"goal state {np.asarray(goal).tolist()} is out of bounds")
    return np.array([cell], dtype=np.int64)


def plan_for_demo(
    mdp: TabularMdp,
    demo: Demonstration,
    reward: Reward = control_penalty,
    baseline: np.ndarray | None = None,
    horizon: int | None = None,
) -> PlanningProblem:
    """Planning problem matching one demonstration's task on the grid."""
    start = cell_of(mdp.grid, demo.start)
    if start < 0:
        raise ValueError(f"demo {demo.demo_id}: start state out of bounds")
    if horizon is None:
        horizon = int(round(demo.trajectory.duration / mdp.dt))
    return PlanningProblem(
        mdp=mdp,
        horizon=horizon,
        start=start,
        goal=goal_cells(mdp, demo.goal),
        reward=reward,
        baseline=baseline,
    )


def demo_violation_probability(
    mdp: TabularMdp,
    demo: Demonstration,
    reward: Reward = control_penalty,
    baseline: np.ndarray | None = None,
    horizon: int | None = None,
) -> np.ndarray:
    """(H,) end-of-horizon violation probabilities for the demo's task."""
    problem = plan_for_demo(mdp, demo, reward, baseline, horizon)
    messages = backward_messages(problem)
    policy = soft_policy(problem, messages)
    return forward_pass(problem, policy).violation_prob[:, -1]


@dataclass(eq=False)
class InferenceReport:
    """Aggregated inference output over one demonstration set."""

    feasible: np.ndarray  # (H,) bool
    profiles: np.ndarray  # (N, H) bool
    violation_prob: np.ndarray  # (N, H)
    scores: np.ndarray  # (H,)
    ranking: np.ndarray  # feasible indices, best first
    ranks: np.ndarray  # (H,), -1 where infeasible
    posterior: float | None
    demo_ids: list = field(default_factory=list)
    skipped: list = field(default_factory=list)

    @property
    def top(self) -> int | None:
        return int(self.ranking[0]) if self.ranking.size else None

    def to_csv(self, path, meta: dict | None = None) -> None:
        """Flat CSV: region index, feasibility, score, rank, and the
        per-demonstration violation probabilities."""
        n = self.violation_prob.shape[0]
        with open(path, "w", newline="") as f:
            if meta:
                f.write("# " + " ".join(f"{k}={v}" for k, v in meta.items()) + "\n")
            writer = csv.writer(f)
            writer.writerow(
                ["hypothesis", "feasible", "score", "rank"]
                + [f"violation_prob_{self.demo_ids[j] if self.demo_ids else j}"
                   for j in range(n)]
            )
            for i in range(self.scores.size):
                writer.writerow(
                    [i, int(self.feasible[i]), repr(float(self.scores[i])),
                     int(self.ranks[i])]
                    + [repr(float(v)) for v in self.violation_prob[:, i]]
                )

    def summary(self, k: int = 10) -> str:
        lines = [
            f"{self.profiles.shape[0]} demonstrations, "
            f"{self.feasible.sum()} of {self.feasible.size} regions feasible"
        ]
        if self.skipped:
            lines.append(f"skipped demonstrations (grid-unreachable): {self.skipped}")
        lines.append("rank  region  score")
        for i in self.ranking[:k]:
            lines.append(f"{self.ranks[i]:>4}  {i:>6}  {self.scores[i]:.6f}")
        if self.posterior is not None and self.ranking.size:
            lines.append(
                f"posterior that region {self.top} is a real constraint: "
                f"{self.posterior:.6f}"
            )
        return "\n".join(lines)


class ConstraintInference(BaseEstimator):
    """Infer the most likely keep-out region from demonstrations.

    Follows the scikit-learn estimator protocol: construct with the model
    configuration, then ``fit`` a list of :class:`Demonstration`. The MDP's
    violation tensor must have been built against ``hypotheses``.

    Parameters
    ----------
    mdp : TabularMdp
        Discretized dynamics with per-transition violation bitsets.
    hypotheses : HypothesisSet
        Candidate regions; indices match the MDP's violation axis.
    reward : callable or (M, W) ndarray, default squared-control penalty
        Demonstrator reward per unit time.
    baseline : (H,) bool ndarray, optional
        Regions already known to be constrained.
    prior : float, default 0.5
        Prior probability that the top-ranked region is a real constraint.
    horizon : int, optional
        Planning steps per demonstration; defaults to each demonstration's
        duration divided by the MDP interval.
    on_unreachable : {"raise", "skip"}, default "raise"
        Whether demonstrations whose start/goal cannot be connected on the
        grid abort the fit or are dropped (and recorded in the report).

    Attributes
    ----------
    feasible_ : (H,) bool ndarray
    violation_prob_ : (N, H) ndarray
    scores_ : (H,) ndarray
    ranking_ : ndarray of feasible region indices, best first
    ranks_ : (H,) int ndarray, -1 where infeasible
    posterior_ : float or None
    report_ : InferenceReport
    """

    def __init__(
        self,
        mdp: TabularMdp,
        hypotheses: HypothesisSet,
        reward: Reward = control_penalty,
        baseline: np.ndarray | None = None,
        prior: float = 0.5,
        horizon: int | None = None,
        on_unreachable: str = "raise",
    ):
        self.mdp = mdp
        self.hypotheses = hypotheses
        self.reward = reward
        self.baseline = baseline
        self.prior = prior
        self.horizon = horizon
        self.on_unreachable = on_unreachable

    def fit(self, demos, y=None):
        if len(self.hypotheses) != self.mdp.n_hypotheses:
            raise ValueError("hypothesis set does not match the MDP violation axis")
        if len(demos) == 0:
            raise ValueError("need at least one demonstration")
        if self.on_unreachable not in ("raise", "skip"):
            raise ValueError("on_unreachable must be 'raise' or 'skip'")

        profiles, probs, ids, skipped = [], [], [], []
        for demo in demos:
            try:
                v = demo_violation_probability(
                    self.mdp, demo, self.reward, self.baseline, self.horizon
                )
            except GoalUnreachableError:
                if self.on_unreachable == "raise":
                    raise
                skipped.append(demo.demo_id)
                continue
            probs.append(v)
            profiles.append(demo_violations(demo, self.hypotheses))
            ids.append(demo.demo_id)
        if not probs:
            raise GoalUnreachableError("no demonstration is representable on the grid")

        self.violation_profiles_ = np.array(profiles)
        self.violation_prob_ = np.array(probs)
        self.feasible_ = feasible_set(self.violation_profiles_)
        self.scores_, self.ranking_, self.ranks_ = rank_constraints(
            self.violation_prob_, self.feasible_
        )
        if self.ranking_.size:
            self.posterior_ = posterior(
                self.prior, self.violation_prob_[:, self.ranking_[0]]
            )
        else:
            self.posterior_ = None
        self.report_ = InferenceReport(
            feasible=self.feasible_,
            profiles=self.violation_profiles_,
            violation_prob=self.violation_prob_,
            scores=self.scores_,
            ranking=self.ranking_,
            ranks=self.ranks_,
            posterior=self.posterior_,
            demo_ids=ids,
            skipped=skipped,
        )
        return self

    def _check_fitted(self):
        if not hasattr(self, "report_"):
            raise NotFittedError("call fit before querying the inference result")

    def top(self, k: int = 1) -> np.ndarray:
        """Indices of the k most likely constraint regions."""
        self._check_fitted()
        return self.ranking_[:k]
