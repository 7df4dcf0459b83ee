"""Maximum-entropy trajectory distribution on a tabular MDP.

For a fixed horizon, start cell and goal set, trajectories are weighted
by the exponential of their accumulated reward and conditioned on
reaching the goal at the final step. The backward recursion computes the
log partition messages, the soft policy normalizes them into stepwise
action distributions, and the forward pass propagates occupancy together
with one absorbing survival mass per hypothesis region, yielding the
probability that a trajectory has violated each region by each step.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Union

import numpy as np
from scipy.special import logsumexp

from .gridmdp import OUT_OF_BOUNDS, TabularMdp

Reward = Union[np.ndarray, Callable[[np.ndarray, np.ndarray], np.ndarray]]


class GoalUnreachableError(RuntimeError):
    """No goal-reaching trajectory exists for the given start and horizon."""


def control_penalty(x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Default reward -(u . u) per unit time; ignores the state."""
    u = np.asarray(u, dtype=float)
    return -(u * u).sum(axis=-1)


@dataclass(eq=False)
class PlanningProblem:
    """Fixed-horizon, goal-conditioned soft planning instance.

    ``reward`` is either an (M, W) matrix of per-unit-time rewards or a
    callable r(x, u) evaluated on cell centers and action values.
    ``baseline`` marks hypothesis regions treated as known constraints:
    transitions whose violation bitset touches any of them are forbidden.
    """

    mdp: TabularMdp
    horizon: int
    start: int
    goal: np.ndarray
    reward: Reward = control_penalty
    baseline: np.ndarray | None = None

    def __post_init__(self):
        m = self.mdp.n_states
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not 0 <= self.start < m:
            raise ValueError(f"start cell {self.start} outside [0, {m})")
        goal = np.unique(np.asarray(self.goal, dtype=np.int64))
        if goal.size == 0:
            raise ValueError("goal set must be nonempty")
        if goal.min() < 0 or goal.max() >= m:
            raise ValueError("goal cells outside the state space")
        self.goal = goal
        if self.baseline is not None:
            self.baseline = np.asarray(self.baseline, dtype=bool)
            if self.baseline.shape != (self.mdp.n_hypotheses,):
                raise ValueError("baseline mask must have one bit per hypothesis")

    def reward_matrix(self) -> np.ndarray:
        if isinstance(self.reward, np.ndarray):
            if self.reward.shape != self.mdp.successors.shape:
                raise ValueError("reward matrix must be (n_states, n_actions)")
            return self.reward
        centers = self.mdp.cell_centers
        actions = self.mdp.actions
        out = np.empty((centers.shape[0], actions.shape[0]))
        for a in range(actions.shape[0]):
            u = np.broadcast_to(actions[a], (centers.shape[0], actions.shape[1]))
            out[:, a] = self.reward(centers, u)
        return out

    def valid_actions(self) -> np.ndarray:
        """(M, W) mask of available, baseline-respecting transitions."""
        mask = self.mdp.successors != OUT_OF_BOUNDS
        if self.baseline is not None and self.baseline.any():
            mask = mask & ~self.mdp.violations[:, :, self.baseline].any(axis=2)
        return mask

    def step_log_weight(self) -> np.ndarray:
        """(M, W) log weight per transition; -inf where unavailable."""
        logw = self.reward_matrix() * self.mdp.dt
        return np.where(self.valid_actions(), logw, -np.inf)


@dataclass(eq=False)
class BackwardMessages:
    """log of the goal-conditioned partition messages, shape (T+1, M).

    exp(log_values[t][s]) sums exp(accumulated reward) over all valid
    trajectories from s at step t that reach the goal at step T;
    log_values[0][start] is the log partition of the whole problem.
    """

    log_values: np.ndarray

    @property
    def values(self) -> np.ndarray:
        return np.exp(self.log_values)


@dataclass(eq=False)
class SoftPolicy:
    """Stepwise action distributions, shape (T, M, W).

    Rows are all-zero exactly where no goal-reaching continuation exists.
    """

    probs: np.ndarray


@dataclass(eq=False)
class ForwardResult:
    """State occupancy under the soft policy and per-region violation
    probabilities by step: occupancy (T+1, M), violation_prob (H, T+1)."""

    occupancy: np.ndarray
    violation_prob: np.ndarray


@dataclass(eq=False)
class SampledTrajectory:
    cells: np.ndarray  # (T+1,)
    actions: np.ndarray  # (T,)
    violated: np.ndarray  # (H,) bool, union of per-step transition bitsets


def backward_messages(problem: PlanningProblem) -> BackwardMessages:
    """Goal-indicator terminal condition, log-sum-exp Bellman backups."""
    mdp = problem.mdp
    T = problem.horizon
    log_beta = np.full((T + 1, mdp.n_states), -np.inf)
    log_beta[T, problem.goal] = 0.0
    step_logw = problem.step_log_weight()
    succ = np.where(mdp.successors == OUT_OF_BOUNDS, 0, mdp.successors)
    with np.errstate(all="ignore"):
        for t in range(T - 1, -1, -1):
            cont = log_beta[t + 1][succ]
            log_beta[t] = logsumexp(step_logw + cont, axis=1)
    if not np.isfinite(log_beta[0, problem.start]):
        raise GoalUnreachableError(
            f"goal cells {problem.goal.tolist()} unreachable from start "
            f"{problem.start} in exactly {T} steps"
        )
    return BackwardMessages(log_beta)


def soft_policy(problem: PlanningProblem, messages: BackwardMessages) -> SoftPolicy:
    """Normalize backward messages into per-step action distributions."""
    mdp = problem.mdp
    T = problem.horizon
    step_logw = problem.step_log_weight()
    succ = np.where(mdp.successors == OUT_OF_BOUNDS, 0, mdp.successors)
    probs = np.zeros((T, mdp.n_states, mdp.n_actions))
    with np.errstate(all="ignore"):
        for t in range(T):
            logits = step_logw + messages.log_values[t + 1][succ]
            norm = logsumexp(logits, axis=1)
            defined = np.isfinite(norm)
            p = np.exp(logits[defined] - norm[defined, None])
            probs[t, defined] = np.where(np.isfinite(logits[defined]), p, 0.0)
    return SoftPolicy(probs)


def forward_pass(problem: PlanningProblem, policy: SoftPolicy) -> ForwardResult:
    """Propagate occupancy and per-hypothesis surviving mass.

    For each region i, mass flowing through a transition whose bitset
    contains i, or out of a state whose center lies inside i, is absorbed;
    the absorbed fraction by step t is the violation probability. The
    start mass counts as violating every region containing the start
    cell's center.
    """
    mdp = problem.mdp
    T = problem.horizon
    n, h = mdp.n_states, mdp.n_hypotheses
    absorbing = mdp.violations | mdp.center_membership[:, None, :]

    occupancy = np.zeros((T + 1, n))
    occupancy[0, problem.start] = 1.0
    violation_prob = np.zeros((h, T + 1))
    violation_prob[:, 0] = mdp.center_membership[problem.start].astype(float)

    surviving = np.zeros((n, h))
    surviving[problem.start] = 1.0 - violation_prob[:, 0]
    succ = np.where(mdp.successors == OUT_OF_BOUNDS, 0, mdp.successors)

    for t in range(T):
        p = policy.probs[t]
        flow = occupancy[t][:, None] * p
        nxt = np.zeros(n)
        np.add.at(nxt, succ.ravel(), flow.ravel())
        total = nxt.sum()
        if total <= 0.0:
            raise GoalUnreachableError(
                f"forward mass vanished at step {t + 1}; policy and problem disagree"
            )
        occupancy[t + 1] = nxt / total

        sflow = surviving[:, None, :] * p[:, :, None]  # (M, W, H)
        absorbed = np.where(absorbing, sflow, 0.0).sum(axis=(0, 1))
        violation_prob[:, t + 1] = np.minimum(violation_prob[:, t] + absorbed, 1.0)
        kept = np.where(absorbing, 0.0, sflow)
        nxt_surv = np.zeros((n, h))
        for a in range(mdp.n_actions):
            np.add.at(nxt_surv, succ[:, a], kept[:, a, :])
        surviving = nxt_surv
    return ForwardResult(occupancy, violation_prob)


def sample_trajectory(
    problem: PlanningProblem, policy: SoftPolicy, rng
) -> SampledTrajectory:
    """Draw one goal-reaching discrete trajectory; deterministic per seed."""
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    mdp = problem.mdp
    T = problem.horizon
    if policy.probs[0, problem.start].sum() == 0.0:
        raise GoalUnreachableError(
            f"policy undefined at start cell {problem.start}"
        )
    cells = np.empty(T + 1, dtype=np.int64)
    actions = np.empty(T, dtype=np.int64)
    violated = np.zeros(mdp.n_hypotheses, dtype=bool)
    s = problem.start
    cells[0] = s
    for t in range(T):
        a = rng.choice(mdp.n_actions, p=policy.probs[t, s])
        actions[t] = a
        violated |= mdp.violations[s, a]
        s = int(mdp.successors[s, a])
        cells[t + 1] = s
    return SampledTrajectory(cells, actions, violated)
