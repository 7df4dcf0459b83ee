"""Synthetic expert demonstrations via iterative LQR.

Tasks are fixed-endpoint, fixed-horizon problems minimizing accumulated
squared control on the continuous system while staying out of a keep-out
box. Endpoint and keep-out requirements are encoded as a quadratic
terminal cost and a smooth penalty on proximity to the box; solutions
that still end far from the goal or clip the box are rejected afterwards,
so accepted demonstrations are near-optimal and provably avoid the box at
the simulation sampling resolution.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .dynamics import (
    ContinuousTrajectory,
    SystemSpec,
    canonicalize,
    deriv,
    wrapped_difference,
)
from .gridmdp import Box
from .inference import Demonstration


class OptimizationDivergedError(RuntimeError):
    """The trajectory optimizer produced a non-finite rollout or cost."""


@dataclass(eq=False)
class DemoProblem:
    """One fixed-endpoint task on the continuous system."""

    system: SystemSpec
    start: np.ndarray
    goal: np.ndarray | Box
    horizon: float
    dt_sim: float
    constraint: Box | None = None
    terminal_weight: float = 2000.0
    penalty_weight: float = 100.0
    penalty_margin: float = 0.05

    def __post_init__(self):
        self.start = np.asarray(self.start, dtype=float)
        steps = self.horizon / self.dt_sim
        if abs(steps - round(steps)) > 1e-9:
            raise ValueError("horizon must be an integer number of dt_sim steps")
        if self.constraint is not None:
            if self.constraint.contains(self.start):
                raise ValueError("start lies inside the keep-out box")
            if isinstance(self.goal, np.ndarray) and self.constraint.contains(self.goal):
                raise ValueError("goal lies inside the keep-out box")

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt_sim))


@dataclass(eq=False)
class IlqrResult:
    trajectory: ContinuousTrajectory
    cost: float
    goal_error: float
    converged: bool
    violated_constraint: bool
    cost_trace: list


def _box_signed_distance(system: SystemSpec, box: Box, x: np.ndarray) -> np.ndarray:
    """Signed distance to the box: negative inside, positive outside.

    Periodic dimensions measure the gap around the wrap, so the distance
    field is continuous across the seam.
    """
    x = np.asarray(x, dtype=float)
    offs = []
    for j, k in enumerate(box.dims):
        dim = system.state_dims[k]
        half = 0.5 * (box.upper[j] - box.lower[j])
        center = 0.5 * (box.upper[j] + box.lower[j])
        d = x[..., k] - center
        if dim.periodic:
            d = np.mod(d + 0.5 * dim.span, dim.span) - 0.5 * dim.span
        offs.append(np.abs(d) - half)
    off = np.stack(offs, axis=-1)  # negative coordinates are inside
    outside = np.linalg.norm(np.maximum(off, 0.0), axis=-1)
    inside = np.minimum(off.max(axis=-1), 0.0)
    return outside + inside


def _softplus(z: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, z)


class _IlqrCost:
    """Running and terminal costs plus finite-difference expansions."""

    def __init__(self, problem: DemoProblem):
        self.problem = problem
        self.system = problem.system
        self.spans = np.array([d.span for d in self.system.state_dims])
        margin = problem.penalty_margin
        self.sharpness = 4.0 / margin if margin > 0 else 40.0

    def penalty(self, x: np.ndarray) -> np.ndarray:
        box = self.problem.constraint
        if box is None:
            return np.zeros(np.asarray(x).shape[:-1])
        sd = _box_signed_distance(self.system, box, x)
        z = self.sharpness * (self.problem.penalty_margin - sd)
        return _softplus(z) / self.sharpness

    def state_cost(self, x: np.ndarray) -> np.ndarray:
        """Per-unit-time keep-out penalty contribution."""
        return self.problem.penalty_weight * self.penalty(x)

    def goal_gap(self, x: np.ndarray) -> np.ndarray:
        """Per-dimension span-normalized distance to the goal (point or box)."""
        goal = self.problem.goal
        x = np.asarray(x, dtype=float)
        if isinstance(goal, Box):
            gaps = np.zeros(x.shape[:-1] + (self.system.n_states,))
            for j, k in enumerate(goal.dims):
                dim = self.system.state_dims[k]
                half = 0.5 * (goal.upper[j] - goal.lower[j])
                center = 0.5 * (goal.upper[j] + goal.lower[j])
                d = x[..., k] - center
                if dim.periodic:
                    d = np.mod(d + 0.5 * dim.span, dim.span) - 0.5 * dim.span
                gaps[..., k] = np.maximum(np.abs(d) - half, 0.0) / dim.span
            return gaps
        return wrapped_difference(self.system, x, goal) / self.spans

    def terminal_cost(self, x: np.ndarray) -> np.ndarray:
        g = self.goal_gap(x)
        quad = self.problem.terminal_weight * (g * g).sum(axis=-1)
        # Ending inside the box is as bad as passing through it.
        return quad + self.state_cost(x) * self.problem.dt_sim

    def goal_error(self, x: np.ndarray) -> float:
        g = self.goal_gap(x)
        return float(np.sqrt((g * g).sum(axis=-1)))

    def total(self, xs: np.ndarray, us: np.ndarray) -> float:
        run = (us * us).sum(axis=-1) + self.state_cost(xs[:-1])
        return float(run.sum() * self.problem.dt_sim + self.terminal_cost(xs[-1]))


def _fd_gradient(f, X: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    n = X.shape[-1]
    g = np.empty_like(X)
    for k in range(n):
        e = np.zeros(n)
        e[k] = eps
        g[..., k] = (f(X + e) - f(X - e)) / (2.0 * eps)
    return g


def _fd_hessian(f, X: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    n = X.shape[-1]
    H = np.empty(X.shape + (n,))
    for k in range(n):
        e = np.zeros(n)
        e[k] = eps
        H[..., k] = (_fd_gradient(f, X + e) - _fd_gradient(f, X - e)) / (2.0 * eps)
    return 0.5 * (H + np.swapaxes(H, -1, -2))


def _clip_psd(H: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(H)
    vals = np.maximum(vals, 0.0)
    return np.einsum("...ij,...j,...kj->...ik", vecs, vals, vecs)


def ilqr_solve(
    problem: DemoProblem, init_controls: np.ndarray, max_iters: int = 10
) -> IlqrResult:
    """Gauss-Newton trajectory optimization, halted after ``max_iters``.

    Deterministic for fixed inputs; the accepted cost trace is
    nonincreasing because line-search steps must strictly improve.
    """
    system = problem.system
    dt = problem.dt_sim
    T = problem.n_steps
    n, m = system.n_states, system.n_controls
    us = np.asarray(init_controls, dtype=float).reshape(T, m).copy()
    cost = _IlqrCost(problem)

    def step(x, u):
        # Guarded evaluation smooths over unphysical states (length <= 0)
        # so an initial coast cannot crash the optimizer; the returned
        # trajectory is re-validated against the true dynamics below.
        k1 = deriv(system, x, u, guard=True)
        k2 = deriv(system, x + 0.5 * dt * k1, u, guard=True)
        k3 = deriv(system, x + 0.5 * dt * k2, u, guard=True)
        k4 = deriv(system, x + dt * k3, u, guard=True)
        return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    def open_rollout(controls):
        xs = np.empty((T + 1, n))
        xs[0] = problem.start
        for t in range(T):
            xs[t + 1] = step(xs[t], controls[t])
        return xs

    xs = open_rollout(us)
    if not np.all(np.isfinite(xs)):
        raise OptimizationDivergedError("initial rollout diverged")
    J = cost.total(xs, us)
    if not np.isfinite(J):
        raise OptimizationDivergedError("initial cost is not finite")

    trace = [J]
    lam = 1e-6
    converged = False
    eye_m = np.eye(m)
    for _ in range(max_iters):
        # Dynamics Jacobians around the nominal trajectory, batched over t.
        fx = np.empty((T, n, n))
        fu = np.empty((T, n, m))
        eps = 1e-6
        for k in range(n):
            e = np.zeros(n)
            e[k] = eps
            fx[:, :, k] = (step(xs[:-1] + e, us) - step(xs[:-1] - e, us)) / (2 * eps)
        for k in range(m):
            e = np.zeros(m)
            e[k] = eps
            fu[:, :, k] = (step(xs[:-1], us + e) - step(xs[:-1], us - e)) / (2 * eps)

        lx = _fd_gradient(cost.state_cost, xs[:-1]) * dt
        lxx = _clip_psd(_fd_hessian(cost.state_cost, xs[:-1]) * dt)
        lu = 2.0 * us * dt
        luu = np.broadcast_to(2.0 * dt * eye_m, (T, m, m))
        Vx = _fd_gradient(cost.terminal_cost, xs[-1])
        Vxx = _clip_psd(_fd_hessian(cost.terminal_cost, xs[-1]))

        k_ff = np.empty((T, m))
        K_fb = np.empty((T, m, n))
        while True:
            ok = True
            vx, vxx = Vx.copy(), Vxx.copy()
            for t in range(T - 1, -1, -1):
                Qx = lx[t] + fx[t].T @ vx
                Qu = lu[t] + fu[t].T @ vx
                Qxx = lxx[t] + fx[t].T @ vxx @ fx[t]
                Quu = luu[t] + fu[t].T @ vxx @ fu[t] + lam * eye_m
                Qux = fu[t].T @ vxx @ fx[t]
                try:
                    kv = np.linalg.solve(Quu, Qu)
                    Kv = np.linalg.solve(Quu, Qux)
                except np.linalg.LinAlgError:
                    ok = False
                    break
                if not (np.all(np.isfinite(kv)) and np.all(np.isfinite(Kv))):
                    ok = False
                    break
                k_ff[t] = -kv
                K_fb[t] = -Kv
                vx = Qx + K_fb[t].T @ Quu @ k_ff[t] + K_fb[t].T @ Qu + Qux.T @ k_ff[t]
                vxx = Qxx + K_fb[t].T @ Quu @ K_fb[t] + K_fb[t].T @ Qux + Qux.T @ K_fb[t]
                vxx = 0.5 * (vxx + vxx.T)
            if ok:
                break
            lam *= 10.0
            if lam > 1e10:
                break
        if lam > 1e10:
            break
        if np.abs(k_ff).max() < 1e-10:
            converged = True
            break

        improved = False
        for alpha in 2.0 ** -np.arange(11):
            new_xs = np.empty_like(xs)
            new_us = np.empty_like(us)
            new_xs[0] = problem.start
            finite = True
            for t in range(T):
                new_us[t] = us[t] + alpha * k_ff[t] + K_fb[t] @ (new_xs[t] - xs[t])
                new_xs[t + 1] = step(new_xs[t], new_us[t])
                if not np.all(np.isfinite(new_xs[t + 1])):
                    finite = False
                    break
            if not finite:
                continue
            J_new = cost.total(new_xs, new_us)
            if np.isfinite(J_new) and J_new < J - 1e-12:
                rel_drop = (J - J_new) / max(1.0, abs(J))
                xs, us, J = new_xs, new_us, J_new
                trace.append(J)
                lam = max(lam * 0.1, 1e-8)
                improved = True
                if rel_drop < 1e-8:
                    converged = True
                break
        if not improved:
            lam *= 10.0
            if lam > 1e10:
                converged = True
                break
        if converged:
            break

    with np.errstate(all="ignore"):
        true_rates = deriv(system, xs[:-1], us)
    if not np.all(np.isfinite(true_rates)):
        raise OptimizationDivergedError(
            "optimized trajectory leaves the system's valid state domain"
        )
    states = canonicalize(system, xs)
    traj = ContinuousTrajectory(dt, states, us.copy())
    violated = (
        bool(problem.constraint.contains(states).any())
        if problem.constraint is not None
        else False
    )
    return IlqrResult(
        trajectory=traj,
        cost=J,
        goal_error=cost.goal_error(xs[-1]),
        converged=converged,
        violated_constraint=violated,
        cost_trace=trace,
    )


@dataclass(eq=False)
class PairRecord:
    """Outcome of one sampled start/goal pair."""

    pair_index: int
    start: np.ndarray
    goal: np.ndarray
    accepted: bool
    reason: str  # ok | goal_error | violated_constraint | diverged
    goal_error: float
    cost: float


def solve_pair(
    problem: DemoProblem,
    rng,
    restarts: int = 3,
    max_iters: int = 10,
    init_scale: float = 0.5,
) -> IlqrResult | None:
    """Best-of-``restarts`` solves with random control initializations."""
    T, m = problem.n_steps, problem.system.n_controls
    best = None
    for _ in range(restarts):
        init = rng.normal(0.0, init_scale, size=(T, m))
        try:
            result = ilqr_solve(problem, init, max_iters=max_iters)
        except OptimizationDivergedError:
            continue
        if best is None or result.cost < best.cost:
            best = result
    return best


def _sample_point(rng, lowers, uppers, constraint, max_tries=1000):
    for _ in range(max_tries):
        x = rng.uniform(lowers, uppers)
        if constraint is None or not constraint.contains(x):
            return x
    raise RuntimeError("could not sample a state outside the keep-out box")


def generate_demos(
    system: SystemSpec,
    constraint: Box | None,
    n_pairs: int,
    horizon: float,
    dt_sim: float,
    seed: int,
    bounds: np.ndarray | None = None,
    goal_bounds: np.ndarray | None = None,
    goal_tolerance: float = 0.05,
    restarts: int = 3,
    max_iters: int = 10,
    init_scale: float = 0.5,
    terminal_weight: float = 2000.0,
    penalty_weight: float = 100.0,
    penalty_margin: float = 0.05,
    goal_box: tuple | None = None,
    threads: int | None = None,
) -> tuple[list[Demonstration], list[PairRecord]]:
    """Sample tasks and keep the demonstrations that solve them.

    Starts are drawn uniformly inside ``bounds`` (state bounds by
    default) and goals inside ``goal_bounds`` (``bounds`` by default),
    rejecting points inside the keep-out box. Each pair is optimized
    ``restarts`` times from independent random initializations; the
    cheapest result is accepted only if it ends within
    ``goal_tolerance`` (normalized units) of the goal and never touches
    the box. ``goal_box`` = (dims, halfwidths) turns sampled goal points
    into boxes with free remaining dimensions. Reproducible from ``seed``;
    ``threads`` parallelizes over pairs without changing results.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    state_bounds = system.state_bounds() if bounds is None else np.asarray(bounds, float)
    lowers, uppers = state_bounds[:, 0].copy(), state_bounds[:, 1].copy()
    if goal_bounds is None:
        goal_lowers, goal_uppers = lowers, uppers
    else:
        goal_bounds = np.asarray(goal_bounds, dtype=float)
        goal_lowers, goal_uppers = goal_bounds[:, 0].copy(), goal_bounds[:, 1].copy()

    sampler = np.random.default_rng(seed)
    pair_seeds = np.random.SeedSequence(seed).spawn(n_pairs)
    tasks = []
    for i in range(n_pairs):
        start = _sample_point(sampler, lowers, uppers, constraint)
        if goal_box is not None:
            dims, halfwidths = goal_box
            dims = tuple(int(d) for d in dims)
            hw = np.asarray(halfwidths, dtype=float)
            glo, gup = goal_lowers.copy(), goal_uppers.copy()
            for j, d in enumerate(dims):
                glo[d] += hw[j]
                gup[d] -= hw[j]
            while True:
                point = _sample_point(sampler, glo, gup, constraint)
                box = Box.make(dims, point[list(dims)] - hw, point[list(dims)] + hw)
                if constraint is None or tuple(constraint.dims) != dims:
                    break
                if not box.intersects(constraint):
                    break
            goal = box
        else:
            goal = _sample_point(sampler, goal_lowers, goal_uppers, constraint)
        tasks.append((i, start, goal))

    def run(task):
        i, start, goal = task
        problem = DemoProblem(
            system=system,
            start=start,
            goal=goal,
            horizon=horizon,
            dt_sim=dt_sim,
            constraint=constraint,
            terminal_weight=terminal_weight,
            penalty_weight=penalty_weight,
            penalty_margin=penalty_margin,
        )
        rng = np.random.default_rng(pair_seeds[i])
        return i, solve_pair(problem, rng, restarts, max_iters, init_scale)

    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            solved = dict(pool.map(run, tasks))
    else:
        solved = dict(run(task) for task in tasks)

    demos: list[Demonstration] = []
    records: list[PairRecord] = []
    for i, start, goal in tasks:
        result = solved[i]
        goal_point = goal if isinstance(goal, np.ndarray) else None
        if result is None:
            records.append(
                PairRecord(i, start, goal_point, False, "diverged", np.inf, np.inf)
            )
            continue
        if result.violated_constraint:
            reason, accepted = "violated_constraint", False
        elif result.goal_error > goal_tolerance:
            reason, accepted = "goal_error", False
        else:
            reason, accepted = "ok", True
        records.append(
            PairRecord(i, start, goal_point, accepted, reason, result.goal_error,
                       result.cost)
        )
        if accepted:
            demos.append(
                Demonstration(
                    trajectory=result.trajectory,
                    start=result.trajectory.states[0],
                    goal=goal,
                    demo_id=len(demos),
                )
            )
    if not demos:
        raise RuntimeError(
            f"all {n_pairs} start/goal pairs were rejected; see the pair records"
        )
    return demos, records


def write_demos(path, demos: list[Demonstration], system: SystemSpec) -> None:
    """One row per time sample: demo id, time, state dims, control dims.

    The final sample of each demonstration carries empty control fields.
    """
    state_cols = [f"{d.label}[{d.unit}]" if d.unit else d.label for d in system.state_dims]
    control_cols = list(system.control_labels)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["demo_id", "t[s]"] + state_cols + control_cols)
        for demo in demos:
            traj = demo.trajectory
            for s in range(traj.states.shape[0]):
                row = [demo.demo_id, repr(s * traj.dt_sim)]
                row += [repr(float(v)) for v in traj.states[s]]
                if s < traj.controls.shape[0]:
                    row += [repr(float(v)) for v in traj.controls[s]]
                else:
                    row += [""] * len(control_cols)
                writer.writerow(row)


def read_demos(path, system: SystemSpec) -> list[Demonstration]:
    """Parse the demo CSV; start is the first sample, goal the last."""
    n, m = system.n_states, system.n_controls
    groups: dict[int, list] = {}
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if len(header) != 2 + n + m:
            raise ValueError(f"expected {2 + n + m} columns, found {len(header)}")
        for row in reader:
            groups.setdefault(int(row[0]), []).append(row[1:])
    demos = []
    for demo_id in sorted(groups):
        rows = groups[demo_id]
        times = np.array([float(r[0]) for r in rows])
        states = np.array([[float(v) for v in r[1 : 1 + n]] for r in rows])
        controls = np.array(
            [[float(v) for v in r[1 + n :]] for r in rows[:-1]]
        ).reshape(len(rows) - 1, m)
        steps = np.diff(times)
        if steps.size == 0 or np.abs(steps - steps[0]).max() > 1e-9:
            raise ValueError(f"demo {demo_id}: samples are not uniformly spaced")
        demos.append(
            Demonstration(
                trajectory=ContinuousTrajectory(float(steps[0]), states, controls),
                start=states[0],
                goal=states[-1],
                demo_id=demo_id,
            )
        )
    return demos
