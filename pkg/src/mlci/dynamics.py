"""Continuous control systems and fixed-step Runge-Kutta integration.

States and controls are plain float ndarrays, ordered as declared by the
owning :class:`SystemSpec`. Periodic dimensions (angles) are stored
canonically inside ``[lower, upper)``; velocity-like dimensions are left
unbounded by the integrator, and range enforcement happens downstream in
the grid discretizer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * np.pi


class IntegrationDivergedError(RuntimeError):
    """A trajectory produced a non-finite (or physically invalid) state."""


@dataclass(frozen=True)
class DimSpec:
    """One named dimension with bounds, used for states and controls."""

    label: str
    lower: float
    upper: float
    periodic: bool = False
    unit: str = ""

    def __post_init__(self):
        if not self.lower < self.upper:
            raise ValueError(f"dimension {self.label!r}: lower must be < upper")

    @property
    def span(self) -> float:
        return self.upper - self.lower


@dataclass(frozen=True, eq=False)
class SystemSpec:
    """Declarative description of a continuous system xdot = h(x, u).

    ``deriv_name`` selects the vector field from the built-in registry;
    ``params`` holds its named scalar parameters (gravity, length, ...).
    """

    name: str
    state_dims: tuple[DimSpec, ...]
    control_dims: tuple[DimSpec, ...]
    params: dict = field(default_factory=dict)
    deriv_name: str = ""

    @property
    def n_states(self) -> int:
        return len(self.state_dims)

    @property
    def n_controls(self) -> int:
        return len(self.control_dims)

    @property
    def state_labels(self) -> tuple[str, ...]:
        return tuple(d.label for d in self.state_dims)

    @property
    def control_labels(self) -> tuple[str, ...]:
        return tuple(d.label for d in self.control_dims)

    def state_bounds(self) -> np.ndarray:
        """(n, 2) array of per-dimension [lower, upper]."""
        return np.array([[d.lower, d.upper] for d in self.state_dims])

    def control_bounds(self) -> np.ndarray:
        return np.array([[d.lower, d.upper] for d in self.control_dims])

    def periodic_mask(self) -> np.ndarray:
        return np.array([d.periodic for d in self.state_dims])


_GUARD_FLOOR = 0.05


def _pendulum_rate(params, x, u, guard=False):
    ratio = params["gravity"] / params["length"]
    theta = x[..., 0]
    theta_dot = x[..., 1]
    acc = ratio * np.sin(theta) + u[..., 0]
    return np.stack([theta_dot, acc], axis=-1)


def _tip_rate(params, x, u, guard=False):
    # Angular acceleration divides by the current length. Non-positive
    # lengths are unphysical: by default they are pushed to +inf so the
    # caller's divergence check trips; with guard=True the length is
    # floored instead, giving trajectory optimizers a smooth (if wrong)
    # extension to linearize through.
    g = params["gravity"]
    theta = x[..., 0]
    theta_dot = x[..., 1]
    length = x[..., 2]
    stretch_rate = x[..., 3]
    if guard:
        acc = (g / np.maximum(length, _GUARD_FLOOR)) * np.sin(theta) + u[..., 0]
    else:
        safe_len = np.where(length > 0.0, length, 1.0)
        acc = np.where(length > 0.0, (g / safe_len) * np.sin(theta), np.inf) + u[..., 0]
    return np.stack([theta_dot, acc, stretch_rate, u[..., 1]], axis=-1)


_VECTOR_FIELDS = {
    "pendulum": _pendulum_rate,
    "tip": _tip_rate,
}


def deriv(system: SystemSpec, x: np.ndarray, u: np.ndarray, guard: bool = False) -> np.ndarray:
    """Evaluate xdot = h(x, u). Pure; broadcasts over leading axes."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.shape[-1] != system.n_states:
        raise ValueError(f"state has {x.shape[-1]} dims, expected {system.n_states}")
    if u.shape[-1] != system.n_controls:
        raise ValueError(f"control has {u.shape[-1]} dims, expected {system.n_controls}")
    return _VECTOR_FIELDS[system.deriv_name](system.params, x, u, guard)


def canonicalize(system: SystemSpec, x: np.ndarray) -> np.ndarray:
    """Wrap periodic dimensions into [lower, upper). Other dims untouched."""
    out = np.array(x, dtype=float)
    for k, dim in enumerate(system.state_dims):
        if not dim.periodic:
            continue
        v = np.mod(out[..., k] - dim.lower, dim.span)
        # np.mod can round up to the full span for tiny negative inputs.
        v = np.where(v >= dim.span, v - dim.span, v)
        out[..., k] = dim.lower + v
    return out


def wrapped_difference(system: SystemSpec, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """x - y with periodic dims wrapped into [-span/2, span/2)."""
    d = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
    for k, dim in enumerate(system.state_dims):
        if dim.periodic:
            half = 0.5 * dim.span
            d[..., k] = np.mod(d[..., k] + half, dim.span) - half
    return d


def normalized_distance(system: SystemSpec, x: np.ndarray, y: np.ndarray) -> float:
    """Euclidean distance with each dimension scaled by its bound span."""
    spans = np.array([d.span for d in system.state_dims])
    d = wrapped_difference(system, x, y) / spans
    return float(np.sqrt(np.sum(d * d, axis=-1)))


def _rk4_step(rate, x, u, h):
    k1 = rate(x, u)
    k2 = rate(x + 0.5 * h * k1, u)
    k3 = rate(x + 0.5 * h * k2, u)
    k4 = rate(x + h * k3, u)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate_batch(
    system: SystemSpec,
    x0: np.ndarray,
    u: np.ndarray,
    duration: float,
    substeps: int,
) -> np.ndarray:
    """RK4 under constant control for a batch of start states.

    Returns (substeps + 1, B, n) canonicalized samples. Divergence is not
    raised here; non-finite values simply propagate so the caller can mark
    individual batch entries invalid.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    u = np.asarray(u, dtype=float)
    if u.ndim == 1:
        u = np.broadcast_to(u, (x0.shape[0], u.shape[0]))
    h = duration / substeps
    rate = lambda x, uu: _VECTOR_FIELDS[system.deriv_name](system.params, x, uu)

    samples = np.empty((substeps + 1, x0.shape[0], x0.shape[1]))
    samples[0] = canonicalize(system, x0)
    x = x0
    with np.errstate(all="ignore"):
        for i in range(substeps):
            x = _rk4_step(rate, x, u, h)
            samples[i + 1] = canonicalize(system, x)
    return samples


def integrate_segment(
    system: SystemSpec,
    x0: np.ndarray,
    u: np.ndarray,
    duration: float,
    substeps: int,
) -> np.ndarray:
    """Integrate a single state under constant control.

    Returns substeps + 1 uniformly spaced samples starting at x0, with
    periodic dims wrapped canonically.

    Raises:
        IntegrationDivergedError: if any intermediate state is non-finite.
    """
    if duration <= 0.0:
        raise ValueError("duration must be positive")
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    x0 = np.asarray(x0, dtype=float)
    samples = integrate_batch(system, x0[None, :], u, duration, substeps)[:, 0, :]
    if not np.all(np.isfinite(samples)):
        raise IntegrationDivergedError(
            f"integration diverged on {system.name} from x0={x0.tolist()}"
        )
    return samples


@dataclass(frozen=True, eq=False)
class ContinuousTrajectory:
    """Finely sampled state/control history at fixed sampling interval."""

    dt_sim: float
    states: np.ndarray  # (S, n)
    controls: np.ndarray  # (S - 1, m)

    def __post_init__(self):
        if self.dt_sim <= 0.0:
            raise ValueError("dt_sim must be positive")
        if self.states.shape[0] != self.controls.shape[0] + 1:
            raise ValueError("need exactly one more state sample than controls")

    @property
    def duration(self) -> float:
        return self.controls.shape[0] * self.dt_sim

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.states.shape[0]) * self.dt_sim


def rollout(
    system: SystemSpec,
    x0: np.ndarray,
    controls: np.ndarray,
    step: float,
    substeps: int,
) -> ContinuousTrajectory:
    """Chain piecewise-constant control segments into one trajectory.

    Each row of ``controls`` is held for ``step`` seconds and integrated
    with ``substeps`` RK4 steps; the trajectory is sampled at every
    substep, so dt_sim = step / substeps.
    """
    controls = np.atleast_2d(np.asarray(controls, dtype=float))
    if controls.shape[0] == 0:
        raise ValueError("controls must be nonempty")
    pieces = []
    x = np.asarray(x0, dtype=float)
    for k in range(controls.shape[0]):
        seg = integrate_segment(system, x, controls[k], step, substeps)
        pieces.append(seg if k == 0 else seg[1:])
        x = seg[-1]
    states = np.concatenate(pieces, axis=0)
    fine_controls = np.repeat(controls, substeps, axis=0)
    return ContinuousTrajectory(step / substeps, states, fine_controls)


def pendulum(
    gravity: float = 1.0,
    length: float = 1.0,
    max_speed: float = 6.0,
    max_torque: float = 2.0,
) -> SystemSpec:
    """Torque-driven pendulum: theta_ddot = (g/l) sin(theta) + u."""
    return SystemSpec(
        name="pendulum",
        state_dims=(
            DimSpec("theta", 0.0, TWO_PI, periodic=True, unit="rad"),
            DimSpec("theta_dot", -max_speed, max_speed, unit="rad/s"),
        ),
        control_dims=(DimSpec("torque", -max_torque, max_torque),),
        params={"gravity": gravity, "length": length},
        deriv_name="pendulum",
    )


def telescoping_pendulum(
    gravity: float = 1.0,
    max_speed: float = 3.0,
    min_length: float = 0.5,
    max_length: float = 1.5,
    max_stretch_rate: float = 1.0,
    max_torque: float = 2.0,
    max_force: float = 1.0,
) -> SystemSpec:
    """Telescoping inverted pendulum with decoupled length actuation.

    theta_ddot = (g/l) sin(theta) + u1 and l_ddot = u2, with the
    cross-coupling between angular acceleration and stretch rate omitted.
    Bounds other than the angle's period are modeling choices; see the
    README for the defaults used in the shipped configs.
    """
    return SystemSpec(
        name="tip",
        state_dims=(
            DimSpec("theta", 0.0, TWO_PI, periodic=True, unit="rad"),
            DimSpec("theta_dot", -max_speed, max_speed, unit="rad/s"),
            DimSpec("length", min_length, max_length, unit="m"),
            DimSpec("length_dot", -max_stretch_rate, max_stretch_rate, unit="m/s"),
        ),
        control_dims=(
            DimSpec("torque", -max_torque, max_torque),
            DimSpec("force", -max_force, max_force),
        ),
        params={"gravity": gravity},
        deriv_name="tip",
    )


_FACTORIES = {"pendulum": pendulum, "tip": telescoping_pendulum}


def make_system(name: str, params: dict | None = None) -> SystemSpec:
    """Build one of the named systems, overriding factory keyword defaults."""
    if name not in _FACTORIES:
        raise ValueError(f"unknown system {name!r}; choose from {sorted(_FACTORIES)}")
    return _FACTORIES[name](**(params or {}))
