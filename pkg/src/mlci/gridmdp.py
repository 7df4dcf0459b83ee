"""Tabular MDP approximation of continuous dynamics.

The state space is a rectangular grid of half-open cells (the global top
edge of each non-periodic dimension is closed so the bound itself still
maps to the last cell). Transitions are built by integrating from each
cell center under each constant action for one interval ``dt``; the
successor is the cell containing the endpoint, and every hypothesis
region touched by any substep sample is recorded in the transition's
violation bitset so a coarse step cannot skip over a region unnoticed.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dynamics import SystemSpec, integrate_batch

OUT_OF_BOUNDS = -1

_CACHE_FORMAT_VERSION = 1


@dataclass(frozen=True, eq=False)
class GridSpec:
    """Rectangular grid over the state space; one cell count per dim."""

    counts: tuple[int, ...]
    lowers: np.ndarray
    uppers: np.ndarray
    periodic: np.ndarray

    def __post_init__(self):
        if any(c < 1 for c in self.counts):
            raise ValueError("cell counts must be positive")
        if not np.all(self.lowers < self.uppers):
            raise ValueError("need lower < upper on every dimension")

    @classmethod
    def from_system(cls, system: SystemSpec, counts) -> "GridSpec":
        bounds = system.state_bounds()
        return cls(
            counts=tuple(int(c) for c in counts),
            lowers=bounds[:, 0].copy(),
            uppers=bounds[:, 1].copy(),
            periodic=system.periodic_mask().copy(),
        )

    @property
    def n_dims(self) -> int:
        return len(self.counts)

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.counts))

    @property
    def widths(self) -> np.ndarray:
        return (self.uppers - self.lowers) / np.array(self.counts)

    def coords_of(self, flat) -> tuple:
        return np.unravel_index(flat, self.counts)

    def flat_of(self, coords) -> int:
        return int(np.ravel_multi_index(coords, self.counts))


def cells_of(grid: GridSpec, x: np.ndarray) -> np.ndarray:
    """Map states (..., n) to flat cell indices; OUT_OF_BOUNDS where a
    non-periodic coordinate leaves its range."""
    x = np.asarray(x, dtype=float)
    idx = np.zeros(x.shape[:-1], dtype=np.int64)
    oob = ~np.isfinite(x).all(axis=-1)
    for k in range(grid.n_dims):
        v = np.nan_to_num(x[..., k], nan=grid.lowers[k], posinf=grid.lowers[k],
                          neginf=grid.lowers[k])
        lo, hi = grid.lowers[k], grid.uppers[k]
        w = grid.widths[k]
        count = grid.counts[k]
        if grid.periodic[k]:
            v = np.mod(v - lo, hi - lo)
            v = np.where(v >= hi - lo, v - (hi - lo), v) + lo
        else:
            oob |= (v < lo) | (v > hi)
        k_idx = np.floor((v - lo) / w).astype(np.int64)
        # x == upper belongs to the last cell (closed global top edge).
        k_idx = np.clip(k_idx, 0, count - 1)
        idx = idx * count + k_idx
    return np.where(oob, OUT_OF_BOUNDS, idx)


def cell_of(grid: GridSpec, x) -> int:
    """Scalar convenience wrapper around :func:`cells_of`."""
    return int(cells_of(grid, np.asarray(x, dtype=float)[None, :])[0])


def cell_centers(grid: GridSpec) -> np.ndarray:
    """(M, n) midpoints of every cell, in flat row-major order."""
    axes = [
        grid.lowers[k] + (np.arange(grid.counts[k]) + 0.5) * grid.widths[k]
        for k in range(grid.n_dims)
    ]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def center_of(grid: GridSpec, cell: int) -> np.ndarray:
    coords = np.array(grid.coords_of(cell), dtype=float)
    return grid.lowers + (coords + 0.5) * grid.widths


@dataclass(frozen=True, eq=False)
class Box:
    """Axis-aligned box over a subset of state dimensions.

    Unlisted dimensions are wildcards. Edges are half-open; per-dim
    ``closed_above`` includes the upper edge (used where a box ends on
    the outer grid boundary).
    """

    dims: tuple[int, ...]
    lower: np.ndarray
    upper: np.ndarray
    closed_above: np.ndarray

    @classmethod
    def make(cls, dims, lower, upper, closed_above=None) -> "Box":
        dims = tuple(int(d) for d in dims)
        lower = np.asarray(lower, dtype=float)
        upper = np.asarray(upper, dtype=float)
        if closed_above is None:
            closed_above = np.zeros(len(dims), dtype=bool)
        else:
            closed_above = np.asarray(closed_above, dtype=bool)
        if not (len(dims) == lower.size == upper.size == closed_above.size):
            raise ValueError("dims, lower, upper, closed_above must align")
        if not np.all(lower < upper):
            raise ValueError("need lower < upper on every box dimension")
        return cls(dims, lower, upper, closed_above)

    def contains(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        v = x[..., list(self.dims)]
        inside = (v >= self.lower) & (
            (v < self.upper) | (self.closed_above & (v == self.upper))
        )
        return inside.all(axis=-1)

    def intersects(self, other: "Box") -> bool:
        """Open-interval overlap on the shared dimension set."""
        if self.dims != other.dims:
            raise ValueError("boxes constrain different dimensions")
        return bool(
            np.all(np.maximum(self.lower, other.lower) < np.minimum(self.upper, other.upper))
        )


@dataclass(frozen=True, eq=False)
class HypothesisSet:
    """Indexed family of candidate keep-out boxes over shared dimensions."""

    dims: tuple[int, ...]
    lowers: np.ndarray  # (H, k)
    uppers: np.ndarray  # (H, k)
    closed_above: np.ndarray  # (H, k) bool

    def __len__(self) -> int:
        return self.lowers.shape[0]

    def region(self, i: int) -> Box:
        return Box(self.dims, self.lowers[i], self.uppers[i], self.closed_above[i])

    def contains(self, x: np.ndarray) -> np.ndarray:
        """Membership bits (..., H) for states (..., n)."""
        x = np.asarray(x, dtype=float)
        v = x[..., list(self.dims)][..., None, :]  # (..., 1, k)
        inside = (v >= self.lowers) & (
            (v < self.uppers) | (self.closed_above & (v == self.uppers))
        )
        return inside.all(axis=-1)

    def extended(self, box: Box) -> tuple["HypothesisSet", int]:
        """Append one extra region (e.g. a known keep-out area used as a
        baseline constraint); returns the new set and the region's index."""
        if tuple(box.dims) != self.dims:
            raise ValueError("extra region must constrain the same dimensions")
        return (
            HypothesisSet(
                self.dims,
                np.vstack([self.lowers, box.lower[None, :]]),
                np.vstack([self.uppers, box.upper[None, :]]),
                np.vstack([self.closed_above, box.closed_above[None, :]]),
            ),
            len(self),
        )

    def find_region(self, box: Box, atol: float = 1e-9) -> int:
        """Index of the region matching ``box`` bounds within ``atol``."""
        if tuple(box.dims) != self.dims:
            raise ValueError("box constrains different dimensions")
        hits = np.where(
            np.all(np.abs(self.lowers - box.lower) <= atol, axis=1)
            & np.all(np.abs(self.uppers - box.upper) <= atol, axis=1)
        )[0]
        if hits.size != 1:
            raise ValueError(f"box matches {hits.size} hypothesis regions, expected 1")
        return int(hits[0])


def membership(hypotheses: HypothesisSet, x: np.ndarray) -> np.ndarray:
    """Point-in-region bits; expects canonicalized states."""
    return hypotheses.contains(x)


def build_hypotheses(dims, lowers, uppers, counts) -> HypothesisSet:
    """Evenly spaced, non-overlapping boxes covering [lowers, uppers].

    Regions are indexed row-major over ``counts`` (first listed dimension
    varies slowest). The topmost slice of each dimension gets a closed
    upper edge so the covered area is exactly the stated bounds.
    """
    dims = tuple(int(d) for d in dims)
    lowers = np.asarray(lowers, dtype=float)
    uppers = np.asarray(uppers, dtype=float)
    counts = tuple(int(c) for c in counts)
    if any(c < 1 for c in counts):
        raise ValueError("hypothesis counts must be positive")
    k = len(dims)
    if not (lowers.size == uppers.size == k):
        raise ValueError("dims, lowers, uppers must align")
    widths = (uppers - lowers) / np.array(counts)
    grids = np.meshgrid(*[np.arange(c) for c in counts], indexing="ij")
    coords = np.stack([g.ravel() for g in grids], axis=-1)  # (H, k)
    lo = lowers + coords * widths
    hi = lowers + (coords + 1) * widths
    top = coords == (np.array(counts) - 1)
    # Make the outermost edges exact so they {close on, tile to} the bounds.
    hi[top] = np.broadcast_to(uppers, hi.shape)[top]
    return HypothesisSet(dims, lo, hi, top)


@dataclass(eq=False)
class TabularMdp:
    """Deterministic finite MDP with per-transition violation bitsets.

    successors[s, a] is the flat successor cell or OUT_OF_BOUNDS when the
    action is unavailable in that state. violations[s, a, i] means the
    continuous segment behind transition (s, a) passes through hypothesis
    region i (start center and endpoint included). center_membership[s, i]
    marks cell centers lying inside region i.
    """

    grid: GridSpec
    actions: np.ndarray  # (W, m)
    dt: float
    successors: np.ndarray  # (M, W) int
    violations: np.ndarray  # (M, W, H) bool
    cell_centers: np.ndarray  # (M, n)
    center_membership: np.ndarray  # (M, H) bool
    diverged: int = 0

    @property
    def n_states(self) -> int:
        return self.successors.shape[0]

    @property
    def n_actions(self) -> int:
        return self.successors.shape[1]

    @property
    def n_hypotheses(self) -> int:
        return self.violations.shape[2]

    @property
    def valid(self) -> np.ndarray:
        return self.successors != OUT_OF_BOUNDS


def action_grid(system: SystemSpec, levels) -> np.ndarray:
    """(W, m) Cartesian product of evenly spaced levels per control dim.

    A single level places the action at the midpoint of the control range.
    """
    axes = []
    for dim, n in zip(system.control_dims, levels):
        n = int(n)
        if n < 1:
            raise ValueError("need at least one level per control dimension")
        if n == 1:
            axes.append(np.array([0.5 * (dim.lower + dim.upper)]))
        else:
            axes.append(np.linspace(dim.lower, dim.upper, n))
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def build_mdp(
    system: SystemSpec,
    grid: GridSpec,
    actions: np.ndarray,
    dt: float,
    hypotheses: HypothesisSet,
    substeps: int = 20,
) -> TabularMdp:
    """Integrate every (cell center, action) pair into a transition table.

    Violation bitsets take the union of region membership over all
    substeps + 1 samples of each segment. Endpoints leaving a non-periodic
    bound, or segments that diverge numerically, invalidate the entry.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    actions = np.atleast_2d(np.asarray(actions, dtype=float))
    centers = cell_centers(grid)
    n_cells, n_act = centers.shape[0], actions.shape[0]
    successors = np.empty((n_cells, n_act), dtype=np.int64)
    violations = np.zeros((n_cells, n_act, len(hypotheses)), dtype=bool)
    diverged = 0
    for a in range(n_act):
        samples = integrate_batch(system, centers, actions[a], dt, substeps)
        finite = np.isfinite(samples).all(axis=(0, 2))
        diverged += int(np.count_nonzero(~finite))
        succ = cells_of(grid, samples[-1])
        succ[~finite] = OUT_OF_BOUNDS
        successors[:, a] = succ
        hit = membership(hypotheses, samples.reshape(-1, centers.shape[1]))
        violations[:, a, :] = hit.reshape(substeps + 1, n_cells, -1).any(axis=0)
        violations[~finite, a, :] = False
    return TabularMdp(
        grid=grid,
        actions=actions,
        dt=float(dt),
        successors=successors,
        violations=violations,
        cell_centers=centers,
        center_membership=membership(hypotheses, centers),
        diverged=diverged,
    )


def mdp_cache_key(
    system: SystemSpec,
    grid: GridSpec,
    actions: np.ndarray,
    dt: float,
    hypotheses: HypothesisSet,
    substeps: int,
) -> str:
    """Content hash of everything that determines the transition table."""
    payload = {
        "format": _CACHE_FORMAT_VERSION,
        "system": {
            "name": system.name,
            "deriv": system.deriv_name,
            "params": dict(sorted(system.params.items())),
            "state_dims": [
                [d.label, d.lower, d.upper, d.periodic] for d in system.state_dims
            ],
            "control_dims": [[d.label, d.lower, d.upper] for d in system.control_dims],
        },
        "grid": {
            "counts": list(grid.counts),
            "lowers": grid.lowers.tolist(),
            "uppers": grid.uppers.tolist(),
            "periodic": grid.periodic.tolist(),
        },
        "actions": np.asarray(actions, dtype=float).tolist(),
        "dt": float(dt),
        "hypotheses": {
            "dims": list(hypotheses.dims),
            "lowers": hypotheses.lowers.tolist(),
            "uppers": hypotheses.uppers.tolist(),
            "closed": hypotheses.closed_above.tolist(),
        },
        "substeps": int(substeps),
    }
    blob = json.dumps(payload, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def save_mdp(path, mdp: TabularMdp, key: str) -> None:
    """Binary cache: versioned header plus dense successor/bitset arrays."""
    m, w, h = mdp.violations.shape
    np.savez_compressed(
        path,
        format_version=np.int64(_CACHE_FORMAT_VERSION),
        key=np.frombuffer(bytes.fromhex(key), dtype=np.uint8),
        grid_counts=np.array(mdp.grid.counts, dtype=np.int64),
        grid_lowers=mdp.grid.lowers,
        grid_uppers=mdp.grid.uppers,
        grid_periodic=mdp.grid.periodic,
        actions=mdp.actions,
        dt=np.float64(mdp.dt),
        successors=mdp.successors.astype(np.int64),
        violations=np.packbits(mdp.violations.reshape(m * w, h), axis=1),
        center_membership=np.packbits(mdp.center_membership, axis=1),
        n_hypotheses=np.int64(h),
        cell_centers=mdp.cell_centers,
        diverged=np.int64(mdp.diverged),
    )


def load_mdp(path) -> TabularMdp:
    with np.load(path) as data:
        if int(data["format_version"]) != _CACHE_FORMAT_VERSION:
            raise ValueError(f"unsupported cache format in {path}")
        grid = GridSpec(
            counts=tuple(int(c) for c in data["grid_counts"]),
            lowers=data["grid_lowers"],
            uppers=data["grid_uppers"],
            periodic=data["grid_periodic"],
        )
        successors = data["successors"]
        h = int(data["n_hypotheses"])
        m, w = successors.shape
        violations = (
            np.unpackbits(data["violations"], axis=1, count=h)
            .astype(bool)
            .reshape(m, w, h)
        )
        centers = data["cell_centers"]
        center_membership = np.unpackbits(
            data["center_membership"], axis=1, count=h
        ).astype(bool)
        return TabularMdp(
            grid=grid,
            actions=data["actions"],
            dt=float(data["dt"]),
            successors=successors,
            violations=violations,
            cell_centers=centers,
            center_membership=center_membership,
            diverged=int(data["diverged"]),
        )


def build_or_load(
    system: SystemSpec,
    grid: GridSpec,
    actions: np.ndarray,
    dt: float,
    hypotheses: HypothesisSet,
    substeps: int = 20,
    cache_dir=None,
) -> TabularMdp:
    """Build the MDP, reusing an on-disk copy keyed by content hash."""
    if cache_dir is None:
        return build_mdp(system, grid, actions, dt, hypotheses, substeps)
    key = mdp_cache_key(system, grid, actions, dt, hypotheses, substeps)
    path = Path(cache_dir) / f"mdp_{key[:16]}.npz"
    if path.exists():
        return load_mdp(path)
    mdp = build_mdp(system, grid, actions, dt, hypotheses, substeps)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_mdp(path, mdp, key)
    return mdp
