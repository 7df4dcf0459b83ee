"""Experiment configuration: one YAML file fully determines a run."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .dynamics import SystemSpec, make_system
from .gridmdp import Box, GridSpec, HypothesisSet, action_grid, build_hypotheses


def _resolve_dims(system: SystemSpec, dims) -> tuple[int, ...]:
    """Dimension references may be labels or indices."""
    labels = list(system.state_labels)
    out = []
    for d in dims:
        out.append(labels.index(d) if isinstance(d, str) else int(d))
    return tuple(out)


def _as_bounds(raw, n_dims) -> np.ndarray | None:
    if raw is None:
        return None
    arr = np.array([[float(lo), float(hi)] for lo, hi in raw])
    if arr.shape != (n_dims, 2):
        raise ValueError(f"bounds must list [lower, upper] for all {n_dims} state dims")
    return arr


@dataclass(eq=False)
class DemoConfig:
    source: str = "generate"  # "generate" or a CSV path
    pairs: int = 20
    dt_sim: float = 0.01
    goal_tolerance: float = 0.05
    restarts: int = 3
    max_iters: int = 10
    init_scale: float = 0.5
    terminal_weight: float = 2000.0
    penalty_weight: float = 100.0
    penalty_margin: float = 0.05
    bounds: np.ndarray | None = None
    goal_bounds: np.ndarray | None = None
    goal_box: tuple | None = None  # (dims, halfwidths)
    bidirectional: bool = False


@dataclass(eq=False)
class ExperimentConfig:
    """Parsed experiment description; see configs/ for examples."""

    system: SystemSpec
    grid_cells: tuple[int, ...]
    action_levels: tuple[int, ...]
    dt: float
    horizon: float
    substeps: int
    hypothesis_dims: tuple[int, ...]
    hypothesis_counts: tuple[int, ...]
    true_constraint: Box | None
    demos: DemoConfig
    seed: int = 0
    prior: float = 0.5
    out_dir: str = "results"
    shuffles: int = 10
    max_demos_ranked: int = 9
    n_demos: int | None = None
    accuracy_cells: tuple = ()
    accuracy_dts: tuple = ()
    accuracy_pairs: int = 12
    distance_cells: tuple = ()
    distance_dts: tuple = ()
    distance_trials: int = 30
    raw: dict = field(default_factory=dict)

    @property
    def planning_steps(self) -> int:
        steps = self.horizon / self.dt
        if abs(steps - round(steps)) > 1e-6:
            raise ValueError("dt must divide the horizon")
        return int(round(steps))

    def grid(self, cells=None) -> GridSpec:
        return GridSpec.from_system(self.system, cells or self.grid_cells)

    def actions(self) -> np.ndarray:
        return action_grid(self.system, self.action_levels)

    def hypotheses(self) -> HypothesisSet:
        bounds = self.system.state_bounds()
        dims = list(self.hypothesis_dims)
        return build_hypotheses(
            self.hypothesis_dims, bounds[dims, 0], bounds[dims, 1],
            self.hypothesis_counts,
        )

    def config_hash(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    """Parse a YAML experiment file; ``overrides`` replaces top-level keys."""
    raw = yaml.safe_load(Path(path).read_text())
    if overrides:
        raw.update({k: v for k, v in overrides.items() if v is not None})
    return config_from_dict(raw)


def config_from_dict(raw: dict) -> ExperimentConfig:
    system = make_system(raw["system"]["name"], raw["system"].get("params"))
    n = system.n_states

    mdp_raw = raw.get("mdp", {})
    grid_cells = tuple(int(c) for c in mdp_raw["cells"])
    action_levels = tuple(int(c) for c in mdp_raw["action_levels"])
    dt = float(mdp_raw["dt"])
    substeps = int(mdp_raw.get("substeps", 20))

    hyp_raw = raw["hypotheses"]
    hyp_dims = _resolve_dims(system, hyp_raw["dims"])
    hyp_counts = tuple(int(c) for c in hyp_raw["counts"])

    true_constraint = None
    if raw.get("true_constraint"):
        tc = raw["true_constraint"]
        true_constraint = Box.make(
            _resolve_dims(system, tc["dims"]), tc["lower"], tc["upper"]
        )

    demo_raw = dict(raw.get("demos", {}))
    goal_box = None
    if demo_raw.get("goal_box"):
        gb = demo_raw["goal_box"]
        goal_box = (_resolve_dims(system, gb["dims"]),
                    tuple(float(h) for h in gb["halfwidths"]))
    demos = DemoConfig(
        source=demo_raw.get("source", "generate"),
        pairs=int(demo_raw.get("pairs", 20)),
        dt_sim=float(demo_raw.get("dt_sim", 0.01)),
        goal_tolerance=float(demo_raw.get("goal_tolerance", 0.05)),
        restarts=int(demo_raw.get("restarts", 3)),
        max_iters=int(demo_raw.get("max_iters", 10)),
        init_scale=float(demo_raw.get("init_scale", 0.5)),
        terminal_weight=float(demo_raw.get("terminal_weight", 2000.0)),
        penalty_weight=float(demo_raw.get("penalty_weight", 100.0)),
        penalty_margin=float(demo_raw.get("penalty_margin", 0.05)),
        bounds=_as_bounds(demo_raw.get("bounds"), n),
        goal_bounds=_as_bounds(demo_raw.get("goal_bounds"), n),
        goal_box=goal_box,
        bidirectional=bool(demo_raw.get("bidirectional", False)),
    )

    acc = raw.get("accuracy", {})
    dist = raw.get("distance", {})
    rank = raw.get("ranking", {})
    return ExperimentConfig(
        system=system,
        grid_cells=grid_cells,
        action_levels=action_levels,
        dt=dt,
        horizon=float(raw.get("horizon", 5.0)),
        substeps=substeps,
        hypothesis_dims=hyp_dims,
        hypothesis_counts=hyp_counts,
        true_constraint=true_constraint,
        demos=demos,
        seed=int(raw.get("seed", 0)),
        prior=float(raw.get("inference", {}).get("prior", 0.5)),
        out_dir=str(raw.get("out_dir", "results")),
        shuffles=int(rank.get("shuffles", 10)),
        max_demos_ranked=int(rank.get("max_demos", 9)),
        n_demos=(int(raw["n_demos"]) if raw.get("n_demos") is not None else None),
        accuracy_cells=tuple(tuple(int(x) for x in c) for c in acc.get("cells", ())),
        accuracy_dts=tuple(float(x) for x in acc.get("dts", ())),
        accuracy_pairs=int(acc.get("pairs", 12)),
        distance_cells=tuple(tuple(int(x) for x in c) for c in dist.get("cells", ())),
        distance_dts=tuple(float(x) for x in dist.get("dts", ())),
        distance_trials=int(dist.get("trials", 30)),
        raw=raw,
    )
