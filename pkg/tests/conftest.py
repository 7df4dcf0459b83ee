import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mlci import GridSpec, action_grid, build_hypotheses, build_mdp, pendulum

TWO_PI = 2.0 * np.pi


@pytest.fixture(scope="session")
def pend():
    return pendulum()


@pytest.fixture(scope="session")
def pend_grid(pend):
    return GridSpec.from_system(pend, (10, 10))


@pytest.fixture(scope="session")
def pend_hypotheses():
    return build_hypotheses((0, 1), (0.0, -6.0), (TWO_PI, 6.0), (10, 10))


@pytest.fixture(scope="session")
def pend_mdp(pend, pend_grid, pend_hypotheses):
    """Small pendulum MDP shared by planner and inference tests."""
    actions = action_grid(pend, (5,))
    return build_mdp(pend, pend_grid, actions, dt=0.1, hypotheses=pend_hypotheses,
                     substeps=10)


def reachable_goal(mdp, start, horizon, prefer=None):
    """A cell reachable from start in exactly `horizon` steps.

    Picks the reachable cell whose center is closest to `prefer` (a state
    vector), so tests can aim near a region of interest without worrying
    about exact-step reachability on coarse grids.
    """
    reach = np.zeros(mdp.n_states, dtype=bool)
    reach[start] = True
    valid = mdp.valid
    for _ in range(horizon):
        nxt = np.zeros_like(reach)
        rows = np.where(reach)[0]
        succ = mdp.successors[rows]
        nxt[succ[valid[rows]]] = True
        reach = nxt
    cells = np.where(reach)[0]
    if cells.size == 0:
        raise AssertionError("nothing reachable at that horizon")
    if prefer is None:
        return int(cells[0])
    d = np.linalg.norm(mdp.cell_centers[cells] - np.asarray(prefer), axis=1)
    return int(cells[np.argmin(d)])
