"""Shared fixture builders: the canonical smooth / straight test trees.

Both trees branch every unit of s with binary forks: the smooth one turns
pi/3 per branch continuously with an exponentially decaying radial rate
(ratio 2/3 per branch), the straight one concentrates the same per-branch
turn and length into single-sample spikes at the branch starts, so its
geometry is exact straight segments.
"""

import numpy as np
import pytest

from dendrite import DerivativeCoords, SGrid
from dendrite.trees import BranchPointSet, ForkSchedule, TreeSpec


def smooth_spec(generations=8, steps_per_branch=32, turn=np.pi / 3, ratio=2.0 / 3.0,
                unit_first_branch=False):
    ds = 1.0 / steps_per_branch
    grid = SGrid(0.0, float(generations), ds)
    s = grid.samples()
    dr = ratio**s
    if unit_first_branch:
        dr = dr / (np.sum(dr[:steps_per_branch]) * ds)
    coords = DerivativeCoords.from_arrays(dr, [np.full(grid.count, turn)], grid)
    branches = BranchPointSet(np.arange(float(generations)), grid)
    return TreeSpec(coords, (branches,), ForkSchedule((2,)), generations)


def straight_spec(generations=8, steps_per_branch=32, turn=np.pi / 3, ratio=2.0 / 3.0,
                  first_length=1.0):
    ds = 1.0 / steps_per_branch
    grid = SGrid(0.0, float(generations), ds)
    dr = np.zeros(grid.count)
    dphi = np.zeros(grid.count)
    for g in range(generations):
        k = g * steps_per_branch
        dr[k] = first_length * ratio**g / ds
        dphi[k] = turn / ds
    coords = DerivativeCoords.from_arrays(dr, [dphi], grid)
    branches = BranchPointSet(np.arange(float(generations)), grid)
    return TreeSpec(coords, (branches,), ForkSchedule((2,)), generations)


@pytest.fixture
def smooth8():
    return smooth_spec()


@pytest.fixture
def straight8():
    return straight_spec()
