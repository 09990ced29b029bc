import json
import os

import numpy as np
import pytest

from fock import FockBasis, ModeSet
from grid import Field, Grid
from pekar import PekarProblem, gaussian_interaction, gaussian_well

CONFIGS = os.path.join(os.path.dirname(__file__), "configs")
REFERENCE_VALUES = os.path.join(os.path.dirname(__file__), "fixtures", "reference_values.json")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def sample_grid():
    return Grid(256, 32.0)


@pytest.fixture
def sample_problem(sample_grid):
    return PekarProblem(
        sample_grid,
        gaussian_well(sample_grid, -0.05, 2.0),
        gaussian_interaction(sample_grid, 0.5, 1.0),
    )


@pytest.fixture
def small_grid():
    return Grid(16, 8.0)


@pytest.fixture
def small_problem(small_grid):
    return PekarProblem(
        small_grid,
        gaussian_well(small_grid, -0.5, 1.0),
        gaussian_interaction(small_grid, 0.5, 1.0),
    )


@pytest.fixture
def small_modes(small_grid):
    return ModeSet.lowest(small_grid, 3)


def random_field(grid: Grid, rng: np.random.Generator, real: bool = False) -> Field:
    values = rng.standard_normal(grid.size)
    if not real:
        values = values + 1j * rng.standard_normal(grid.size)
    return Field(grid, values)


def random_state_vector(dimension: int, rng: np.random.Generator) -> np.ndarray:
    vector = rng.standard_normal(dimension) + 1j * rng.standard_normal(dimension)
    return vector / np.linalg.norm(vector)


def reference_values(config) -> dict:
    """Committed reference numbers for a config, looked up by its hash."""
    with open(REFERENCE_VALUES, "r", encoding="utf-8") as f:
        table = json.load(f)
    if config.hash not in table:
        pytest.fail(f"no reference values for config hash {config.hash}; regenerate fixtures/reference_values.json")
    return table[config.hash]
