"""
Shared fixtures for the metaopf test suite.

Slow end-to-end tests are marked ``slow`` and only run with METAOPF_RUN_SLOW=1.
"""

import os
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np
import pytest

from datagen import OpfSample, TaskDataset, TopologySpec, build_corpus
from grid import parse_case, parse_case_text


CASES = Path(__file__).parent / "cases"


def pytest_collection_modifyitems(config, items):
    if os.getenv("METAOPF_RUN_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="set METAOPF_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def _rows(rows: Sequence[Sequence[float]]) -> str:
    return "\n".join("\t" + "\t".join(f"{v:g}" for v in row) + ";" for row in rows)


def case_text(
    buses: Sequence[Sequence[float]],
    gens: Sequence[Sequence[float]],
    branches: Sequence[Sequence[float]],
    costs: Sequence[Sequence[float]],
    base_mva: float = 100.0,
    name: str = "tiny",
) -> str:
    """MATPOWER source for hand-built cases.

    Rows use the MATPOWER column order; short gen and branch rows are padded
    with the usual trailing columns.
    """
    gens = [list(g) + [0.0] * (10 - len(g)) for g in gens]
    branches = [list(b) + [0.0] * (11 - len(b)) for b in branches]
    return (
        f"function mpc = {name}\n"
        "mpc.version = '2';\n"
        f"mpc.baseMVA = {base_mva:g};\n"
        f"mpc.bus = [\n{_rows(buses)}\n];\n"
        f"mpc.gen = [\n{_rows(gens)}\n];\n"
        f"mpc.branch = [\n{_rows(branches)}\n];\n"
        f"mpc.gencost = [\n{_rows(costs)}\n];\n"
    )


def two_bus_text(
    p_load_mw: float = 0.0,
    q_load_mvar: float = 0.0,
    r: float = 0.0,
    x: float = 0.1,
    b: float = 0.0,
    pv_bus2: bool = False,
) -> str:
    """Slack generator at bus 1, load at bus 2 (optionally a zero-output PV generator there)."""
    kind2 = 2 if pv_bus2 else 1
    buses = [
        [1, 3, 0, 0, 0, 0, 1, 1.0, 0, 230, 1, 1.1, 0.9],
        [2, kind2, p_load_mw, q_load_mvar, 0, 0, 1, 1.0, 0, 230, 1, 1.1, 0.9],
    ]
    gens = [[1, 0, 0, 300, -300, 1.0, 100, 1, 500, 0]]
    costs = [[2, 0, 0, 3, 0.01, 10, 5]]
    if pv_bus2:
        gens.append([2, 0, 0, 300, -300, 1.0, 100, 1, 500, 0])
        costs.append([2, 0, 0, 3, 0.02, 20, 0])
    branches = [[1, 2, r, x, b, 0, 0, 0, 0, 0, 1, -360, 360]]
    return case_text(buses, gens, branches, costs, name="two_bus")


def three_bus_text(q_limit_mvar: float = 100.0) -> str:
    """Two generators with distinct costs feeding a load bus through a meshed triangle."""
    buses = [
        [1, 3, 0, 0, 0, 0, 1, 1.0, 0, 230, 1, 1.05, 0.95],
        [2, 2, 0, 0, 0, 0, 1, 1.0, 0, 230, 1, 1.05, 0.95],
        [3, 1, 150, 30, 0, 0, 1, 1.0, 0, 230, 1, 1.05, 0.95],
    ]
    q = q_limit_mvar
    gens = [
        [1, 100, 0, 100, -100, 1.0, 100, 1, 200, 0],
        [2, 50, 0, q, -q, 1.0, 100, 1, 200, 0],
    ]
    costs = [[2, 0, 0, 3, 0.02, 20, 0], [2, 0, 0, 3, 0.04, 15, 0]]
    branches = [
        [1, 2, 0.01, 0.05, 0.02, 0, 0, 0, 0, 0, 1, -360, 360],
        [1, 3, 0.02, 0.10, 0.02, 0, 0, 0, 0, 0, 1, -360, 360],
        [2, 3, 0.015, 0.08, 0.02, 0, 0, 0, 0, 0, 1, -360, 360],
    ]
    return case_text(buses, gens, branches, costs, name="three_bus")


def synthetic_task(
    topology_id: int,
    x: np.ndarray,
    y: np.ndarray,
    split: str = "offline",
    n_test: int = 0,
) -> TaskDataset:
    """TaskDataset over given arrays, detached from any network."""
    spec = TopologySpec("synthetic", (), (), 0, topology_id)
    samples = [OpfSample(i, xi, yi, yi.copy(), 1.0) for i, (xi, yi) in enumerate(zip(x, y))]
    k = len(samples)
    train = tuple(range(k - n_test))
    test = tuple(range(k - n_test, k))
    return TaskDataset(spec, samples, split, train, test)


def random_tasks(
    n_tasks: int,
    n_samples: int,
    input_dim: int,
    output_dim: int,
    seed: int = 0,
    scale: float = 1.0,
    split: str = "offline",
    first_id: int = 0,
) -> List[TaskDataset]:
    """Tasks whose targets are sigmoid maps with task-specific random weights."""
    rng = np.random.default_rng(seed)
    tasks = []
    for m in range(n_tasks):
        x = rng.uniform(0.0, 1.0, (n_samples, input_dim))
        w = rng.normal(0.0, scale, (input_dim, output_dim))
        y = 1.0 / (1.0 + np.exp(-(x @ w - 0.5 * w.sum(axis=0))))
        tasks.append(synthetic_task(first_id + m, x, y, split))
    return tasks


@pytest.fixture
def make_case() -> Callable[..., str]:
    return case_text


@pytest.fixture(scope="session")
def case14_path() -> Path:
    return CASES / "case14.m"


@pytest.fixture(scope="session")
def case14(case14_path):
    return parse_case(case14_path)


@pytest.fixture(scope="session")
def case30():
    return parse_case(CASES / "case30.m")


@pytest.fixture(scope="session")
def case118():
    return parse_case(CASES / "case118.m")


@pytest.fixture
def two_bus() -> Callable[..., object]:
    def build(**kwargs):
        return parse_case_text(two_bus_text(**kwargs))

    return build


@pytest.fixture
def three_bus() -> Callable[..., object]:
    def build(q_limit_mvar: Optional[float] = None):
        text = three_bus_text() if q_limit_mvar is None else three_bus_text(q_limit_mvar)
        return parse_case_text(text)

    return build


@pytest.fixture(scope="session")
def small_corpus(case14):
    """Three case14 topologies, two offline and one online with a held-out split."""
    return build_corpus(case14, m_total=3, m_offline=2, k_per_topology=8, seed=7, test_samples=4)
