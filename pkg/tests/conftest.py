import numpy as np
import pytest

from zscmsnb.model import Model, ModelSpec, NeighborGraph, PanelData
from zscmsnb.simulation import GeneratorSpec, generate_dataset


def path_graph(n):
    return NeighborGraph.from_edges(n, [(i, i + 1) for i in range(n - 1)], symmetrize=True)


def make_model(y, graph=None, x=None, z=None, z01c=None, z11c=None, spec=None, init=None):
    y = np.asarray(y)
    graph = graph or path_graph(y.shape[0])
    panel = PanelData(y=y, graph=graph, x=x, z=z, z01c=z01c, z11c=z11c)
    return Model(panel, spec or ModelSpec(), init)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def small_sim():
    """3x3 lattice, 24 times, the default truth."""
    spec = GeneratorSpec(n_rows=3, n_cols=3, n_times=24)
    return generate_dataset(spec, np.random.default_rng(11))


def acceptance_lines(config):
    if not hasattr(config, "_acceptance_lines"):
        config._acceptance_lines = []
    return config._acceptance_lines


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = acceptance_lines(config)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
