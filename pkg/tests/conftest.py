import numpy as np
import pytest

from ckgnn.graph import Graph


def random_graph(rng, n, p=0.3, weighted=False):
    edges = []
    for i in range(n):
        for j in range(i + 1, n):
            if rng.random() < p:
                edges.append((i, j, float(rng.uniform(0.1, 3.0)) if weighted else 1.0))
    return Graph(n, edges)


def dense_a_hat(graph):
    """Dense reference for D^-1/2 (A + I) D^-1/2."""
    a = np.eye(graph.n)
    for i, j, w in graph.edges:
        a[i, j] = a[j, i] = w
    d = a.sum(axis=1)
    return a / np.sqrt(np.outer(d, d))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# One line per acceptance criterion, echoed in the terminal summary.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
