import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from treevae.tree import NO_CHILD, VesselTree

settings.register_profile("default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@st.composite
def binary_trees(draw, min_nodes=1, max_nodes=12, coords=True):
    """Random valid binary trees; single children always in the right slot."""
    n = draw(st.integers(min_nodes, max_nodes))
    left = [NO_CHILD] * n
    right = [NO_CHILD] * n
    for c in range(1, n):
        open_ = [p for p in range(c) if right[p] == NO_CHILD or left[p] == NO_CHILD]
        p = draw(st.sampled_from(open_))
        if right[p] == NO_CHILD:
            right[p] = c
        else:
            left[p] = c
    if coords:
        seed = draw(st.integers(0, 2**31 - 1))
        rng = np.random.default_rng(seed)
        attrs = np.column_stack([rng.normal(size=(n, 3)), rng.uniform(0.1, 1.0, n)])
    else:
        attrs = np.column_stack([np.zeros((n, 3)), np.ones(n)])
    return VesselTree(attrs, left, right, 0)


@pytest.fixture
def y_tree():
    """Stem of two nodes then two arms: 0 -> 1 -> {2 -> 3, 4}."""
    attrs = np.array(
        [
            [0.0, 0.0, 0.0, 1.0],
            [0.0, 0.0, 1.0, 0.9],
            [-1.0, 0.0, 2.0, 0.8],
            [-2.0, 0.0, 3.0, 0.7],
            [1.0, 0.0, 2.0, 0.8],
        ]
    )
    return VesselTree.from_parents(attrs, [-1, 0, 1, 2, 1], slots=["-", "R", "L", "R", "R"])


@pytest.fixture
def small_corpus():
    from treevae.preprocessing import normalize
    from treevae.synthetic import generate_synthetic_corpus

    trees, norm = normalize(generate_synthetic_corpus(6, seed=11))
    return trees, norm


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
