"""Shared builders for small graphs used across the test suite."""
from __future__ import annotations

import numpy as np
import pytest

from hetlink.graph import RawEdge, build_graph
from hetlink.synthetic import generate_random_typed


def toy_dti_graph():
    """Small drug/protein/disease graph; drugs are heads, proteins tails."""
    edges = [
        RawEdge("drug", "d0", "binds", "protein", "p0"),
        RawEdge("drug", "d0", "binds", "protein", "p1"),
        RawEdge("drug", "d1", "binds", "protein", "p1"),
        RawEdge("drug", "d1", "treats", "disease", "z0"),
        RawEdge("disease", "z0", "involves", "protein", "p2"),
        RawEdge("drug", "d0", "treats", "disease", "z1"),
        RawEdge("disease", "z1", "involves", "protein", "p0"),
        RawEdge("protein", "p0", "similar", "protein", "p2"),
        RawEdge("protein", "p1", "similar", "protein", "p2"),
    ]
    return build_graph(edges, ["drug"], ["protein"])


def random_interest_graph(seed: int, max_nodes: int = 30):
    """Random typed graph with head/tail/inner node types, densely wired."""
    rng = np.random.default_rng(seed)
    n_heads = int(rng.integers(2, max(3, max_nodes // 3)))
    n_tails = int(rng.integers(2, max(3, max_nodes // 3)))
    n_inner = int(rng.integers(1, max(2, max_nodes // 3)))
    total = n_heads + n_tails + n_inner
    n_edges = int(rng.integers(total, 4 * total))
    n_edge_types = int(rng.integers(1, 6))
    edges = generate_random_typed(
        [n_heads, n_tails, n_inner],
        n_edges,
        n_edge_types,
        seed=int(rng.integers(0, 2**31)),
        type_names=["H", "T", "I"],
    )
    return build_graph(edges, ["H"], ["T"])


@pytest.fixture
def dti_graph():
    return toy_dti_graph()
