from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cotope.errors import ArgumentError, GraphIntegrityError, TruncatedWalkError
from cotope.graph import KnowledgeGraph, chain_graph, generate_synthetic
from cotope.walk import Trajectory, load_trajectories, sample_walk, sample_walk_set, save_trajectories


def test_forced_chain_path():
    g = chain_graph()
    assert sample_walk(g, "Q1", 2).steps == (0, 0, 1, 0, 2)


def test_sink_start_truncates_with_empty_partial():
    g = chain_graph()
    with pytest.raises(TruncatedWalkError) as exc:
        sample_walk(g, "Q3", 1)
    assert exc.value.partial.hop_count == 0
    assert exc.value.partial.entities == (2,)


def test_first_hop_uniform():
    g = KnowledgeGraph(("A", "B", "C", "D"), ("a", "b", "c", "d"), ("R",), ("r",), ((0, 0, 1), (0, 0, 2), (0, 0, 3)))
    import numpy as np

    rng = np.random.default_rng(0)
    counts = Counter(sample_walk(g, 0, 1, rng).entities[1] for _ in range(30000))
    for t in (1, 2, 3):
        assert abs(counts[t] / 30000 - 1 / 3) < 0.02


def test_empty_count():
    assert sample_walk_set(chain_graph(), 0) == []


def test_hop_range_contract():
    # ring with two relations: strongly connected
    n = 6
    edges = [(i, r, (i + 1 + r) % n) for i in range(n) for r in (0, 1)]
    g = KnowledgeGraph(tuple(f"E{i}" for i in range(n)), tuple(f"e{i}" for i in range(n)), ("R0", "R1"), ("r0", "r1"), tuple(edges))
    walks = sample_walk_set(g, 100, (2, 4), 5)
    assert len(walks) == 100
    assert {w.hop_count for w in walks} <= {2, 3, 4}
    assert all(w.is_valid_for(g) for w in walks)


def test_deterministic():
    g = generate_synthetic(50, 4, 2, 1.0, 2)
    assert sample_walk_set(g, 40, (1, 3), 8) == sample_walk_set(g, 40, (1, 3), 8)


def test_bad_hop_range():
    with pytest.raises(ArgumentError):
        sample_walk_set(chain_graph(), 3, (0, 2))
    with pytest.raises(ArgumentError):
        sample_walk(chain_graph(), 0, 0)


def test_trajectory_validation():
    with pytest.raises(ArgumentError):
        Trajectory((0, 1))
    with pytest.raises(ArgumentError):
        Trajectory((0,), reward=1.5)


def test_no_revisit():
    g = KnowledgeGraph(("A", "B"), ("a", "b"), ("R",), ("r",), ((0, 0, 1), (1, 0, 0)))
    with pytest.raises(TruncatedWalkError):
        sample_walk(g, 0, 2, 0, no_revisit=True)
    assert sample_walk(g, 0, 2, 0).entities == (0, 1, 0)


def test_save_load(tmp_path):
    g = generate_synthetic(20, 3, 2, 0.0, 1)
    walks = sample_walk_set(g, 25, (1, 3), 4)
    path = tmp_path / "w.jsonl"
    save_trajectories(path, walks, g)
    assert load_trajectories(path, g) == walks
    with pytest.raises(GraphIntegrityError):
        load_trajectories(path, chain_graph())


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6), lo=st.integers(1, 3), extra=st.integers(0, 2))
def test_walks_follow_edges(seed, lo, extra):
    g = generate_synthetic(15, 3, 2, 0.5, seed % 97)
    walks = sample_walk_set(g, 10, (lo, lo + extra), seed)
    for w in walks:
        assert lo <= w.hop_count <= lo + extra
        assert w.is_valid_for(g)
