import itertools
from collections import deque

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from treevae.preprocessing import (
    NormParams,
    RDPResampler,
    TreeNormalizer,
    binarize,
    branch_paths,
    denormalize,
    normalize,
    preprocessing_pipeline,
    rdp_mask,
    rebalance,
    resample_rdp,
    trim,
)
from treevae.synthetic import SynthParams, generate_synthetic_corpus
from treevae.tree import NO_CHILD, RawCenterlineGraph, TreeError, VesselTree, full_binary_tree, path_tree

from .conftest import binary_trees

# -- independent oracles ----------------------------------------------------


def prufer_trees(n):
    """Every labeled tree on ``n`` nodes, as edge lists."""
    if n == 1:
        yield []
        return
    if n == 2:
        yield [(0, 1)]
        return
    for seq in itertools.product(range(n), repeat=n - 2):
        degree = [1] * n
        for x in seq:
            degree[x] += 1
        edges = []
        for x in seq:
            leaf = min(i for i in range(n) if degree[i] == 1)
            edges.append((leaf, x))
            degree[leaf] -= 1
            degree[x] -= 1
        u, v = [i for i in range(n) if degree[i] == 1]
        edges.append((u, v))
        yield edges


def rooted_height(n, edges, root):
    adj = [[] for _ in range(n)]
    for a, b in edges:
        adj[a].append(b)
        adj[b].append(a)
    depth = {root: 0}
    q = deque([root])
    while q:
        u = q.popleft()
        for v in adj[u]:
            if v not in depth:
                depth[v] = depth[u] + 1
                q.append(v)
    return max(depth.values())


def brute_force_min_height(tree: VesselTree):
    """Try every node as root; keep the roots that give a valid binary tree on
    the same edge set, and return the minimum height among them."""
    n = tree.n_nodes
    edges = list(tree.edges())
    best = None
    for r in range(n):
        parents = [-2] * n
        parents[r] = -1
        adj = [[] for _ in range(n)]
        for a, b in edges:
            adj[a].append(b)
            adj[b].append(a)
        q = deque([r])
        while q:
            u = q.popleft()
            for v in adj[u]:
                if parents[v] == -2:
                    parents[v] = u
                    q.append(v)
        try:
            VesselTree.from_parents(tree.attrs, parents)
        except TreeError:
            continue
        h = rooted_height(n, edges, r)
        best = h if best is None else min(best, h)
    return best


def edge_set(tree):
    return {frozenset(e) for e in tree.edges()}


def polyline_distance(p, poly):
    """Distance from ``p`` to a polyline, by projecting onto every segment."""
    best = np.inf
    for a, b in zip(poly[:-1], poly[1:]):
        ab = b - a
        t = 0.0 if not ab.any() else np.clip((p - a) @ ab / (ab @ ab), 0, 1)
        best = min(best, np.linalg.norm(p - (a + t * ab)))
    return best


# -- binarize ---------------------------------------------------------------


@pytest.mark.parametrize("n", range(1, 7))
def test_binarize_exhaustive(n):
    rng = np.random.default_rng(n)
    for edges in prufer_trees(n):
        attrs = np.column_stack([rng.normal(size=(n, 3)), rng.uniform(0.5, 1, n)])
        g = RawCenterlineGraph(attrs, edges)
        for root in range(n):
            t = binarize(g, root)
            assert np.all(t.n_children() <= 2)
            assert t.root == root
            # original positions untouched, copies duplicate their source
            assert np.array_equal(t.attrs[:n], attrs)
            deg = [0] * n
            for a, b in edges:
                deg[a] += 1
                deg[b] += 1
            n_kids = [deg[i] - (i != root) for i in range(n)]
            assert t.n_nodes == n + sum(max(0, k - 2) for k in n_kids)
            for c in range(n, t.n_nodes):
                src = t.parent[c]
                while src >= n:
                    src = t.parent[src]
                assert np.array_equal(t.attrs[c], attrs[src])
            # contracting the copies gives back the input edges
            def orig(i):
                while i >= n:
                    i = int(t.parent[i])
                return i

            contracted = {frozenset((orig(p), c)) for p, c in t.edges() if c < n}
            assert contracted == {frozenset(e) for e in edges}
            # leaves are unchanged
            leaves_in = {i for i in range(n) if n_kids[i] == 0}
            assert {i for i in range(t.n_nodes) if t.n_children()[i] == 0} == leaves_in


def test_binarize_three_children():
    attrs = np.array([[0, 0, 0, 1], [1, 0, 0, 1], [0, 1, 0, 1], [0, 0, 1, 1.0]])
    t = binarize(RawCenterlineGraph(attrs, [(0, 1), (0, 2), (0, 3)]), 0)
    assert t.n_nodes == 5
    assert t.left[0] == 1 and t.right[0] == 4
    assert np.array_equal(t.attrs[4], attrs[0])
    assert t.children(4) == [2, 3]


def test_binarize_binary_is_identity():
    t = full_binary_tree(3)
    assert binarize(RawCenterlineGraph.from_tree(t), 0) == t


# -- rebalance --------------------------------------------------------------


def test_rebalance_path():
    t = rebalance(path_tree(np.arange(15).reshape(5, 3)))
    assert t.root == 2 and t.height == 2
    assert edge_set(t) == edge_set(path_tree(np.arange(15).reshape(5, 3)))


def test_rebalance_single_node():
    t = VesselTree(np.ones((1, 4)), [NO_CHILD], [NO_CHILD])
    assert rebalance(t) is t


def test_rebalance_keeps_optimal_root():
    t = path_tree(np.zeros((3, 3)))
    t = VesselTree.from_parents(t.attrs, [1, -1, 1])
    assert rebalance(t).root == 1


@given(binary_trees(max_nodes=12))
def test_rebalance_matches_brute_force(t):
    r = rebalance(t)
    assert r.height == brute_force_min_height(t)
    assert edge_set(r) == edge_set(t)
    assert np.array_equal(r.attrs, t.attrs)


# -- trim -------------------------------------------------------------------


@given(binary_trees(max_nodes=20), st.integers(0, 6))
def test_trim_height_and_idempotence(t, h):
    once = trim(t, h)
    assert once.height <= min(h, t.height)
    assert trim(once, h) == once
    if h >= t.height:
        assert once is t


def test_trim_path_of_16():
    t = path_tree(np.zeros((16, 3)))
    assert trim(t, 15) is t
    assert trim(t, 5).height == 5


# -- RDP --------------------------------------------------------------------


def test_rdp_example():
    pts = np.array([[0, 0, 0], [0.05, 0.5, 0], [0, 1, 0]])
    assert list(rdp_mask(pts, 0.1)) == [True, False, True]
    assert rdp_mask(pts, 0.0).all()


def test_rdp_collinear():
    pts = np.column_stack([np.linspace(0, 1, 5), np.zeros(5), np.zeros(5)])
    assert list(rdp_mask(pts, 1e-6)) == [True, False, False, False, True]


@given(binary_trees(max_nodes=25), st.sampled_from([0.05, 0.2, 0.5, 1.0]))
def test_rdp_deviation_bounded(t, eps):
    r = resample_rdp(t, eps)
    # kept nodes keep their attributes; leaves and bifurcations survive
    kept = {tuple(a) for a in r.attrs}
    nc = t.n_children()
    for i in range(t.n_nodes):
        if nc[i] != 1 or i == t.root:
            assert tuple(t.attrs[i]) in kept
    assert r.stats().bifurcation_count == t.stats().bifurcation_count
    # every removed node lies within eps of the simplified branch through it
    for path in branch_paths(t):
        keep = [i for i in path if tuple(t.attrs[i]) in kept]
        poly = t.positions[keep]
        for i in path:
            if tuple(t.attrs[i]) not in kept:
                assert polyline_distance(t.positions[i], poly) <= eps + 1e-12


def test_rdp_epsilon_zero_keeps_everything():
    t = generate_synthetic_corpus(1, seed=5)[0]
    assert resample_rdp(t, 0.0) == t


# -- normalization ----------------------------------------------------------


def test_normalize_examples():
    a = np.array([[2, 2, 2, 1.0], [10, 6, 6, 3.0]])
    t = VesselTree.from_parents(a, [-1, 0])
    (n,), norm = normalize([t])
    assert n.attrs[1, 1] == pytest.approx(0.5)
    assert n.attrs[0, 3] == 0.0
    assert norm == NormParams(2.0, 10.0, 1.0, 3.0)


@given(binary_trees(min_nodes=3, max_nodes=15))
def test_normalize_round_trip_and_shape(t):
    (n,), norm = normalize([t])
    assert n.attrs.min() >= 0 and n.attrs.max() <= 1
    back = denormalize([n], norm)[0]
    assert np.abs(back.attrs - t.attrs).max() < 1e-9
    d0 = np.linalg.norm(t.positions[1] - t.positions[0])
    d1 = np.linalg.norm(t.positions[2] - t.positions[0])
    e0 = np.linalg.norm(n.positions[1] - n.positions[0])
    e1 = np.linalg.norm(n.positions[2] - n.positions[0])
    assert d0 * e1 == pytest.approx(d1 * e0, rel=1e-9, abs=1e-12)


def test_norm_params_dict_round_trip():
    p = NormParams(-1.0, 2.5, 0.1, 0.9)
    assert NormParams.from_dict(p.to_dict()) == p
    with pytest.raises(ValueError):
        NormParams(1.0, 1.0, 0.0, 1.0)


# -- synthetic fixture ------------------------------------------------------


def test_synthetic_determinism_and_height():
    a = generate_synthetic_corpus(100, seed=7)
    b = generate_synthetic_corpus(100, seed=7)
    assert a == b
    assert max(t.height for t in a) <= 5


def test_synthetic_decay_and_no_branching():
    trees = generate_synthetic_corpus(20, seed=1, params=SynthParams(decay=0.8, branch_prob=0.0))
    for t in trees:
        assert t.stats().bifurcation_count == 0
        for p, c in t.edges():
            assert t.radii[c] == pytest.approx(0.8 * t.radii[p])


# -- transformers -----------------------------------------------------------


def test_pipeline_end_to_end():
    graphs = [RawCenterlineGraph.from_tree(t) for t in generate_synthetic_corpus(5, seed=2)]
    pipe = preprocessing_pipeline(max_height=3, epsilon=0.2)
    out = pipe.fit_transform(graphs)
    assert len(out) == 5
    assert all(t.height <= 3 for t in out)
    assert all(t.attrs.min() >= 0 and t.attrs.max() <= 1 for t in out)
    back = pipe[-1].inverse_transform(out)
    assert back[0].attrs[:, 3].min() > 0


def test_transformer_params_and_errors():
    assert RDPResampler(epsilon=0.1).get_params() == {"epsilon": 0.1}
    with pytest.raises(TypeError, match="single tree"):
        TreeNormalizer().fit(full_binary_tree(1))
    from sklearn.exceptions import NotFittedError

    with pytest.raises(NotFittedError):
        TreeNormalizer().transform([full_binary_tree(1)])
