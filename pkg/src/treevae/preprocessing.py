"""Tree preprocessing: binarization, re-rooting, trimming, resampling and
normalization, each available as a function and as a scikit-learn transformer.
"""

from __future__ import annotations

from collections import deque
from dataclasses import asdict, dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .tree import NO_CHILD, RawCenterlineGraph, TreeError, VesselTree, bfs_heights
from .validation import check_trees


def _best_root(adj: list[list[int]], candidates) -> int:
    best, best_h = None, None
    for i in candidates:
        h = bfs_heights(adj, i)
        if best_h is None or h < best_h:
            best, best_h = i, h
    return best


def binarize(graph: RawCenterlineGraph, root: int | None = None) -> VesselTree:
    """Orient ``graph`` away from ``root`` and split multifurcations.

    A node with children ``c0..c{k-1}`` (k > 2) keeps ``c0`` on the left and
    gets a copy of itself on the right; the copy takes ``c1`` and the next
    copy, and so on, so ``k - 2`` copies are appended after the original
    nodes. Original node indices are preserved.
    """
    adj = graph.adjacency()
    if root is None:
        root = graph.root
    if root is None:
        deg = graph.degree()
        cands = [i for i in range(graph.n_nodes) if deg[i] <= 2] or range(graph.n_nodes)
        root = _best_root(adj, cands)
    if not 0 <= root < graph.n_nodes:
        raise TreeError(f"root {root} out of range")

    attrs = [row for row in graph.attrs]
    left = [NO_CHILD] * graph.n_nodes
    right = [NO_CHILD] * graph.n_nodes

    seen = {root}
    q = deque([root])
    while q:
        p = q.popleft()
        kids = [c for c in adj[p] if c not in seen]
        for c in kids:
            seen.add(c)
            q.append(c)
        if not kids:
            continue
        if len(kids) == 1:
            right[p] = kids[0]
            continue
        if len(kids) == 2:
            a, b = kids
            sa, sb = graph.slots.get((p, a)), graph.slots.get((p, b))
            if (sa, sb) in (("R", "L"), ("R", None), (None, "L")):
                a, b = b, a
            left[p], right[p] = a, b
            continue
        cur = p
        for c in kids[:-2]:
            copy = len(attrs)
            attrs.append(graph.attrs[p].copy())
            left.append(NO_CHILD)
            right.append(NO_CHILD)
            left[cur], right[cur] = c, copy
            cur = copy
        left[cur], right[cur] = kids[-2], kids[-1]
    return VesselTree(np.array(attrs), left, right, root)


def _undirected(tree: VesselTree) -> list[list[int]]:
    adj: list[list[int]] = [[] for _ in range(tree.n_nodes)]
    for p, c in tree.edges():
        adj[p].append(c)
        adj[c].append(p)
    return [sorted(a) for a in adj]


def rebalance_candidates(tree: VesselTree) -> list[int]:
    """Nodes that can serve as root without exceeding two children."""
    adj = _undirected(tree)
    return [i for i in range(tree.n_nodes) if len(adj[i]) <= 2]


def rebalance(tree: VesselTree) -> VesselTree:
    """Re-root ``tree`` at the candidate root of minimum height.

    Candidates are nodes of undirected degree <= 2 so the edge set stays
    unchanged and the result remains binary. Ties go to the smallest index.
    """
    adj = _undirected(tree)
    root = _best_root(adj, rebalance_candidates(tree))
    if root == tree.root:
        return tree
    left = tree.left.copy()
    right = tree.right.copy()
    # walk up from the new root, flipping each edge on the path
    path = [root]
    while tree.parent[path[-1]] != NO_CHILD:
        path.append(int(tree.parent[path[-1]]))
    for child, par in zip(path[:-1], path[1:]):
        # par loses `child`, child gains `par`
        if left[par] == child:
            left[par] = NO_CHILD
        else:
            right[par] = left[par]
            left[par] = NO_CHILD
    for node, old_parent in zip(path[:-1], path[1:]):
        free_right = right[node] == NO_CHILD
        if free_right:
            right[node] = old_parent
        else:
            left[node] = old_parent
    return VesselTree(tree.attrs, left, right, root)


def trim(tree: VesselTree, max_height: int) -> VesselTree:
    """Drop every node deeper than ``max_height``."""
    if max_height < 0:
        raise ValueError("max_height must be >= 0")
    depth = tree.depths()
    if depth.max() <= max_height:
        return tree
    keep = np.flatnonzero(depth <= max_height)
    new_id = np.full(tree.n_nodes, NO_CHILD)
    new_id[keep] = np.arange(len(keep))

    def remap(slot):
        s = slot[keep]
        return np.where(s == NO_CHILD, NO_CHILD, new_id[np.maximum(s, 0)])

    return VesselTree(tree.attrs[keep], remap(tree.left), remap(tree.right), int(new_id[tree.root]))


def point_segment_distance(p, a, b) -> np.ndarray:
    """Euclidean distance from point(s) ``p`` to the segment ``ab``."""
    p = np.asarray(p, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    ab = np.asarray(b, dtype=np.float64) - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return np.linalg.norm(p - a, axis=-1)
    t = np.clip(((p - a) @ ab) / denom, 0.0, 1.0)
    return np.linalg.norm(p - (a + t[..., None] * ab), axis=-1)


def rdp_mask(points, epsilon: float) -> np.ndarray:
    """Boolean keep-mask from Ramer-Douglas-Peucker with segment distances.

    Endpoints are always kept. A point is dropped only if it lies within
    ``epsilon`` of the segment that replaces it.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    keep = np.zeros(n, dtype=bool)
    if n == 0:
        return keep
    keep[0] = keep[-1] = True
    stack = [(0, n - 1)]
    while stack:
        i, j = stack.pop()
        if j - i < 2:
            continue
        d = point_segment_distance(pts[i + 1 : j], pts[i], pts[j])
        k = int(np.argmax(d))
        if d[k] > epsilon:
            m = i + 1 + k
            keep[m] = True
            stack.append((m, j))
            stack.append((i, m))
    return keep


def branch_paths(tree: VesselTree) -> list[list[int]]:
    """Maximal node paths between root/bifurcation anchors and branch ends.

    Each path starts at the root or a bifurcation node, passes through
    single-child nodes and ends at a leaf or a bifurcation node.
    """
    nc = tree.n_children()
    paths = []
    anchors = [tree.root] + [i for i in tree.preorder() if nc[i] == 2 and i != tree.root]
    for a in anchors:
        for c in tree.children(a):
            path = [a, c]
            while nc[path[-1]] == 1:
                path.append(int(tree.right[path[-1]]))
            paths.append(path)
    return paths


def resample_rdp(tree: VesselTree, epsilon: float) -> VesselTree:
    """Simplify every branch with RDP; anchors and branch ends are pinned."""
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    keep = np.ones(tree.n_nodes, dtype=bool)
    pos = tree.positions
    for path in branch_paths(tree):
        mask = rdp_mask(pos[path], epsilon)
        keep[np.asarray(path)[~mask]] = False
    if keep.all():
        return tree

    left = tree.left.copy()
    right = tree.right.copy()
    for path in branch_paths(tree):
        kept = [i for i in path if keep[i]]
        a, first = path[0], kept[1]
        if left[a] == path[1]:
            left[a] = first
        else:
            right[a] = first
        for u, v in zip(kept[1:-1], kept[2:]):
            left[u], right[u] = NO_CHILD, v

    idx = np.flatnonzero(keep)
    new_id = np.full(tree.n_nodes, NO_CHILD)
    new_id[idx] = np.arange(len(idx))

    def remap(slot):
        s = slot[idx]
        return np.where(s == NO_CHILD, NO_CHILD, new_id[np.maximum(s, 0)])

    return VesselTree(tree.attrs[idx], remap(left), remap(right), int(new_id[tree.root]))


@dataclass(frozen=True)
class NormParams:
    spatial_min: float
    spatial_max: float
    r_min: float
    r_max: float

    def __post_init__(self):
        if not self.spatial_max > self.spatial_min:
            raise ValueError("degenerate spatial range")
        if not self.r_max > self.r_min:
            raise ValueError("degenerate radius range")

    @classmethod
    def from_trees(cls, trees) -> "NormParams":
        if not trees:
            raise ValueError("cannot fit normalization on an empty corpus")
        a = np.concatenate([t.attrs for t in trees])
        return cls(float(a[:, :3].min()), float(a[:, :3].max()), float(a[:, 3].min()), float(a[:, 3].max()))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "NormParams":
        return cls(**{k: float(d[k]) for k in ("spatial_min", "spatial_max", "r_min", "r_max")})

    def apply(self, attrs: np.ndarray) -> np.ndarray:
        out = np.array(attrs, dtype=np.float64)
        out[:, :3] = (out[:, :3] - self.spatial_min) / (self.spatial_max - self.spatial_min)
        out[:, 3] = (out[:, 3] - self.r_min) / (self.r_max - self.r_min)
        return out

    def invert(self, attrs: np.ndarray) -> np.ndarray:
        out = np.array(attrs, dtype=np.float64)
        out[:, :3] = out[:, :3] * (self.spatial_max - self.spatial_min) + self.spatial_min
        out[:, 3] = out[:, 3] * (self.r_max - self.r_min) + self.r_min
        return out


def normalize(trees) -> tuple[list[VesselTree], NormParams]:
    norm = NormParams.from_trees(trees)
    return [t.with_attrs(norm.apply(t.attrs)) for t in trees], norm


def denormalize(trees, norm: NormParams) -> list[VesselTree]:
    return [t.with_attrs(norm.invert(t.attrs)) for t in trees]


class _TreeTransformer(TransformerMixin, BaseEstimator):
    """Stateless per-tree transformer; ``fit`` only validates."""

    def fit(self, X, y=None):
        check_trees(X, allow_graphs=True)
        return self

    def transform(self, X):
        return [self._apply(t) for t in check_trees(X, allow_graphs=True)]


class TreeBinarizer(_TreeTransformer):
    """Turn raw centerline graphs (or trees) into binary trees.

    Parameters
    ----------
    root : int or None
        Root index applied to graphs without one. ``None`` selects the
        minimum-height root among nodes of degree <= 2.
    """

    def __init__(self, root=None):
        self.root = root

    def _apply(self, g):
        if isinstance(g, VesselTree):
            g = RawCenterlineGraph.from_tree(g)
        root = g.root if g.root is not None else self.root
        return binarize(g, root)


class TreeRebalancer(_TreeTransformer):
    def _apply(self, t):
        return rebalance(_as_tree(t))


class TreeTrimmer(_TreeTransformer):
    def __init__(self, max_height=10):
        self.max_height = max_height

    def _apply(self, t):
        return trim(_as_tree(t), self.max_height)


class RDPResampler(_TreeTransformer):
    def __init__(self, epsilon=0.2):
        self.epsilon = epsilon

    def _apply(self, t):
        return resample_rdp(_as_tree(t), self.epsilon)


class TreeNormalizer(TransformerMixin, BaseEstimator):
    """Affine map of positions (one shared scale) and radii into [0, 1]."""

    def fit(self, X, y=None):
        self.norm_params_ = NormParams.from_trees(check_trees(X))
        return self

    def transform(self, X):
        check_is_fitted(self)
        return [t.with_attrs(self.norm_params_.apply(t.attrs)) for t in check_trees(X)]

    def inverse_transform(self, X):
        check_is_fitted(self)
        return [t.with_attrs(self.norm_params_.invert(t.attrs)) for t in check_trees(X)]


def _as_tree(t):
    if isinstance(t, RawCenterlineGraph):
        return binarize(t)
    return t


def preprocessing_pipeline(max_height=10, epsilon=0.2):
    """binarize -> rebalance -> trim -> RDP -> normalize."""
    from sklearn.pipeline import make_pipeline

    return make_pipeline(
        TreeBinarizer(),
        TreeRebalancer(),
        TreeTrimmer(max_height=max_height),
        RDPResampler(epsilon=epsilon),
        TreeNormalizer(),
    )
