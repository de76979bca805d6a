"""Binary vessel trees and raw centerline graphs.

A :class:`VesselTree` stores one row ``[x, y, z, r]`` per centerline node plus
left/right child indices (``-1`` marks an empty slot). Trees are treated as
immutable values: every transformation returns a new tree.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

NO_CHILD = -1


class TreeError(ValueError):
    """Raised for structurally invalid trees or graphs."""


@dataclass(frozen=True)
class TreeStats:
    node_count: int
    bifurcation_count: int
    height: int


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class VesselTree:
    """Rooted binary tree of centerline samples.

    Parameters
    ----------
    attrs : array of shape (n, 4)
        Node attributes ``x, y, z, r``.
    left, right : int arrays of shape (n,)
        Child indices, ``-1`` where the slot is empty. A node with a single
        child always uses the right slot.
    root : int
        Index of the root node.
    """

    attrs: np.ndarray
    left: np.ndarray
    right: np.ndarray
    root: int = 0
    _parent: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        attrs = np.asarray(self.attrs, dtype=np.float64)
        if attrs.ndim != 2 or attrs.shape[1] != 4:
            raise TreeError(f"attrs must have shape (n, 4), got {attrs.shape}")
        n = attrs.shape[0]
        if n == 0:
            raise TreeError("tree has no nodes")
        left = np.asarray(self.left, dtype=np.int64).reshape(-1)
        right = np.asarray(self.right, dtype=np.int64).reshape(-1)
        if left.shape != (n,) or right.shape != (n,):
            raise TreeError("child arrays must have one entry per node")
        if not 0 <= int(self.root) < n:
            raise TreeError(f"root {self.root} out of range")
        if not np.all(np.isfinite(attrs)):
            raise TreeError("non-finite attribute")

        parent = np.full(n, NO_CHILD, dtype=np.int64)
        for slot in (left, right):
            for i in np.flatnonzero(slot != NO_CHILD):
                c = int(slot[i])
                if not 0 <= c < n:
                    raise TreeError(f"child index {c} out of range")
                if parent[c] != NO_CHILD:
                    raise TreeError(f"node {c} has more than one parent")
                parent[c] = i
        if parent[self.root] != NO_CHILD:
            raise TreeError("root has a parent")
        lone_left = (left != NO_CHILD) & (right == NO_CHILD)
        if np.any(lone_left):
            raise TreeError(f"single child must occupy the right slot (node {int(np.flatnonzero(lone_left)[0])})")

        object.__setattr__(self, "attrs", _readonly(attrs))
        object.__setattr__(self, "left", _readonly(left))
        object.__setattr__(self, "right", _readonly(right))
        object.__setattr__(self, "root", int(self.root))
        object.__setattr__(self, "_parent", _readonly(parent))

        # reachability from the root doubles as the acyclicity check
        if len(self.preorder()) != n:
            raise TreeError("tree is not connected or contains a cycle")

    @property
    def n_nodes(self) -> int:
        return self.attrs.shape[0]

    @property
    def parent(self) -> np.ndarray:
        return self._parent

    @property
    def positions(self) -> np.ndarray:
        return self.attrs[:, :3]

    @property
    def radii(self) -> np.ndarray:
        return self.attrs[:, 3]

    def children(self, i: int) -> list[int]:
        """Existing children of ``i``, left before right."""
        return [int(c) for c in (self.left[i], self.right[i]) if c != NO_CHILD]

    def n_children(self) -> np.ndarray:
        return (self.left != NO_CHILD).astype(np.int64) + (self.right != NO_CHILD).astype(np.int64)

    def preorder(self) -> list[int]:
        order, stack, seen = [], [self.root], set()
        while stack:
            i = stack.pop()
            if i in seen:
                continue
            seen.add(i)
            order.append(i)
            # push right first so left is visited first
            for c in (self.right[i], self.left[i]):
                if c != NO_CHILD:
                    stack.append(int(c))
        return order

    def postorder(self) -> list[int]:
        """Children before parents (left subtree, right subtree, node)."""
        out: list[int] = []
        stack: list[tuple[int, bool]] = [(self.root, False)]
        while stack:
            i, expanded = stack.pop()
            if expanded:
                out.append(i)
                continue
            stack.append((i, True))
            for c in (self.right[i], self.left[i]):
                if c != NO_CHILD:
                    stack.append((int(c), False))
        return out

    def depths(self) -> np.ndarray:
        d = np.zeros(self.n_nodes, dtype=np.int64)
        for i in self.preorder():
            p = self._parent[i]
            if p != NO_CHILD:
                d[i] = d[p] + 1
        return d

    @property
    def height(self) -> int:
        return int(self.depths().max())

    def subtree_sizes(self) -> np.ndarray:
        size = np.ones(self.n_nodes, dtype=np.int64)
        for i in self.postorder():
            p = self._parent[i]
            if p != NO_CHILD:
                size[p] += size[i]
        return size

    def edges(self) -> Iterator[tuple[int, int]]:
        for i in self.preorder():
            for c in self.children(i):
                yield i, c

    def node_classes(self) -> np.ndarray:
        """0 = leaf, 1 = one child, 2 = bifurcation."""
        return self.n_children()

    def stats(self) -> TreeStats:
        return TreeStats(
            node_count=self.n_nodes,
            bifurcation_count=int(np.sum(self.n_children() == 2)),
            height=self.height,
        )

    def with_attrs(self, attrs: np.ndarray) -> "VesselTree":
        return VesselTree(attrs, self.left, self.right, self.root)

    def compact(self) -> "VesselTree":
        """Relabel nodes in preorder so the root is node 0."""
        order = self.preorder()
        new_id = {old: new for new, old in enumerate(order)}
        left = np.full(len(order), NO_CHILD)
        right = np.full(len(order), NO_CHILD)
        for old, new in new_id.items():
            if self.left[old] != NO_CHILD:
                left[new] = new_id[int(self.left[old])]
            if self.right[old] != NO_CHILD:
                right[new] = new_id[int(self.right[old])]
        return VesselTree(self.attrs[order], left, right, 0)

    def structure_equal(self, other: "VesselTree") -> bool:
        """Same topology (child slots matter), attributes ignored."""
        a, b = self.compact(), other.compact()
        return a.n_nodes == b.n_nodes and np.array_equal(a.left, b.left) and np.array_equal(a.right, b.right)

    def __eq__(self, other):
        if not isinstance(other, VesselTree):
            return NotImplemented
        a, b = self.compact(), other.compact()
        return (
            a.n_nodes == b.n_nodes
            and np.array_equal(a.left, b.left)
            and np.array_equal(a.right, b.right)
            and np.array_equal(a.attrs, b.attrs)
        )

    __hash__ = None

    def __repr__(self):
        s = self.stats()
        return f"VesselTree(nodes={s.node_count}, bifurcations={s.bifurcation_count}, height={s.height})"

    @classmethod
    def from_parents(cls, attrs, parents, slots=None) -> "VesselTree":
        """Build a tree from a parent array (``-1`` for the root).

        ``slots`` optionally gives ``"L"``/``"R"`` per node; otherwise a lone
        child goes right and two children are placed left/right by index.
        """
        attrs = np.asarray(attrs, dtype=np.float64)
        parents = [int(p) for p in parents]
        n = len(parents)
        roots = [i for i, p in enumerate(parents) if p < 0]
        if len(roots) != 1:
            raise TreeError(f"expected exactly one root, found {len(roots)}")
        kids: list[list[int]] = [[] for _ in range(n)]
        for i, p in enumerate(parents):
            if p >= 0:
                kids[p].append(i)
        left = np.full(n, NO_CHILD)
        right = np.full(n, NO_CHILD)
        for p, cs in enumerate(kids):
            if len(cs) > 2:
                raise TreeError(f"node {p} has {len(cs)} children; binarize first")
            if slots is not None and cs:
                for c in cs:
                    if slots[c] == "L":
                        if left[p] != NO_CHILD:
                            raise TreeError(f"node {p} has two left children")
                        left[p] = c
                    elif slots[c] == "R":
                        if right[p] != NO_CHILD:
                            raise TreeError(f"node {p} has two right children")
                        right[p] = c
                    else:
                        raise TreeError(f"invalid slot {slots[c]!r}")
            elif len(cs) == 1:
                right[p] = cs[0]
            elif len(cs) == 2:
                left[p], right[p] = cs
        return cls(attrs, left, right, roots[0])


def path_tree(points, radii=None) -> VesselTree:
    """Chain of nodes, each the right child of the previous one."""
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    r = np.ones(n) if radii is None else np.broadcast_to(np.asarray(radii, dtype=np.float64), (n,))
    attrs = np.column_stack([pts, r])
    right = np.append(np.arange(1, n), NO_CHILD)
    return VesselTree(attrs, np.full(n, NO_CHILD), right, 0)


def full_binary_tree(height: int, attrs=None) -> VesselTree:
    """Complete binary tree, heap-indexed (children of i are 2i+1, 2i+2)."""
    n = 2 ** (height + 1) - 1
    idx = np.arange(n)
    left = np.where(2 * idx + 1 < n, 2 * idx + 1, NO_CHILD)
    right = np.where(2 * idx + 2 < n, 2 * idx + 2, NO_CHILD)
    if attrs is None:
        attrs = np.column_stack([np.zeros((n, 3)), np.ones(n)])
        attrs[:, 0] = np.floor(np.log2(idx + 1))
        attrs[:, 1] = idx
    return VesselTree(attrs, left, right, 0)


@dataclass
class RawCenterlineGraph:
    """Undirected, acyclic centerline graph prior to binarization.

    ``slots`` maps a directed edge ``(parent, child)`` to ``"L"``/``"R"`` when
    the source document fixed it.
    """

    attrs: np.ndarray
    edges: list[tuple[int, int]]
    root: int | None = None
    slots: dict[tuple[int, int], str] = field(default_factory=dict)

    def __post_init__(self):
        self.attrs = np.asarray(self.attrs, dtype=np.float64)
        if self.attrs.ndim != 2 or self.attrs.shape[1] != 4 or len(self.attrs) == 0:
            raise TreeError("attrs must be a non-empty (n, 4) array")
        if not np.all(np.isfinite(self.attrs)):
            raise TreeError("non-finite attribute")
        if np.any(self.attrs[:, 3] <= 0):
            raise TreeError("nonpositive radius")
        n = len(self.attrs)
        for a, b in self.edges:
            if not (0 <= a < n and 0 <= b < n) or a == b:
                raise TreeError(f"invalid edge ({a}, {b})")
        _check_forest(n, self.edges)

    @property
    def n_nodes(self) -> int:
        return len(self.attrs)

    def adjacency(self) -> list[list[int]]:
        adj: list[list[int]] = [[] for _ in range(self.n_nodes)]
        for a, b in self.edges:
            adj[a].append(b)
            adj[b].append(a)
        return [sorted(x) for x in adj]

    def degree(self) -> np.ndarray:
        return np.array([len(x) for x in self.adjacency()], dtype=np.int64)

    @classmethod
    def from_tree(cls, tree: VesselTree) -> "RawCenterlineGraph":
        edges = list(tree.edges())
        slots = {}
        for i in range(tree.n_nodes):
            if tree.left[i] != NO_CHILD:
                slots[(i, int(tree.left[i]))] = "L"
            if tree.right[i] != NO_CHILD:
                slots[(i, int(tree.right[i]))] = "R"
        return cls(tree.attrs.copy(), edges, tree.root, slots)


def _check_forest(n: int, edges) -> None:
    """Union-find cycle detection; also rejects disconnected graphs."""
    parent = list(range(n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for a, b in edges:
        ra, rb = find(a), find(b)
        if ra == rb:
            raise TreeError("cycle detected")
        parent[ra] = rb
    if len(edges) != n - 1:
        raise TreeError("graph is not connected")


def bfs_heights(adj: list[list[int]], root: int) -> int:
    """Height of the tree obtained by rooting an undirected tree at ``root``."""
    depth = {root: 0}
    q = deque([root])
    while q:
        u = q.popleft()
        for v in adj[u]:
            if v not in depth:
                depth[v] = depth[u] + 1
                q.append(v)
    return max(depth.values())
