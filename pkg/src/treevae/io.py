"""Text serialization for trees and tree corpora.

Tree document layout::

    # any comment
    format_version: 1
    units: mm
    root: 0
    nodes: 3
    0 0.0 0.0 0.0 1.0
    1 1.0 0.0 0.0 1.0
    2 2.0 0.0 0.0 0.5
    edges: 2
    0 1 R
    1 2 R

Edge slots are ``L``, ``R`` or ``-`` (unassigned, raw graphs only). Floats are
written with ``repr`` so a write/read cycle is exact.

SWC rows (``id type x y z r parent``) are accepted by :func:`parse_swc`.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np

from .tree import RawCenterlineGraph, TreeError, VesselTree

FORMAT_VERSION = 1
TREE_SUFFIX = ".tree"


class TreeFormatError(TreeError):
    pass


def _strip(lines):
    for raw in lines:
        line = raw.split("#", 1)[0].strip()
        if line:
            yield line


def parse_tree(text: str) -> RawCenterlineGraph:
    """Parse a tree document into a raw graph (slots preserved when given)."""
    lines = list(_strip(text.splitlines()))
    header: dict[str, str] = {}
    pos = 0
    while pos < len(lines) and ":" in lines[pos] and not lines[pos].startswith(("nodes", "edges")):
        key, value = lines[pos].split(":", 1)
        header[key.strip()] = value.strip()
        pos += 1
    if "format_version" not in header:
        raise TreeFormatError("missing format_version header")
    if header["format_version"] != str(FORMAT_VERSION):
        raise TreeFormatError(f"unsupported format_version {header['format_version']!r}")

    def section(name):
        nonlocal pos
        if pos >= len(lines) or not lines[pos].startswith(name + ":"):
            raise TreeFormatError(f"expected '{name}:' section")
        try:
            count = int(lines[pos].split(":", 1)[1])
        except ValueError:
            raise TreeFormatError(f"bad {name} count") from None
        rows = lines[pos + 1 : pos + 1 + count]
        if len(rows) != count:
            raise TreeFormatError(f"truncated {name} section")
        pos += 1 + count
        return [r.split() for r in rows]

    node_rows = section("nodes")
    ids: dict[str, int] = {}
    attrs = np.empty((len(node_rows), 4))
    for k, row in enumerate(node_rows):
        if len(row) != 5:
            raise TreeFormatError(f"node row needs 5 fields: {' '.join(row)}")
        if row[0] in ids:
            raise TreeFormatError(f"duplicate node id {row[0]}")
        ids[row[0]] = k
        try:
            attrs[k] = [float(v) for v in row[1:]]
        except ValueError:
            raise TreeFormatError(f"bad number in node row: {' '.join(row)}") from None
    if not np.all(np.isfinite(attrs)):
        raise TreeFormatError("non-finite attribute")
    if np.any(attrs[:, 3] <= 0):
        raise TreeFormatError("nonpositive radius")

    edges, slots = [], {}
    for row in section("edges"):
        if len(row) != 3 or row[2] not in ("L", "R", "-"):
            raise TreeFormatError(f"bad edge row: {' '.join(row)}")
        try:
            a, b = ids[row[0]], ids[row[1]]
        except KeyError as e:
            raise TreeFormatError(f"edge references unknown node {e.args[0]}") from None
        edges.append((a, b))
        if row[2] != "-":
            slots[(a, b)] = row[2]
    if pos != len(lines):
        raise TreeFormatError("trailing content after edges section")

    root = ids.get(header["root"]) if "root" in header else None
    if "root" in header and root is None:
        raise TreeFormatError(f"root {header['root']} is not a node")
    return RawCenterlineGraph(attrs, edges, root, slots)


def format_tree(tree: VesselTree | RawCenterlineGraph, units: str = "mm", comment: str | None = None) -> str:
    if isinstance(tree, VesselTree):
        tree = tree.compact()
        edges = [(p, c, "L" if tree.left[p] == c else "R") for p, c in tree.edges()]
        root = tree.root
    else:
        edges = [(a, b, tree.slots.get((a, b), "-")) for a, b in tree.edges]
        root = tree.root
    out = []
    if comment:
        out.extend(f"# {line}" for line in comment.splitlines())
    out.append(f"format_version: {FORMAT_VERSION}")
    out.append(f"units: {units}")
    if root is not None:
        out.append(f"root: {root}")
    out.append(f"nodes: {len(tree.attrs)}")
    for i, (x, y, z, r) in enumerate(tree.attrs.tolist()):
        out.append(f"{i} {x!r} {y!r} {z!r} {r!r}")
    out.append(f"edges: {len(edges)}")
    out.extend(f"{a} {b} {s}" for a, b, s in edges)
    return "\n".join(out) + "\n"


def graph_to_tree(graph: RawCenterlineGraph) -> VesselTree:
    """Direct conversion for graphs that are already binary with a known root."""
    from .preprocessing import binarize

    return binarize(graph, graph.root)


def parse_swc(text: str) -> RawCenterlineGraph:
    """SWC import: ``id type x y z r parent`` rows, parent ``-1`` for the root."""
    rows = [line.split() for line in _strip(text.splitlines())]
    ids, attrs, parents = {}, [], []
    for k, row in enumerate(rows):
        if len(row) < 7:
            raise TreeFormatError(f"SWC row needs 7 fields: {' '.join(row)}")
        ids[row[0]] = k
        try:
            attrs.append([float(v) for v in row[2:6]])
        except ValueError:
            raise TreeFormatError(f"bad number in SWC row: {' '.join(row)}") from None
        parents.append(row[6])
    edges, root = [], None
    for k, p in enumerate(parents):
        if int(float(p)) < 0:
            if root is not None:
                raise TreeFormatError("SWC document has more than one root")
            root = k
        elif p not in ids:
            raise TreeFormatError(f"unknown SWC parent {p}")
        else:
            edges.append((ids[p], k))
    return RawCenterlineGraph(np.array(attrs, dtype=np.float64).reshape(-1, 4), edges, root)


def read_graph(path) -> RawCenterlineGraph:
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() == ".swc":
        return parse_swc(text)
    return parse_tree(text)


def read_tree(path) -> VesselTree:
    return graph_to_tree(read_graph(path))


def write_tree(tree, path, units: str = "mm", comment: str | None = None) -> None:
    atomic_write_text(path, format_tree(tree, units=units, comment=comment))


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def corpus_files(directory) -> list[Path]:
    d = Path(directory)
    files = [p for p in d.iterdir() if p.suffix in (TREE_SUFFIX, ".swc") and p.is_file()]
    return sorted(files)


def read_corpus(directory) -> list[VesselTree]:
    trees = []
    for p in corpus_files(directory):
        try:
            trees.append(read_tree(p))
        except TreeError as e:
            raise TreeFormatError(f"{p.name}: {e}") from e
    return trees


def write_corpus(trees, directory, prefix: str = "tree", units: str = "mm", metadata: dict | None = None) -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    width = max(4, len(str(len(trees))))
    paths = []
    for i, t in enumerate(trees):
        p = d / f"{prefix}_{i:0{width}d}{TREE_SUFFIX}"
        write_tree(t, p, units=units)
        paths.append(p)
    if metadata is not None:
        atomic_write_text(d / "corpus.json", json.dumps(metadata, indent=2, sort_keys=True) + "\n")
    return paths


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()

