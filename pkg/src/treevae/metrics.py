"""Morphometrics and set-level comparison of generated and reference trees."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .io import atomic_write_text
from .preprocessing import branch_paths
from .tree import TreeError, VesselTree

log = logging.getLogger(__name__)

N_BINS = 50
N_POINTS = 256


# -- per-tree morphometrics -------------------------------------------------


def branches(tree: VesselTree) -> list[np.ndarray]:
    """Branch polylines, each a (k, 3) array of positions."""
    pos = tree.positions
    return [pos[p] for p in branch_paths(tree)]


def polyline_length(points) -> float:
    p = np.asarray(points, dtype=np.float64)
    return float(np.linalg.norm(np.diff(p, axis=0), axis=1).sum())


def tortuosity(branch) -> float:
    """Arc length over chord length."""
    p = np.asarray(branch, dtype=np.float64)
    chord = float(np.linalg.norm(p[-1] - p[0]))
    if chord == 0.0:
        raise ValueError("branch endpoints coincide")
    return polyline_length(p) / chord


def tree_tortuosities(tree: VesselTree) -> list[float]:
    out = []
    for b in branches(tree):
        try:
            out.append(tortuosity(b))
        except ValueError:
            log.info("skipping branch with coincident endpoints")
    return out


def total_length(tree: VesselTree) -> float:
    pos = tree.positions
    return float(sum(np.linalg.norm(pos[c] - pos[p]) for p, c in tree.edges()))


def avg_radius(tree: VesselTree) -> float:
    return float(np.mean(tree.radii))


def morphometrics(trees) -> dict[str, np.ndarray]:
    """Pooled values per metric: tortuosity per branch, radius and length per tree."""
    return {
        "radius": np.array([avg_radius(t) for t in trees]),
        "tortuosity": np.array([x for t in trees for x in tree_tortuosities(t)]),
        "length": np.array([total_length(t) for t in trees]),
    }


# -- histograms -------------------------------------------------------------


@dataclass(frozen=True)
class Histogram:
    edges: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        if len(self.edges) != len(self.counts) + 1:
            raise ValueError("need one more edge than counts")
        if np.any(np.asarray(self.counts) < 0):
            raise ValueError("counts must be nonnegative")

    @property
    def bin_width(self) -> float:
        return float(self.edges[1] - self.edges[0])

    @property
    def mass(self) -> np.ndarray:
        total = self.counts.sum()
        return self.counts / total if total else np.zeros(len(self.counts))


def shared_edges(a, b, bins: int = N_BINS) -> np.ndarray:
    """Uniform edges spanning the combined range of ``a`` and ``b``."""
    lo = float(min(np.min(a), np.min(b)))
    hi = float(max(np.max(a), np.max(b)))
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    return np.linspace(lo, hi, bins + 1)


def histogram(values, edges) -> Histogram:
    counts, _ = np.histogram(np.asarray(values, dtype=np.float64), bins=edges)
    return Histogram(np.asarray(edges), counts.astype(np.int64))


def cosine_similarity(u, v) -> float:
    u, v = np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64)
    uu, vv = u @ u, v @ v
    if uu == 0 or vv == 0:
        return float("nan")
    # sqrt of the product keeps integer count vectors exact: identical inputs give 1.0
    return float(np.clip((u @ v) / np.sqrt(uu * vv), -1.0, 1.0))


def histogram_emd(h1: Histogram, h2: Histogram) -> float:
    """1-D earth mover distance between normalized histograms on equal bins."""
    if not np.array_equal(h1.edges, h2.edges):
        raise ValueError("histograms must share bin edges")
    return float(np.abs(np.cumsum(h1.mass) - np.cumsum(h2.mass)).sum() * h1.bin_width)


def histogram_metrics(real, gen, bins: int = N_BINS) -> tuple[float, float]:
    """``(cosine similarity of counts, EMD)`` on a shared uniform binning."""
    real, gen = np.asarray(real, dtype=np.float64), np.asarray(gen, dtype=np.float64)
    if real.size == 0 or gen.size == 0:
        raise ValueError("histogram metrics need nonempty inputs")
    edges = shared_edges(real, gen, bins)
    hr, hg = histogram(real, edges), histogram(gen, edges)
    return cosine_similarity(hr.counts, hg.counts), histogram_emd(hr, hg)


# -- tree distance and set metrics ------------------------------------------


def resample_points(tree: VesselTree, n: int = N_POINTS) -> np.ndarray:
    """``n`` points spaced uniformly in arc length over all edges.

    Edges are laid end to end in preorder, so every branch receives a share
    of points proportional to its length.
    """
    if tree.n_nodes < 2:
        raise TreeError("tree distance needs at least two nodes")
    pos = tree.positions
    parent = tree.parent
    segs = np.array([(parent[c], c) for c in tree.preorder()[1:]])
    a, b = pos[segs[:, 0]], pos[segs[:, 1]]
    lengths = np.linalg.norm(b - a, axis=1)
    total = lengths.sum()
    if total == 0:
        raise TreeError("tree has zero total length")
    cum = np.concatenate([[0.0], np.cumsum(lengths)])
    s = np.linspace(0.0, total, n)
    k = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(segs) - 1)
    while np.any(lengths[k] == 0):  # step past zero-length edges
        k = np.where(lengths[k] == 0, np.minimum(k + 1, len(segs) - 1), k)
    t = np.clip((s - cum[k]) / lengths[k], 0.0, 1.0)
    return a[k] + t[:, None] * (b[k] - a[k])


def chamfer(p, q) -> float:
    """Symmetric Chamfer distance: sum of the two mean squared NN distances."""
    d_pq, _ = cKDTree(q).query(p)
    d_qp, _ = cKDTree(p).query(q)
    return float(np.mean(d_pq**2) + np.mean(d_qp**2))


def tree_distance(a: VesselTree, b: VesselTree, n_points: int = N_POINTS) -> float:
    return chamfer(resample_points(a, n_points), resample_points(b, n_points))


def _clouds(trees, n_points):
    pts = [resample_points(t, n_points) for t in trees]
    return pts, [cKDTree(p) for p in pts]


def _nn_sq_mean(points, kd) -> float:
    d, _ = kd.query(points)
    return float(np.mean(d**2))


def distance_matrix(A, B=None, n_points: int = N_POINTS) -> np.ndarray:
    """Pairwise tree distances between ``A`` and ``B`` (or within ``A``)."""
    pa, ka = _clouds(A, n_points)
    if B is None:
        D = np.zeros((len(pa), len(pa)))
        for i in range(len(pa)):
            for j in range(i + 1, len(pa)):
                D[i, j] = D[j, i] = _nn_sq_mean(pa[i], ka[j]) + _nn_sq_mean(pa[j], ka[i])
        return D
    pb, kb = _clouds(B, n_points)
    D = np.empty((len(pa), len(pb)))
    for i in range(len(pa)):
        for j in range(len(pb)):
            D[i, j] = _nn_sq_mean(pa[i], kb[j]) + _nn_sq_mean(pb[j], ka[i])
    return D


def mmd_from_distances(D_rg) -> float:
    """Mean over real rows of the distance to the closest generated sample."""
    return float(np.min(D_rg, axis=1).mean())


def coverage_from_distances(D_rg) -> float:
    """Fraction of real samples that are the nearest real neighbor of some generated sample."""
    D_rg = np.asarray(D_rg)
    return len(np.unique(np.argmin(D_rg, axis=0))) / D_rg.shape[0]


def one_nna_from_distances(D_rr, D_gg, D_rg) -> float:
    """Leave-one-out 1-NN accuracy on the labeled union.

    A sample counts as correct only when its nearest same-set neighbor is
    strictly closer than its nearest other-set neighbor.
    """
    D_rr = np.array(D_rr, dtype=np.float64)
    D_gg = np.array(D_gg, dtype=np.float64)
    D_rg = np.asarray(D_rg, dtype=np.float64)
    np.fill_diagonal(D_rr, np.inf)
    np.fill_diagonal(D_gg, np.inf)
    ok_r = D_rr.min(axis=1) < D_rg.min(axis=1)
    ok_g = D_gg.min(axis=1) < D_rg.min(axis=0)
    return float((ok_r.sum() + ok_g.sum()) / (len(ok_r) + len(ok_g)))


def mmd(real, gen, n_points: int = N_POINTS) -> float:
    return mmd_from_distances(distance_matrix(real, gen, n_points))


def coverage(real, gen, n_points: int = N_POINTS) -> float:
    return coverage_from_distances(distance_matrix(real, gen, n_points))


def one_nna(real, gen, n_points: int = N_POINTS) -> float:
    return one_nna_from_distances(
        distance_matrix(real, None, n_points), distance_matrix(gen, None, n_points), distance_matrix(real, gen, n_points)
    )


# -- report -----------------------------------------------------------------

MORPHO_METRICS = ("radius", "tortuosity", "length")


@dataclass
class MetricsReport:
    histograms: dict[str, tuple[Histogram, Histogram]] = field(default_factory=dict)
    cs: dict[str, float] = field(default_factory=dict)
    emd: dict[str, float] = field(default_factory=dict)
    mmd: float = float("nan")
    cov: float = float("nan")
    one_nna: float = float("nan")
    n_real: int = 0
    n_gen: int = 0

    def scalars(self) -> dict[str, float]:
        out = {}
        for m in self.cs:
            out[f"cs_{m}"] = self.cs[m]
            out[f"emd_{m}"] = self.emd[m]
        out.update(mmd=self.mmd, cov=self.cov, one_nna=self.one_nna)
        return out

    @property
    def has_nan(self) -> bool:
        return any(math.isnan(v) for v in self.scalars().values())

    def scalars_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# tree distance: symmetric Chamfer on {N_POINTS} arc-length-uniform centerline points (3-D, radius excluded)\n")
        buf.write(f"# n_real={self.n_real} n_gen={self.n_gen}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k, v in self.scalars().items():
            w.writerow([k, repr(float(v))])
        return buf.getvalue()

    def histogram_csv(self, metric: str) -> str:
        hr, hg = self.histograms[metric]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi", "real_count", "gen_count", "real_mass", "gen_mass"])
        for i in range(len(hr.counts)):
            w.writerow([repr(float(hr.edges[i])), repr(float(hr.edges[i + 1])), int(hr.counts[i]), int(hg.counts[i]),
                        repr(float(hr.mass[i])), repr(float(hg.mass[i]))])
        return buf.getvalue()

    def write(self, directory) -> list[Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        paths = [d / "metrics.csv"]
        atomic_write_text(paths[0], self.scalars_csv())
        for m in self.histograms:
            p = d / f"histogram_{m}.csv"
            atomic_write_text(p, self.histogram_csv(m))
            paths.append(p)
        return paths


def evaluate_sets(real, gen, bins: int = N_BINS, n_points: int = N_POINTS, set_metrics: bool = True) -> MetricsReport:
    """Compare a generated set against a reference set."""
    if not real or not gen:
        raise ValueError("both sets must be nonempty")
    rep = MetricsReport(n_real=len(real), n_gen=len(gen))
    mr, mg = morphometrics(real), morphometrics(gen)
    for m in MORPHO_METRICS:
        if mr[m].size == 0 or mg[m].size == 0:
            rep.cs[m] = rep.emd[m] = float("nan")
            continue
        edges = shared_edges(mr[m], mg[m], bins)
        hr, hg = histogram(mr[m], edges), histogram(mg[m], edges)
        rep.histograms[m] = (hr, hg)
        rep.cs[m] = cosine_similarity(hr.counts, hg.counts)
        rep.emd[m] = histogram_emd(hr, hg)
    if set_metrics:
        D_rg = distance_matrix(real, gen, n_points)
        rep.mmd = mmd_from_distances(D_rg)
        rep.cov = coverage_from_distances(D_rg)
        rep.one_nna = one_nna_from_distances(distance_matrix(real, None, n_points), distance_matrix(gen, None, n_points), D_rg)
    return rep
