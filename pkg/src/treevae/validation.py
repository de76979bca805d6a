"""Input validation helpers shared by the estimators."""

from __future__ import annotations

import numpy as np

from .tree import RawCenterlineGraph, VesselTree


def check_trees(X, allow_graphs: bool = False, min_nodes: int = 1) -> list:
    """Validate a collection of trees and return it as a list.

    A single tree is rejected rather than silently wrapped so that the
    sample axis stays explicit, as with 2-D arrays in scikit-learn.
    """
    if isinstance(X, (VesselTree, RawCenterlineGraph)):
        raise TypeError("expected a sequence of trees, got a single tree; wrap it in a list")
    try:
        trees = list(X)
    except TypeError:
        raise TypeError(f"expected a sequence of trees, got {type(X).__name__}") from None
    if not trees:
        raise ValueError("found an empty collection of trees")
    allowed = (VesselTree, RawCenterlineGraph) if allow_graphs else (VesselTree,)
    for i, t in enumerate(trees):
        if not isinstance(t, allowed):
            raise TypeError(f"element {i} is a {type(t).__name__}, not a tree")
        if t.n_nodes < min_nodes:
            raise ValueError(f"tree {i} has {t.n_nodes} nodes; at least {min_nodes} required")
    return trees


def check_latent(Z, latent_dim: int) -> np.ndarray:
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim == 1:
        Z = Z[None, :]
    if Z.ndim != 2 or Z.shape[1] != latent_dim:
        raise ValueError(f"expected latent codes of shape (n, {latent_dim}), got {Z.shape}")
    if not np.all(np.isfinite(Z)):
        raise ValueError("latent codes contain NaN or inf")
    return Z


def check_random_state(seed) -> np.random.Generator:
    """Like sklearn's helper but for the new-style ``Generator`` API."""
    if isinstance(seed, np.random.Generator):
        return seed
    if seed is None or isinstance(seed, (int, np.integer)):
        return np.random.default_rng(seed)
    raise ValueError(f"{seed!r} cannot be used to seed a numpy Generator")
