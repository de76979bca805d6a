"""Sampling new trees from the latent prior."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .batching import decode_free_batch
from .model import RvnnModel
from .preprocessing import NormParams
from .tree import VesselTree

log = logging.getLogger(__name__)


class GenerationError(RuntimeError):
    """Raised when too many draws are rejected, usually a degenerate model."""


@dataclass
class SampleResult:
    trees: list[VesselTree]
    n_rejected: int = 0
    reasons: dict = field(default_factory=dict)


def rejection_reason(tree: VesselTree) -> str | None:
    if tree.n_nodes < 2:
        return "too_few_nodes"
    if not np.all(tree.radii > 0):
        return "nonpositive_radius"
    return None


def sample_trees(
    model: RvnnModel,
    norm: NormParams | None,
    n: int,
    seed: int = 0,
    max_depth: int = 10,
    retry_factor: int = 10,
) -> SampleResult:
    """Draw ``n`` trees with ``z ~ N(0, I)``, decode freely, denormalize.

    Draw ``k`` uses its own stream spawned from ``seed``, so the set is
    reproducible and each draw independent of the others. Draws with fewer
    than two nodes or a nonpositive radius are redrawn; more than
    ``retry_factor * n`` rejections raise :class:`GenerationError`.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    if max_depth < 0:
        raise ValueError("max_depth must be >= 0")
    cap = retry_factor * n
    L = model.config.latent_dim
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]
    pending = list(range(n))
    out: list[VesselTree | None] = [None] * n
    reasons: dict[str, int] = {}
    rejected = 0
    while pending:
        Z = np.stack([streams[k].standard_normal(L) for k in pending])
        decoded = decode_free_batch(model, Z, max_depth)
        retry = []
        for k, t in zip(pending, decoded):
            if norm is not None:
                t = t.with_attrs(norm.invert(t.attrs))
            why = rejection_reason(t)
            if why is None:
                out[k] = t
                continue
            rejected += 1
            reasons[why] = reasons.get(why, 0) + 1
            retry.append(k)
        if rejected > cap:
            raise GenerationError(f"{rejected} rejected draws exceed the cap of {cap}: {reasons}")
        pending = retry
    if rejected:
        log.info("rejected %d draws: %s", rejected, reasons)
    return SampleResult(trees=out, n_rejected=rejected, reasons=dict(sorted(reasons.items())))
