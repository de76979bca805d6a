"""Depth-wise dynamic batching.

All nodes at the same depth across the trees of a batch are stacked into one
row block, so every layer runs once per depth level. Encoding walks the
levels deepest first, decoding walks them root first.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .model import RvnnModel, class_weights, node_weights
from .tree import NO_CHILD, VesselTree

LEFT, RIGHT = 0, 1


@dataclass
class DepthLevel:
    tree: np.ndarray  # batch index of the tree owning each row
    node: np.ndarray  # node index within that tree
    left_row: np.ndarray  # row of the left child in the next level, or -1
    right_row: np.ndarray
    parent_row: np.ndarray  # row of the parent in the previous level, or -1
    side: np.ndarray  # LEFT / RIGHT relative to the parent, -1 at roots

    def __len__(self):
        return len(self.node)


@dataclass
class DepthSchedule:
    levels: list[DepthLevel]
    n_trees: int

    @property
    def n_nodes(self) -> int:
        return sum(len(lv) for lv in self.levels)

    def flat_index(self) -> tuple[np.ndarray, np.ndarray]:
        """(tree, node) of every row when the levels are concatenated root first."""
        return (
            np.concatenate([lv.tree for lv in self.levels]),
            np.concatenate([lv.node for lv in self.levels]),
        )

    def encoding_order(self):
        return list(reversed(self.levels))

    def decoding_order(self):
        return list(self.levels)


def build_depth_schedule(trees) -> DepthSchedule:
    if not trees:
        raise ValueError("empty batch")
    tree_ids = np.arange(len(trees))
    nodes = np.array([t.root for t in trees], dtype=np.int64)
    parent_row = np.full(len(trees), -1, dtype=np.int64)
    side = np.full(len(trees), -1, dtype=np.int64)
    levels = []
    while len(nodes):
        nt, nn, npar, nside = [], [], [], []
        left_row = np.full(len(nodes), -1, dtype=np.int64)
        right_row = np.full(len(nodes), -1, dtype=np.int64)
        for row, (b, i) in enumerate(zip(tree_ids, nodes)):
            t = trees[b]
            for s, slot, out in ((LEFT, t.left, left_row), (RIGHT, t.right, right_row)):
                c = slot[i]
                if c != NO_CHILD:
                    out[row] = len(nn)
                    nt.append(b)
                    nn.append(int(c))
                    npar.append(row)
                    nside.append(s)
        levels.append(DepthLevel(tree_ids, nodes, left_row, right_row, parent_row, side))
        tree_ids = np.array(nt, dtype=np.int64)
        nodes = np.array(nn, dtype=np.int64)
        parent_row = np.array(npar, dtype=np.int64)
        side = np.array(nside, dtype=np.int64)
    return DepthSchedule(levels, len(trees))


def encode_batch(model: RvnnModel, trees, schedule: DepthSchedule | None = None) -> ad.Tensor:
    """Root embeddings, one row per tree in batch order."""
    schedule = schedule or build_depth_schedule(trees)
    D = model.config.embed_dim
    below = None
    for lv in schedule.encoding_order():
        k = len(lv)
        x = np.stack([trees[b].attrs[i] for b, i in zip(lv.tree, lv.node)])
        partial = model.enc_partial(model.const(x))
        summed = None
        for name, rows in (("right", lv.right_row), ("left", lv.left_row)):
            has = rows >= 0
            if not has.any():
                continue
            out = model.enc_child(ad.take_rows(below, rows[has]), name)
            if not has.all():
                out = ad.scatter_rows(out, np.flatnonzero(has), k)
            summed = out if summed is None else ad.add(summed, out)
        if summed is None:
            summed = ad.zeros((k, D), model.dtype)
        below = model.enc_merge(partial, summed)
    return below


def _child_latents(model: RvnnModel, hidden: ad.Tensor, nxt: DepthLevel) -> ad.Tensor:
    pieces, perm, offset = [], np.empty(len(nxt), dtype=np.int64), 0
    for code, name in ((RIGHT, "right"), (LEFT, "left")):
        sel = np.flatnonzero(nxt.side == code)
        if not len(sel):
            continue
        pieces.append(model.dec_child(ad.take_rows(hidden, nxt.parent_row[sel]), name))
        perm[sel] = offset + np.arange(len(sel))
        offset += len(sel)
    stacked = pieces[0] if len(pieces) == 1 else ad.concat(pieces, axis=0)
    if np.array_equal(perm, np.arange(len(perm))):
        return stacked
    return ad.take_rows(stacked, perm)


def decode_batch(model: RvnnModel, z: ad.Tensor, schedule: DepthSchedule) -> tuple[ad.Tensor, ad.Tensor]:
    """Teacher-forced decoding of the scheduled topologies.

    Returns attribute predictions (N, 4) and class logits (N, 3) with rows in
    the order of :meth:`DepthSchedule.flat_index`.
    """
    latent = model.gz(z)
    attrs, logits = [], []
    levels = schedule.decoding_order()
    for d, lv in enumerate(levels):
        h = model.dec_hidden(latent)
        a, c = model.dec_node(h)
        attrs.append(a)
        logits.append(c)
        if d + 1 < len(levels):
            latent = _child_latents(model, h, levels[d + 1])
    if len(attrs) == 1:
        return attrs[0], logits[0]
    return ad.concat(attrs, axis=0), ad.concat(logits, axis=0)


@dataclass
class BatchTargets:
    """Constant per-row targets and loss weights for one scheduled batch."""

    attrs: np.ndarray
    classes: np.ndarray
    recon_w: np.ndarray
    topo_w: np.ndarray
    tree_of_row: np.ndarray
    nodes_per_tree: np.ndarray


def batch_targets(trees, schedule, cls_weights, scheme="uniform", alpha=0.3) -> BatchTargets:
    tree_of, node_of = schedule.flat_index()
    B = len(trees)
    n_per = np.array([t.n_nodes for t in trees], dtype=np.float64)
    nw = [node_weights(t, scheme) for t in trees]
    classes = np.array([trees[b].node_classes()[i] for b, i in zip(tree_of, node_of)], dtype=np.int64)
    attrs = np.stack([trees[b].attrs[i] for b, i in zip(tree_of, node_of)])
    w_node = np.array([nw[b][i] for b, i in zip(tree_of, node_of)])
    scale = 1.0 / (n_per[tree_of] * B)
    return BatchTargets(
        attrs=attrs,
        classes=classes,
        recon_w=(1 - alpha) * scale,
        topo_w=alpha * w_node * np.asarray(cls_weights)[classes] * scale,
        tree_of_row=tree_of,
        nodes_per_tree=n_per,
    )


def batch_loss(
    model: RvnnModel,
    trees,
    cls_weights=None,
    scheme="uniform",
    alpha=0.3,
    gamma=0.001,
    rng=None,
    eps=None,
    deterministic=False,
):
    """Mean over the batch of the per-tree objective.

    Returns ``(loss, parts)``; ``parts`` holds batch means of the recon,
    topo and KL terms as floats.
    """
    if cls_weights is None:
        from .model import class_counts

        cls_weights = class_weights(class_counts(trees))
    schedule = build_depth_schedule(trees)
    tg = batch_targets(trees, schedule, cls_weights, scheme, alpha)
    B = len(trees)

    emb = encode_batch(model, trees, schedule)
    mu, logvar = model.latent_heads(emb)
    if deterministic:
        z = mu
    else:
        if eps is None:
            eps = rng.standard_normal(mu.shape)
        std = ad.exp(ad.scale(logvar, 0.5))
        z = ad.add(mu, ad.mul(std, ad.Tensor(np.asarray(eps, dtype=model.dtype))))
    attrs_hat, logits = decode_batch(model, z, schedule)

    sq = ad.row_squared_error(attrs_hat, tg.attrs)
    ce = ad.cross_entropy_rows(logits, tg.classes)
    kl = ad.gaussian_kl_rows(mu, logvar)
    loss = ad.add(
        ad.add(ad.weighted_sum(sq, tg.recon_w), ad.weighted_sum(ce, tg.topo_w)),
        ad.weighted_sum(kl, np.full(B, gamma / B)),
    )

    per_tree = 1.0 / (tg.nodes_per_tree[tg.tree_of_row] * B)
    topo_unweighted = tg.topo_w / alpha if alpha > 0 else None
    parts = {
        "recon": float(np.sum(sq.data.astype(np.float64) * per_tree)),
        "topo": float(np.sum(ce.data.astype(np.float64) * topo_unweighted)) if topo_unweighted is not None else float("nan"),
        "kl": float(np.mean(kl.data)),
        "total": float(loss.data),
    }
    return loss, parts


def decode_free_batch(model: RvnnModel, Z, max_depth: int) -> list[VesselTree]:
    """Classifier-driven decoding of each latent row into a tree."""
    Z = np.atleast_2d(np.asarray(Z, dtype=model.dtype))
    n = len(Z)
    attrs: list[list] = [[] for _ in range(n)]
    left: list[list] = [[] for _ in range(n)]
    right: list[list] = [[] for _ in range(n)]
    with ad.no_grad():
        latent = model.gz(model.const(Z))
        owner = np.arange(n)
        node_id = np.zeros(n, dtype=np.int64)
        for k in range(n):
            attrs[k].append(None)
            left[k].append(NO_CHILD)
            right[k].append(NO_CHILD)
        for depth in range(max_depth + 1):
            h = model.dec_hidden(latent)
            a, logits = model.dec_node(h)
            cls = np.argmax(logits.data, axis=1)
            if depth == max_depth:
                cls[:] = 0
            par, sides, nt, nn = [], [], [], []
            for row, (k, i) in enumerate(zip(owner, node_id)):
                attrs[k][i] = a.data[row].astype(np.float64)
                wanted = (LEFT, RIGHT) if cls[row] == 2 else (RIGHT,) if cls[row] == 1 else ()
                for s in wanted:
                    c = len(attrs[k])
                    attrs[k].append(None)
                    left[k].append(NO_CHILD)
                    right[k].append(NO_CHILD)
                    (left if s == LEFT else right)[k][i] = c
                    par.append(row)
                    sides.append(s)
                    nt.append(k)
                    nn.append(c)
            if not par:
                break
            nxt = DepthLevel(
                np.array(nt), np.array(nn), np.empty(0), np.empty(0), np.array(par, dtype=np.int64), np.array(sides)
            )
            latent = _child_latents(model, h, nxt)
            owner, node_id = nxt.tree, nxt.node
    return [VesselTree(np.array(attrs[k]), left[k], right[k], 0) for k in range(n)]
