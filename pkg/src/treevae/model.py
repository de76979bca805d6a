"""Recursive variational encoder/decoder over binary vessel trees.

Layer layout (input -> output):

    encoder     fc1 4->512, fc2 512->64, right_fc1/left_fc1 64->512,
                right_fc2/left_fc2 512->64, fc3 128->64
    latent      fc1 64->512, fc2mu 512->64, fc2var 512->64
    gz          fc1 64->256, fc2 256->256, fc3 256->64 (tanh)
    decoder     fc1 64->256, fc_left1/fc_right1 256->256,
                fc_left2/fc_right2 256->64, fc2 256->64, fc3 64->4
    classifier  fc1 64->256, fc2 256->256, fc3 256->3

Hidden layers use leaky ReLU; the output heads (mu, logvar, attributes,
class logits) are linear.

The functions here operate on one tree at a time by explicit recursion.
:mod:`treevae.batching` evaluates the same network level by level.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from enum import IntEnum

import numpy as np

from . import autodiff as ad
from .tree import NO_CHILD, VesselTree


class NodeClass(IntEnum):
    LEAF = 0
    ONE_CHILD = 1
    BIFURCATION = 2


WEIGHTING_SCHEMES = ("uniform", "depth", "subtree")


@dataclass(frozen=True)
class ModelConfig:
    attr_dim: int = 4
    enc_hidden: int = 512
    embed_dim: int = 64
    latent_dim: int = 64
    latent_hidden: int = 512
    gz_hidden: int = 256
    dec_hidden: int = 256
    classifier_hidden: int = 256
    n_classes: int = 3
    leaky_slope: float = 0.01

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v <= 0:
                raise ValueError(f"{k} must be positive")
        if self.embed_dim != self.latent_dim:
            raise ValueError("embed_dim must equal latent_dim")

    def layer_shapes(self) -> dict[str, tuple[int, int]]:
        a, eh, e, lat = self.attr_dim, self.enc_hidden, self.embed_dim, self.latent_dim
        dh, ch, gh, lh = self.dec_hidden, self.classifier_hidden, self.gz_hidden, self.latent_hidden
        return {
            "encoder.fc1": (a, eh),
            "encoder.fc2": (eh, e),
            "encoder.right_fc1": (e, eh),
            "encoder.right_fc2": (eh, e),
            "encoder.left_fc1": (e, eh),
            "encoder.left_fc2": (eh, e),
            "encoder.fc3": (2 * e, e),
            "latent.fc1": (e, lh),
            "latent.fc2mu": (lh, lat),
            "latent.fc2var": (lh, lat),
            "gz.fc1": (lat, gh),
            "gz.fc2": (gh, gh),
            "gz.fc3": (gh, lat),
            "decoder.fc1": (lat, dh),
            "decoder.fc_left1": (dh, dh),
            "decoder.fc_left2": (dh, lat),
            "decoder.fc_right1": (dh, dh),
            "decoder.fc_right2": (dh, lat),
            "decoder.fc2": (dh, e),
            "decoder.fc3": (e, a),
            "classifier.fc1": (e, ch),
            "classifier.fc2": (ch, ch),
            "classifier.fc3": (ch, self.n_classes),
        }


class RvnnModel:
    """Parameter bundle plus the per-row building blocks of the network."""

    def __init__(self, config: ModelConfig | None = None, seed: int = 0, dtype=ad.DEFAULT_DTYPE):
        self.config = config or ModelConfig()
        self.dtype = np.dtype(dtype)
        self.params = ad.ParamStore(self.dtype)
        rng = np.random.default_rng(seed)
        for name, (n_in, n_out) in self.config.layer_shapes().items():
            self.params.add(name + ".W", ad.glorot_uniform(rng, n_in, n_out))
            self.params.add(name + ".b", np.zeros(n_out))

    def parameter_counts(self) -> dict[str, int]:
        return {k: self.params.count(k + ".") for k in ("encoder", "decoder", "latent", "gz", "classifier")}

    # building blocks; every input is a (k, d) row batch

    def linear(self, name: str, x: ad.Tensor) -> ad.Tensor:
        return ad.dense(x, self.params[name + ".W"], self.params[name + ".b"])

    def act(self, name: str, x: ad.Tensor) -> ad.Tensor:
        return ad.leaky_relu(self.linear(name, x), self.config.leaky_slope)

    def const(self, x) -> ad.Tensor:
        return ad.constant(np.asarray(x, dtype=self.dtype), self.dtype)

    def enc_partial(self, attrs: ad.Tensor) -> ad.Tensor:
        return self.act("encoder.fc2", self.act("encoder.fc1", attrs))

    def enc_child(self, emb: ad.Tensor, side: str) -> ad.Tensor:
        return self.act(f"encoder.{side}_fc2", self.act(f"encoder.{side}_fc1", emb))

    def enc_merge(self, partial: ad.Tensor, children: ad.Tensor) -> ad.Tensor:
        return self.act("encoder.fc3", ad.concat([partial, children], axis=-1))

    def latent_heads(self, emb: ad.Tensor) -> tuple[ad.Tensor, ad.Tensor]:
        h = self.act("latent.fc1", emb)
        return self.linear("latent.fc2mu", h), self.linear("latent.fc2var", h)

    def gz(self, z: ad.Tensor) -> ad.Tensor:
        h = ad.tanh(self.linear("gz.fc1", z))
        h = ad.tanh(self.linear("gz.fc2", h))
        return ad.tanh(self.linear("gz.fc3", h))

    def dec_hidden(self, latent: ad.Tensor) -> ad.Tensor:
        return self.act("decoder.fc1", latent)

    def dec_node(self, hidden: ad.Tensor) -> tuple[ad.Tensor, ad.Tensor]:
        """Reconstructed attributes and class logits for each row."""
        feat = self.act("decoder.fc2", hidden)
        attrs = self.linear("decoder.fc3", feat)
        c = self.act("classifier.fc2", self.act("classifier.fc1", feat))
        return attrs, self.linear("classifier.fc3", c)

    def dec_child(self, hidden: ad.Tensor, side: str) -> ad.Tensor:
        return self.act(f"decoder.fc_{side}2", self.act(f"decoder.fc_{side}1", hidden))


# -- per-tree passes --------------------------------------------------------


def encode_tree(model: RvnnModel, tree: VesselTree) -> ad.Tensor:
    """Root embedding of shape (1, D) by depth-first post-order recursion."""
    emb: dict[int, ad.Tensor] = {}
    D = model.config.embed_dim
    for i in tree.postorder():
        partial = model.enc_partial(model.const(tree.attrs[i : i + 1]))
        summed = None
        for side, slot in (("right", tree.right), ("left", tree.left)):
            c = int(slot[i])
            if c == NO_CHILD:
                continue
            out = model.enc_child(emb.pop(c), side)
            summed = out if summed is None else ad.add(summed, out)
        if summed is None:
            summed = ad.zeros((1, D), model.dtype)
        emb[i] = model.enc_merge(partial, summed)
    return emb[tree.root]


def latent_params(model: RvnnModel, embedding: ad.Tensor) -> tuple[ad.Tensor, ad.Tensor]:
    return model.latent_heads(embedding)


def sample_latent(mu: ad.Tensor, logvar: ad.Tensor, rng=None, eps=None, deterministic: bool = False):
    """Reparameterized draw ``mu + exp(logvar / 2) * eps``.

    Returns ``(z, eps)``; ``eps`` is None in deterministic mode where
    ``z = mu``.
    """
    if deterministic:
        return mu, None
    if eps is None:
        eps = rng.standard_normal(mu.shape)
    eps = np.asarray(eps, dtype=mu.dtype)
    std = ad.exp(ad.scale(logvar, 0.5))
    return ad.add(mu, ad.mul(std, ad.Tensor(eps))), eps


def decode_teacher_forced(model: RvnnModel, z: ad.Tensor, target: VesselTree) -> tuple[list, list]:
    """Decode along ``target``'s topology.

    Returns per-node lists ``attrs_hat`` and ``logits`` indexed by the
    target's node index, each entry a (1, 4) / (1, 3) tensor.
    """
    attrs_hat: list = [None] * target.n_nodes
    logits: list = [None] * target.n_nodes
    stack = [(target.root, model.gz(z))]
    while stack:
        i, latent = stack.pop()
        h = model.dec_hidden(latent)
        attrs_hat[i], logits[i] = model.dec_node(h)
        for side, slot in (("right", target.right), ("left", target.left)):
            c = int(slot[i])
            if c != NO_CHILD:
                stack.append((c, model.dec_child(h, side)))
    return attrs_hat, logits


def decode_free(model: RvnnModel, z, max_depth: int) -> VesselTree:
    """Grow a tree from latent code ``z`` following the classifier.

    A one-child prediction creates a right child. Nodes at ``max_depth`` are
    forced to be leaves. Attributes are in normalized units.
    """
    if max_depth < 0:
        raise ValueError("max_depth must be >= 0")
    from .batching import decode_free_batch

    if isinstance(z, ad.Tensor):
        z = z.data
    return decode_free_batch(model, np.atleast_2d(np.asarray(z)), max_depth)[0]


# -- losses -----------------------------------------------------------------


def node_weights(tree: VesselTree, scheme: str = "uniform") -> np.ndarray:
    """Per-node cross-entropy weights normalized to mean 1.

    ``depth``: proportional to ``height - depth + 1``; ``subtree``:
    proportional to the size of the subtree rooted at the node.
    """
    scheme = scheme.lower().replace("-", "")
    if scheme == "uniform":
        return np.ones(tree.n_nodes)
    if scheme == "depth":
        d = tree.depths()
        raw = (d.max() - d + 1).astype(np.float64)
    elif scheme == "subtree":
        raw = tree.subtree_sizes().astype(np.float64)
    else:
        raise ValueError(f"unknown weighting scheme {scheme!r}; expected one of {WEIGHTING_SCHEMES}")
    return raw / raw.mean()


def class_counts(trees) -> np.ndarray:
    counts = np.zeros(3, dtype=np.int64)
    for t in trees:
        counts += np.bincount(t.node_classes(), minlength=3)
    return counts


def raw_class_weights(counts) -> np.ndarray:
    """Inverse relative frequency ``N / count_c``; absent classes get 0."""
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    with np.errstate(divide="ignore"):
        w = np.where(counts > 0, total / np.where(counts > 0, counts, 1), 0.0)
    return w


def class_weights(counts) -> np.ndarray:
    """Inverse-frequency weights rescaled so present classes average 1."""
    w = raw_class_weights(counts)
    present = w > 0
    return w / w[present].mean()


def loss_recon(attrs_hat: ad.Tensor, target_attrs) -> ad.Tensor:
    """Mean over nodes of the squared L2 attribute error."""
    n = attrs_hat.shape[0]
    return ad.scale(ad.total(ad.row_squared_error(attrs_hat, target_attrs)), 1.0 / n)


def loss_topo(logits: ad.Tensor, classes, cls_weights, node_w) -> ad.Tensor:
    """Mean over nodes of ``node_weight * class_weight[c] * CE(logits, c)``."""
    classes = np.asarray(classes, dtype=np.int64)
    w = np.asarray(node_w, dtype=np.float64) * np.asarray(cls_weights, dtype=np.float64)[classes]
    return ad.weighted_sum(ad.cross_entropy_rows(logits, classes), w / len(classes))


def loss_kl(mu: ad.Tensor, logvar: ad.Tensor) -> ad.Tensor:
    return ad.total(ad.gaussian_kl_rows(mu, logvar))


def loss_total(recon, topo, kl, alpha: float = 0.3, gamma: float = 0.001):
    """``(1 - alpha) * recon + alpha * topo + gamma * kl`` for floats or tensors."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    if isinstance(recon, ad.Tensor):
        return ad.add(ad.add(ad.scale(recon, 1 - alpha), ad.scale(topo, alpha)), ad.scale(kl, gamma))
    return (1 - alpha) * recon + alpha * topo + gamma * kl


def tree_loss(model, tree, cls_weights, scheme="uniform", alpha=0.3, gamma=0.001, rng=None, eps=None, deterministic=False):
    """Full objective for one tree via the recursive passes.

    Returns ``(total, parts)`` where ``parts`` holds the recon/topo/kl
    tensors.
    """
    emb = encode_tree(model, tree)
    mu, logvar = latent_params(model, emb)
    z, _ = sample_latent(mu, logvar, rng=rng, eps=eps, deterministic=deterministic)
    attrs_hat, logits = decode_teacher_forced(model, z, tree)
    recon = loss_recon(ad.concat(attrs_hat, axis=0), tree.attrs)
    topo = loss_topo(ad.concat(logits, axis=0), tree.node_classes(), cls_weights, node_weights(tree, scheme))
    kl = loss_kl(mu, logvar)
    return loss_total(recon, topo, kl, alpha, gamma), {"recon": recon, "topo": topo, "kl": kl}
