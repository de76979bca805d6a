"""scikit-learn style front end over the trainer and generator."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from .batching import batch_loss, decode_free_batch, encode_batch
from .generator import sample_trees
from .model import class_counts, class_weights
from .preprocessing import NormParams
from .trainer import TrainConfig, init_state, train
from .validation import check_latent, check_trees


class VesselVAE(TransformerMixin, BaseEstimator):
    """Recursive VAE over binary vessel trees.

    ``fit`` learns from a list of :class:`~treevae.tree.VesselTree`;
    ``transform`` maps trees to latent means; ``inverse_transform`` decodes
    latent codes; ``sample`` draws new trees from the prior.

    With ``normalize=True`` the min-max scaling is fitted on the training
    trees and every output is returned in the original units.
    """

    def __init__(
        self,
        epochs=20000,
        batch_size=4,
        lr=1e-4,
        beta1=0.9,
        beta2=0.999,
        alpha=0.3,
        gamma=0.001,
        scheme="uniform",
        max_height=10,
        normalize=True,
        random_state=0,
    ):
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.alpha = alpha
        self.gamma = gamma
        self.scheme = scheme
        self.max_height = max_height
        self.normalize = normalize
        self.random_state = random_state

    def _config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size,
            lr=self.lr,
            beta1=self.beta1,
            beta2=self.beta2,
            alpha=self.alpha,
            gamma=self.gamma,
            epochs=self.epochs,
            scheme=self.scheme,
            max_height=self.max_height,
            seed=int(self.random_state),
        )

    def _to_model_space(self, trees):
        if self.norm_params_ is None:
            return trees
        return [t.with_attrs(self.norm_params_.apply(t.attrs)) for t in trees]

    def fit(self, X, y=None):
        trees = check_trees(X)
        self.norm_params_ = NormParams.from_trees(trees) if self.normalize else None
        state = init_state(self._config(), self.norm_params_)
        train(self._to_model_space(trees), state=state)
        self.state_ = state
        self.model_ = state.model
        self.history_ = state.history
        self.n_trees_ = len(trees)
        return self

    def transform(self, X) -> np.ndarray:
        """Latent means, shape (n_trees, latent_dim)."""
        check_is_fitted(self, "model_")
        trees = self._to_model_space(check_trees(X))
        with ad.no_grad():
            mu, _ = self.model_.latent_heads(encode_batch(self.model_, trees))
        return mu.data.astype(np.float64)

    def inverse_transform(self, Z, max_depth=None):
        check_is_fitted(self, "model_")
        Z = check_latent(Z, self.model_.config.latent_dim)
        depth = self.max_height if max_depth is None else max_depth
        out = decode_free_batch(self.model_, Z, depth)
        if self.norm_params_ is not None:
            out = [t.with_attrs(self.norm_params_.invert(t.attrs)) for t in out]
        return out

    def sample(self, n_samples=1, random_state=None, max_depth=None):
        check_is_fitted(self, "model_")
        seed = self.random_state if random_state is None else random_state
        if isinstance(seed, np.random.Generator):
            seed = int(seed.integers(2**32))
        depth = self.max_height if max_depth is None else max_depth
        return sample_trees(self.model_, self.norm_params_, n_samples, seed=int(seed), max_depth=depth).trees

    def score(self, X, y=None) -> float:
        """Negative objective on ``X`` with ``z = mu`` (higher is better)."""
        check_is_fitted(self, "model_")
        trees = self._to_model_space(check_trees(X))
        cw = class_weights(class_counts(trees))
        with ad.no_grad():
            loss, _ = batch_loss(self.model_, trees, cw, self.scheme, self.alpha, self.gamma, deterministic=True)
        return -float(loss.data)

