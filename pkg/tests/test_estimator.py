import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from treevae.batching import decode_free_batch
from treevae.estimator import VesselVAE
from treevae.synthetic import generate_synthetic_corpus
from treevae.tree import full_binary_tree


@pytest.fixture(scope="module")
def fitted():
    trees = generate_synthetic_corpus(6, seed=2)
    return VesselVAE(epochs=3, lr=1e-3, max_height=4, random_state=1).fit(trees), trees


def test_params_and_clone():
    est = VesselVAE(epochs=5, scheme="depth")
    p = est.get_params()
    assert p["epochs"] == 5 and p["scheme"] == "depth"
    c = clone(est)
    assert c.get_params() == p and c is not est
    est.set_params(lr=0.5)
    assert est.lr == 0.5


def test_unfitted_raises():
    with pytest.raises(NotFittedError):
        VesselVAE().transform([full_binary_tree(1)])


def test_fit_transform_shapes(fitted):
    est, trees = fitted
    Z = est.transform(trees)
    assert Z.shape == (6, 64) and Z.dtype == np.float64
    assert len(est.history_) == 3 and est.n_trees_ == 6
    assert np.isfinite(est.score(trees))


def test_inverse_transform_returns_original_units(fitted):
    est, trees = fitted
    Z = est.transform(trees[:2])
    out = est.inverse_transform(Z, max_depth=3)
    raw = decode_free_batch(est.model_, Z, 3)
    assert len(out) == 2
    for t, r in zip(out, raw):
        assert t.height <= 3 and t.structure_equal(r)
        assert np.allclose(t.attrs, est.norm_params_.invert(r.attrs))


def test_sample_is_reproducible(fitted):
    est, _ = fitted
    a = est.sample(3, random_state=4, max_depth=3)
    b = est.sample(3, random_state=4, max_depth=3)
    assert all(x == y for x, y in zip(a, b))
    assert all(t.n_nodes >= 2 and np.all(t.radii > 0) for t in a)


def test_fit_is_deterministic():
    trees = generate_synthetic_corpus(4, seed=5)
    a = VesselVAE(epochs=2, random_state=3).fit(trees).transform(trees)
    b = VesselVAE(epochs=2, random_state=3).fit(trees).transform(trees)
    assert np.array_equal(a, b)


def test_input_validation(fitted):
    est, _ = fitted
    with pytest.raises(TypeError, match="single tree"):
        est.transform(full_binary_tree(1))
    with pytest.raises(ValueError, match="empty"):
        est.transform([])
    with pytest.raises(ValueError, match="shape"):
        est.inverse_transform(np.zeros((1, 3)))
    with pytest.raises(ValueError, match="NaN"):
        est.inverse_transform(np.full(64, np.nan))
