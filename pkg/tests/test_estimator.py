import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from conftest import TINY_ARCH
from reprompt import RePromptClassifier

TINY = {k: v for k, v in TINY_ARCH.items() if k != "dim"}


def blobs(seed=0, per_class=4, C=3, d=16, noise=0.1):
    rng = np.random.default_rng(seed)
    means = rng.normal(size=(C, d))
    y = np.repeat(np.arange(C), per_class)
    X = means[y] + noise * rng.normal(size=(len(y), d))
    return X, y


def make(**kw):
    return RePromptClassifier(**{**TINY, "epochs": 3, "batch_size": 4, **kw})


def test_params_round_trip():
    est = make(lam=0.3)
    params = est.get_params()
    assert params["lam"] == 0.3 and params["k_re"] == 2
    twin = clone(est)
    assert twin.get_params() == params
    est.set_params(gamma=0.5)
    assert est.gamma == 0.5


def test_fit_predict_string_labels():
    X, y = blobs()
    names = np.array(["cat", "dog", "eel"])[y]
    est = make(lam=1.0, tau=50.0).fit(X, names)
    assert list(est.classes_) == ["cat", "dog", "eel"]
    proba = est.predict_proba(X)
    assert proba.shape == (12, 3)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_array_equal(est.predict(X), names)
    assert est.score(X, names) == 1.0
    assert est.n_features_in_ == 16
    assert est.metrics_[-1].epoch == 3


def test_patch_inputs():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(6, 4, 16))
    y = np.repeat([0, 1], 3)
    est = make(n=1).fit(X, y)
    assert est.model_.config.patch_input
    assert est.predict(X).shape == (6,)
    with pytest.raises(ValueError):
        est.predict(rng.normal(size=(2, 16)))


def test_deterministic_fit():
    X, y = blobs(2)
    a = make().fit(X, y).predict_proba(X)
    b = make().fit(X, y).predict_proba(X)
    assert a.tobytes() == b.tobytes()


def test_validation_errors():
    X, y = blobs()
    with pytest.raises(NotFittedError):
        make().predict(X)
    with pytest.raises(ValueError):
        make().fit(X, np.zeros(len(y)))
    with pytest.raises(ValueError):
        make().fit(X[:5], y)
    with pytest.raises(ValueError):
        make(n=10).fit(X, y)  # n above the shot count
