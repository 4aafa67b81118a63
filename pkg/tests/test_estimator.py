import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from revft.estimator import MeftClassifier
from revft.exceptions import ScalingDegenerate
from revft.tensor import make_rng


def threshold_data(n=96, t=4, vocab=4, seed=0):
    X = make_rng(seed).integers(0, vocab, size=(n, t))
    y = np.where(X[:, 0] > 1, "hi", "lo")
    return X, y


def small(**kw):
    params = dict(d_model=16, heads=2, r=4, epochs=25, lr=1e-2, batch_size=16, patience=50)
    params.update(kw)
    return MeftClassifier(**params)


def test_fit_predict_string_labels():
    X, y = threshold_data()
    clf = small().fit(X, y)
    assert set(clf.classes_) == {"hi", "lo"}
    assert clf.predict(X).dtype == y.dtype
    proba = clf.predict_proba(X)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-12)
    assert clf.score(X, y) > 0.9


def test_deterministic_given_random_state():
    X, y = threshold_data()
    p1 = small(epochs=3).fit(X, y).decision_function(X)
    p2 = small(epochs=3).fit(X, y).decision_function(X)
    np.testing.assert_array_equal(p1, p2)


def test_clone_and_params():
    clf = small(kind="meft3", lam=0.5)
    params = clf.get_params()
    assert params["kind"] == "meft3" and params["lam"] == 0.5
    twin = clone(clf)
    assert twin.get_params() == params
    clf.set_params(epochs=1)
    assert clf.epochs == 1


def test_validation_split_and_history():
    X, y = threshold_data()
    clf = small(epochs=2, validation_fraction=0.25).fit(X, y)
    assert clf.history_.steps == 2 * 5  # 72 training rows in batches of 16


def test_input_errors():
    X, y = threshold_data()
    with pytest.raises(NotFittedError):
        small().predict(X)
    with pytest.raises(ValueError, match="two classes"):
        small().fit(X, np.zeros(len(X)))
    with pytest.raises(ValueError, match="integer"):
        small().fit(X + 0.5, y)
    with pytest.raises(ValueError, match="non-negative"):
        small().fit(X - 5, y)
    with pytest.raises(ScalingDegenerate):
        small(lam=0.0).fit(X, y)
    clf = small(epochs=1).fit(X, y)
    with pytest.raises(ValueError, match="positions"):
        clf.predict(X[:, :3])
    with pytest.raises(ValueError, match="vocabulary"):
        clf.predict(X + 10)


def test_vanilla_cache_mode_allows_zero_scaling():
    X, y = threshold_data(n=32)
    clf = small(lam=0.0, cache_mode="vanilla", epochs=1).fit(X, y)
    assert clf.predict(X).shape == (32,)
