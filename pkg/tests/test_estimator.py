import numpy as np
import pytest
from sklearn.base import clone
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from hflight.data import synth_blobs
from hflight.estimator import FederatedClassifier
from hflight.topology import two_tier


@pytest.fixture(scope="module")
def blobs():
    d = synth_blobs(3, 4, 60, 1.0, 1)
    labels = np.array(["ant", "bee", "cat"])[d.labels]
    return d.features, labels


def test_params_round_trip():
    clf = FederatedClassifier(strategy="fedprox", mu=0.1, tree=(2, 2), rounds=3)
    params = clf.get_params()
    assert params["mu"] == 0.1 and params["tree"] == (2, 2)
    twin = clone(clf)
    assert twin.get_params() == params
    assert twin.set_params(rounds=7).rounds == 7


def test_fit_predict(blobs):
    X, y = blobs
    clf = FederatedClassifier(n_workers=4, rounds=10, epochs=3, learning_rate=0.05, batch_size=8).fit(X, y)
    assert set(clf.classes_) == {"ant", "bee", "cat"}
    assert clf.score(X, y) > 0.9
    proba = clf.predict_proba(X[:5])
    np.testing.assert_allclose(proba.sum(axis=1), 1.0)
    assert len(clf.history_) == 10
    assert clf.ledger_.total_bytes() > 0


def test_hierarchical_and_async(blobs):
    X, y = blobs
    tree = FederatedClassifier(tree=(2, 2), rounds=2, model="linear").fit(X, y)
    assert len(tree.subsets_) == 4
    asyn = FederatedClassifier(strategy="fedasync", topology=two_tier(3), rounds=2).fit(X, y)
    assert len(asyn.history_) == 6


def test_pipeline(blobs):
    X, y = blobs
    pipe = make_pipeline(StandardScaler(), FederatedClassifier(n_workers=3, rounds=5, epochs=2, learning_rate=0.1))
    assert pipe.fit(X, y).score(X, y) > 0.8


def test_deterministic(blobs):
    X, y = blobs
    a = FederatedClassifier(n_workers=3, rounds=2, random_state=5).fit(X, y)
    b = FederatedClassifier(n_workers=3, rounds=2, random_state=5).fit(X, y)
    assert a.params_.bitwise_equal(b.params_)


def test_errors(blobs):
    X, y = blobs
    with pytest.raises(ValueError):
        FederatedClassifier(model="resnet").fit(X, y)
    with pytest.raises(ValueError):
        FederatedClassifier().fit(X, np.zeros(len(X)))
    clf = FederatedClassifier(n_workers=2, rounds=1).fit(X, y)
    with pytest.raises(ValueError):
        clf.predict(X[:, :2])
