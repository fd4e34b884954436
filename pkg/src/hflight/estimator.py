"""scikit-learn compatible front end for federated training."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from hflight.data import DirichletSplitConfig, LabeledDataset, federated_split
from hflight.model import ModelSpec, TrainConfig, predict
from hflight.runtime import LocalLauncher, default_store, run_async_fl, run_sync_hfl
from hflight.strategy import strategy_from_name
from hflight.topology import Topology, balanced_tree, two_tier


class FederatedClassifier(ClassifierMixin, BaseEstimator):
    """Train a classifier by simulated federated learning over a topology.

    ``fit`` partitions the training set across the topology's workers with
    the dual-Dirichlet split and runs the synchronous hierarchical engine
    (or the asynchronous one for ``strategy="fedasync"``).

    Parameters
    ----------
    strategy : {"fedsgd", "fedavg", "fedprox", "fedasync"}
    model : {"linear", "mlp"}
    hidden : tuple of int
        Hidden layer sizes for ``model="mlp"``.
    n_workers : int
        Two-tier worker count, used when neither ``tree`` nor ``topology`` is set.
    tree : (branching, height) or None
        Balanced tree topology.
    topology : Topology or None
        Explicit topology; takes precedence over ``tree`` and ``n_workers``.
    rounds : int
        Global rounds (per-worker rounds for fedasync).
    """

    def __init__(
        self,
        strategy="fedavg",
        model="mlp",
        hidden=(32,),
        n_workers=12,
        tree=None,
        topology=None,
        rounds=20,
        learning_rate=0.01,
        epochs=1,
        batch_size=32,
        alpha_samples=3.0,
        alpha_labels=1.0,
        participation=1.0,
        mu=0.01,
        beta=0.5,
        launcher="threads",
        slots=4,
        random_state=0,
    ):
        self.strategy = strategy
        self.model = model
        self.hidden = hidden
        self.n_workers = n_workers
        self.tree = tree
        self.topology = topology
        self.rounds = rounds
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.alpha_samples = alpha_samples
        self.alpha_labels = alpha_labels
        self.participation = participation
        self.mu = mu
        self.beta = beta
        self.launcher = launcher
        self.slots = slots
        self.random_state = random_state

    def _topology(self) -> Topology:
        if self.topology is not None:
            return self.topology
        if self.tree is not None:
            b, h = self.tree
            return balanced_tree(int(b), int(h))[0]
        return two_tier(int(self.n_workers))

    def _model_spec(self, n_features: int, n_classes: int) -> ModelSpec:
        if self.model == "linear":
            return ModelSpec.linear(n_features, n_classes)
        if self.model == "mlp":
            return ModelSpec.mlp(n_features, n_classes, tuple(self.hidden))
        raise ValueError(f"model must be 'linear' or 'mlp', got {self.model!r}")

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self._encoder = LabelEncoder().fit(y)
        self.classes_ = self._encoder.classes_
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes to fit a classifier")
        self.n_features_in_ = X.shape[1]
        seed = int(self.random_state or 0)

        topo = self._topology()
        data = LabeledDataset(X, self._encoder.transform(y), len(self.classes_))
        subsets = federated_split(data, topo.workers, DirichletSplitConfig(self.alpha_samples, self.alpha_labels, seed))
        spec = self._model_spec(X.shape[1], len(self.classes_))
        strat = strategy_from_name(self.strategy, mu=self.mu, beta=self.beta, participation=self.participation)
        train = TrainConfig(self.learning_rate, self.epochs, self.batch_size, seed)
        launcher = LocalLauncher(self.launcher, int(self.slots))
        store = default_store(launcher, topo)
        engine = run_async_fl if strat.is_async else run_sync_hfl
        records = engine(topo, strat, spec, subsets, int(self.rounds), launcher, train=train, seed=seed, store=store)
        self.model_spec_ = spec
        self.params_ = records[-1].global_params
        self.history_ = records
        self.subsets_ = subsets
        self.ledger_ = store.ledger
        return self

    def decision_function(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return predict(self.model_spec_, self.params_, X)

    def predict_proba(self, X):
        z = self.decision_function(X)
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]
