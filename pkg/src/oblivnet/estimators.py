"""Scikit-learn style estimators wrapping the oblivious trainer and the
multi-probe WTA index, so both compose with the wider ecosystem."""

from __future__ import annotations

import numpy as np
from scipy import sparse as sp
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from .dataio import SparseExample
from .engine import PublicParams, evaluate_p_at_1, predict_scores, train_loop
from .lsh import LshConfig, encode_bucket, make_hash_fns, mp_wta_probes, wta_signature_top3


def _rows_to_examples(X, y=None) -> list[SparseExample]:
    """Accept a dense array or CSR matrix; one SparseExample per row."""
    if sp.issparse(X):
        X = X.tocsr()
        rows = []
        for i in range(X.shape[0]):
            lo, hi = X.indptr[i], X.indptr[i + 1]
            feats = [(int(j), float(v)) for j, v in zip(X.indices[lo:hi], X.data[lo:hi])]
            feats.sort()
            rows.append(feats)
    else:
        X = np.asarray(X)
        if X.ndim != 2:
            raise ValueError("X must be 2-dimensional")
        rows = [
            [(int(j), float(X[i, j])) for j in np.nonzero(X[i])[0]]
            for i in range(X.shape[0])
        ]
    out = []
    for i, feats in enumerate(rows):
        labels = set()
        if y is not None:
            yi = y[i]
            labels = {int(v) for v in np.atleast_1d(yi)} if not isinstance(yi, (set, frozenset)) else {int(v) for v in yi}
        out.append(SparseExample(labels=labels, features=feats))
    return out


class OblivNetClassifier(BaseEstimator, ClassifierMixin):
    """Two-layer sparse classifier trained by the oblivious engine.

    ``fit(X, y)`` accepts dense or CSR features and either integer labels
    or per-row label collections; ``predict`` returns the top-scored
    label.  Training is deterministic under ``random_state``.
    """

    def __init__(self, n_hidden=16, k=2, m=4, pad_size=8, batch_size=8,
                 epochs=5, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8,
                 rebuild_period=0, o1=True, o2=True, o3=True, workers=1,
                 random_state=0):
        self.n_hidden = n_hidden
        self.k = k
        self.m = m
        self.pad_size = pad_size
        self.batch_size = batch_size
        self.epochs = epochs
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.rebuild_period = rebuild_period
        self.o1 = o1
        self.o2 = o2
        self.o3 = o3
        self.workers = workers
        self.random_state = random_state

    def fit(self, X, y):
        examples = _rows_to_examples(X, y)
        labels = sorted({v for ex in examples for v in ex.labels})
        if not labels:
            raise ValueError("fit requires at least one label")
        self.classes_ = np.asarray(labels)
        remap = {v: i for i, v in enumerate(labels)}
        for ex in examples:
            ex.labels = {remap[v] for v in ex.labels}
        n_features = X.shape[1]
        params = PublicParams(
            d_input=n_features,
            n_hidden=self.n_hidden,
            n_classes=len(labels),
            lsh=LshConfig(k=self.k, m=self.m, pad_size=self.pad_size,
                          rebuild_period=self.rebuild_period),
            batch_size=self.batch_size, epochs=self.epochs, lr=self.lr,
            beta1=self.beta1, beta2=self.beta2, eps=self.eps,
            o1=self.o1, o2=self.o2, o3=self.o3, workers=self.workers,
            seed_weights=self.random_state, seed_lsh=self.random_state + 1,
        )
        result = train_loop(examples, params)
        self.model_ = result.model
        self.n_features_in_ = n_features
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("call fit before predict")

    def decision_function(self, X):
        self._check_fitted()
        examples = _rows_to_examples(X)
        return predict_scores(self.model_, examples)

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]

    def score(self, X, y):
        """Precision at 1: fraction whose top label is a true label."""
        self._check_fitted()
        examples = _rows_to_examples(X, y)
        remap = {int(v): i for i, v in enumerate(self.classes_)}
        for ex in examples:
            ex.labels = {remap[v] for v in ex.labels if v in remap}
        return evaluate_p_at_1(self.model_, examples)


class MPWTAIndex(BaseEstimator):
    """Single-table rank-based index with a multi-probe query schedule.

    ``fit`` buckets the rows by WTA signature; ``query`` returns, per
    query row, the union of row ids in the first ``probes`` probed
    buckets.  ``probes=1`` is the plain single-probe WTA lookup.
    """

    def __init__(self, k=2, m=8, n_perturb=None, random_state=0):
        self.k = k
        self.m = m
        self.n_perturb = n_perturb
        self.random_state = random_state

    def fit(self, X):
        X = np.asarray(X, dtype=np.float64)
        self._cfg = LshConfig(k=self.k, m=self.m, pad_size=1,
                              n_perturb=self.n_perturb)
        self.fns_ = make_hash_fns(self.k, self.m, X.shape[1], self.random_state)
        self.buckets_: dict[int, list[int]] = {}
        for i in range(X.shape[0]):
            h, _, _ = wta_signature_top3(X[i], self.fns_)
            b = encode_bucket(h, self._cfg)
            self.buckets_.setdefault(b, []).append(i)
        return self

    @property
    def probe_budget(self) -> int:
        return self._cfg.len_seq

    def probe_sequence(self, x) -> np.ndarray:
        if not hasattr(self, "buckets_"):
            raise NotFittedError("call fit before query")
        return mp_wta_probes(np.asarray(x, dtype=np.float64), self.fns_, self._cfg)

    def query(self, X, probes: int = None) -> list[np.ndarray]:
        if not hasattr(self, "buckets_"):
            raise NotFittedError("call fit before query")
        X = np.asarray(X, dtype=np.float64)
        budget = probes if probes is not None else self.probe_budget
        out = []
        for i in range(X.shape[0]):
            seq = self.probe_sequence(X[i])[:budget]
            found: list[int] = []
            for b in seq.tolist():
                found.extend(self.buckets_.get(b, ()))
            out.append(np.asarray(sorted(set(found)), dtype=np.int64))
        return out
