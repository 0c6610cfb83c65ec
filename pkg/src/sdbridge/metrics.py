"""Evaluation metrics: sliced Wasserstein, RBF MMD^2, content accuracy, cycle MSE."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import wasserstein_distance
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import diffcore as dc
from .bridge import sample_bridge
from .exceptions import CalibrationError, ConfigError, ContractError

__all__ = [
    "MetricsReport", "random_projections", "swd", "mmd2_rbf", "median_bandwidth",
    "ContentClassifier", "train_content_classifier", "content_accuracy", "cycle_mse",
]


@dataclass(frozen=True)
class MetricsReport:
    swd: float
    mmd2: float
    content_acc: float
    cycle_mse: float
    sample_count: int
    seed: int

    def __post_init__(self):
        if not (0.0 <= self.content_acc <= 1.0):
            raise ContractError(f"content accuracy {self.content_acc} outside [0, 1]")
        if self.swd < 0 or self.cycle_mse < 0:
            raise ContractError("swd and cycle_mse must be nonnegative")

    def as_dict(self):
        return asdict(self)


def _pair(a, b):
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise ContractError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    if not len(a) or not len(b):
        raise ContractError("sample sets must be nonempty")
    return a, b


def random_projections(dim, n_projections=128, rng=None):
    """``n_projections`` unit directions in ``R^dim`` as rows."""
    rng = rng if rng is not None else np.random.default_rng(0)
    v = rng.standard_normal((n_projections, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def swd(a, b, n_projections=128, rng=None, projections=None):
    """Sliced Wasserstein-1 distance.

    Pass the same ``projections`` when comparing several models against one
    reference. Equal sample counts use sorted differences; otherwise the
    exact 1-D distance between empirical distributions is used.
    """
    a, b = _pair(a, b)
    if projections is None:
        projections = random_projections(a.shape[1], n_projections, rng)
    pa = np.sort(a @ projections.T, axis=0)
    pb = np.sort(b @ projections.T, axis=0)
    if len(a) == len(b):
        return float(np.abs(pa - pb).mean())
    return float(np.mean([wasserstein_distance(pa[:, k], pb[:, k]) for k in range(len(projections))]))


def _sqdist(x, y):
    d = (x * x).sum(1)[:, None] + (y * y).sum(1)[None, :] - 2.0 * x @ y.T
    return np.maximum(d, 0.0)


def median_bandwidth(a, b, max_points=2000):
    """Median pairwise distance of the pooled sample (strided subsample if large)."""
    pooled = np.concatenate([a, b])
    if len(pooled) > max_points:
        pooled = pooled[:: math.ceil(len(pooled) / max_points)]
    d = _sqdist(pooled, pooled)
    iu = np.triu_indices(len(pooled), k=1)
    med = math.sqrt(float(np.median(d[iu])))
    return med if med > 0 else 1.0


def mmd2_rbf(a, b, bandwidth=None):
    """Unbiased U-statistic of MMD^2 with ``k(x,y) = exp(-|x-y|^2 / (2 h^2))``."""
    a, b = _pair(a, b)
    if len(a) < 2 or len(b) < 2:
        raise ContractError("mmd2_rbf needs at least two samples per set")
    if bandwidth is None:
        bandwidth = median_bandwidth(a, b)
    if bandwidth <= 0:
        raise ConfigError(f"bandwidth must be positive, got {bandwidth}")
    gamma = 1.0 / (2.0 * bandwidth**2)
    m, n = len(a), len(b)
    kxx = np.exp(-gamma * _sqdist(a, a))
    kyy = np.exp(-gamma * _sqdist(b, b))
    kxy = np.exp(-gamma * _sqdist(a, b))
    xx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    yy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return float(xx + yy - 2.0 * kxy.mean())


class ContentClassifier(ClassifierMixin, BaseEstimator):
    """Small GELU MLP trained with cross-entropy.

    Inputs are standardised with statistics from the training set.
    """

    def __init__(self, hidden=64, n_hidden=2, epochs=300, batch_size=256, learning_rate=3e-3,
                 seed=0):
        self.hidden = hidden
        self.n_hidden = n_hidden
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.seed = seed

    def _forward(self, p, x):
        h = x
        for i in range(self.n_hidden):
            h = dc.gelu(dc.add(dc.matmul(h, p[f"w{i}"]), p[f"b{i}"]))
        return dc.add(dc.matmul(h, p["w_out"]), p["b_out"])

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, codes = np.unique(y, return_inverse=True)
        self.n_features_in_ = X.shape[1]
        self.mean_ = X.mean(axis=0)
        self.scale_ = X.std(axis=0) + 1e-12
        Xs = (X - self.mean_) / self.scale_
        rng = np.random.default_rng(self.seed)
        widths = [X.shape[1]] + [self.hidden] * self.n_hidden
        params = {}
        for i in range(self.n_hidden):
            lim = math.sqrt(6.0 / (widths[i] + widths[i + 1]))
            params[f"w{i}"] = rng.uniform(-lim, lim, (widths[i], widths[i + 1]))
            params[f"b{i}"] = np.zeros(widths[i + 1])
        k = len(self.classes_)
        lim = math.sqrt(6.0 / (widths[-1] + k))
        params["w_out"] = rng.uniform(-lim, lim, (widths[-1], k))
        params["b_out"] = np.zeros(k)
        self.loss_curve_ = []
        if k > 1:
            opt = dc.Adam(self.learning_rate)
            n = len(Xs)
            bs = min(self.batch_size, n)
            for _ in range(self.epochs):
                order = rng.permutation(n)
                total = 0.0
                for start in range(0, n, bs):
                    idx = order[start:start + bs]
                    with dc.Tape() as tape:
                        w = tape.watch_params(params)
                        loss = dc.softmax_cross_entropy(self._forward(w, Xs[idx]), codes[idx])
                        grads = tape.gradients(loss, w)
                    opt.step(params, grads)
                    total += loss.item() * len(idx)
                self.loss_curve_.append(total / n)
        self.params_ = params
        return self

    def decision_function(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ContractError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        with dc.no_grad():
            return self._forward(self.params_, (X - self.mean_) / self.scale_).data

    def predict(self, X):
        if len(self.classes_) == 1:
            X = check_array(X, dtype=np.float64)
            return np.full(len(X), self.classes_[0])
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]


def train_content_classifier(X, labels, seed=0, holdout=0.2, min_accuracy=0.95, **kwargs):
    """Fit a :class:`ContentClassifier` and check it on a held-out split.

    Raises :class:`CalibrationError` if held-out accuracy is below
    ``min_accuracy``, which signals a generator whose classes overlap.
    The returned classifier is refit on all of ``X``.
    """
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        return ContentClassifier(seed=seed, **kwargs).fit(X, labels)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(X))
    n_hold = max(1, int(round(holdout * len(X))))
    hold, train = order[:n_hold], order[n_hold:]
    probe = ContentClassifier(seed=seed, **kwargs).fit(X[train], labels[train])
    acc = float(np.mean(probe.predict(X[hold]) == labels[hold]))
    if acc < min_accuracy:
        raise CalibrationError(f"classifier held-out accuracy {acc:.3f} is below {min_accuracy}")
    clf = ContentClassifier(seed=seed, **kwargs).fit(X, labels)
    clf.holdout_accuracy_ = acc
    return clf


def content_accuracy(classifier, translated, labels):
    translated = np.asarray(translated, dtype=np.float64)
    labels = np.asarray(labels)
    if len(translated) != len(labels):
        raise ContractError(f"{len(translated)} samples but {len(labels)} labels")
    return float(np.mean(classifier.predict(translated) == labels))


def cycle_mse(fwd_fn, rev_fn, sources, schedule, rng, n_steps=None):
    """Mean squared round-trip error ``|rev(fwd(x)) - x|^2`` per sample."""
    sources = np.asarray(sources, dtype=np.float64)
    with dc.no_grad():
        mid = sample_bridge(fwd_fn, sources, schedule, n_steps, rng)
        back = sample_bridge(rev_fn, mid, schedule, n_steps, rng)
    return float(np.mean(np.sum((back - sources) ** 2, axis=1)))
