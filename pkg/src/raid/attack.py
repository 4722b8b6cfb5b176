"""Attribute-inference attackers on user embeddings and their evaluation."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.special import log_softmax, softmax
from sklearn.model_selection import KFold, StratifiedKFold

log = logging.getLogger(__name__)


@dataclass
class ClassifierConfig:
    kind: str = "logreg"
    hidden_dims: tuple = (100,)
    l2_weight: float = 1.0
    learning_rate: float = 1e-3
    max_iter: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("logreg", "mlp"):
            raise ValueError(f"unknown classifier kind {self.kind!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)


class Classifier:
    """Softmax classifier, linear (``logreg``) or with ReLU hidden layers (``mlp``).

    Inputs are standardized with training statistics. Training minimizes
    ``mean cross-entropy + l2_weight / (2 n) * sum ||W||^2`` over the weight
    matrices (biases unpenalized) on the full batch: the convex ``logreg``
    problem with L-BFGS from zero, the ``mlp`` with Adam from a seeded
    Glorot-uniform start.
    """

    def __init__(self, config: ClassifierConfig):
        self.config = config
        self.classes_ = None
        self.weights = []
        self.biases = []

    def _forward(self, Z):
        acts = [Z]
        h = Z
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W + b
            if i < len(self.weights) - 1:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return acts

    def _standardize(self, X):
        return (np.asarray(X, dtype=float) - self.mean_) / self.scale_

    def fit(self, X, y):
        X = np.asarray(X, dtype=float)
        y = np.asarray(y)
        self.classes_, target = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two distinct labels to train an attacker")
        self.mean_ = X.mean(axis=0)
        scale = X.std(axis=0)
        self.scale_ = np.where(scale > 0, scale, 1.0)
        Z = self._standardize(X)
        n, k = Z.shape[0], len(self.classes_)
        Y = np.eye(k)[target]

        cfg = self.config
        if cfg.kind == "logreg":
            self._fit_lbfgs(Z, Y)
            return self
        dims = [Z.shape[1], *cfg.hidden_dims, k]
        rng = np.random.default_rng(cfg.seed)
        self.weights, self.biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            self.weights.append(rng.uniform(-bound, bound, (fan_in, fan_out)))
            self.biases.append(rng.uniform(-bound, bound, fan_out))

        params = self.weights + self.biases
        m = [np.zeros_like(p) for p in params]
        v = [np.zeros_like(p) for p in params]
        beta1, beta2, eps = 0.9, 0.999, 1e-8
        for t in range(1, cfg.max_iter + 1):
            acts = self._forward(Z)
            delta = (softmax(acts[-1], axis=1) - Y) / n
            gW, gb = [], []
            for i in range(len(self.weights) - 1, -1, -1):
                gW.append(acts[i].T @ delta + cfg.l2_weight / n * self.weights[i])
                gb.append(delta.sum(axis=0))
                if i:
                    delta = (delta @ self.weights[i].T) * (acts[i] > 0)
            grads = gW[::-1] + gb[::-1]
            for j, (p, g) in enumerate(zip(params, grads)):
                m[j] = beta1 * m[j] + (1 - beta1) * g
                v[j] = beta2 * v[j] + (1 - beta2) * g * g
                step = cfg.learning_rate * np.sqrt(1 - beta2**t) / (1 - beta1**t)
                p -= step * m[j] / (np.sqrt(v[j]) + eps)
        return self

    def _fit_lbfgs(self, Z, Y):
        n, d = Z.shape
        k = Y.shape[1]
        l2 = self.config.l2_weight

        def loss_grad(theta):
            W, b = theta[: d * k].reshape(d, k), theta[d * k:]
            logits = Z @ W + b
            logp = log_softmax(logits, axis=1)
            loss = -np.sum(Y * logp) / n + 0.5 * l2 / n * np.sum(W * W)
            delta = (np.exp(logp) - Y) / n
            gW = Z.T @ delta + l2 / n * W
            return loss, np.concatenate([gW.ravel(), delta.sum(axis=0)])

        res = minimize(loss_grad, np.zeros(d * k + k), jac=True, method="L-BFGS-B",
                       options={"maxiter": self.config.max_iter})
        self.weights = [res.x[: d * k].reshape(d, k)]
        self.biases = [res.x[d * k:]]

    def decision_function(self, X):
        return self._forward(self._standardize(X))[-1]

    def predict_proba(self, X):
        return np.exp(log_softmax(self.decision_function(X), axis=1))

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]


def train_classifier(features, labels, config: ClassifierConfig | None = None) -> Classifier:
    return Classifier(config or ClassifierConfig()).fit(features, labels)


def f1_micro(y_true, y_pred) -> float:
    """Micro-averaged F1. For single-label predictions this is the accuracy."""
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    if y_true.shape != y_pred.shape or y_true.size == 0:
        raise ValueError("y_true and y_pred must be nonempty and equally long")
    # micro precision == micro recall == tp / n, hence F1 == tp / n
    return float(np.mean(y_true == y_pred))


def balanced_accuracy(y_true, y_pred) -> float:
    """Mean per-class recall over the classes present in ``y_true``."""
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    if y_true.shape != y_pred.shape or y_true.size == 0:
        raise ValueError("y_true and y_pred must be nonempty and equally long")
    extra = np.setdiff1d(np.unique(y_pred), np.unique(y_true))
    if len(extra):
        log.warning("predicted classes %s have no true instances; excluded", extra.tolist())
    recalls = [np.mean(y_pred[y_true == c] == c) for c in np.unique(y_true)]
    return float(np.mean(recalls))


@dataclass
class AttackReport:
    f1_micro: float
    bacc: float
    folds: list = field(default_factory=list)
    seeds: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), sort_keys=True, **kw)


def evaluate_attack(embeddings, labels, config: ClassifierConfig | None = None,
                    n_splits=5, n_repeats=5, seed=0) -> AttackReport:
    """Repeated k-fold attack: train on k-1 folds, score on the held-out fold.

    Folds are stratified by label; if some class has fewer than ``n_splits``
    members, plain shuffled folds are used instead (logged). Each repeat
    reshuffles with seed ``seed + repeat``.
    """
    config = config or ClassifierConfig()
    X = np.asarray(embeddings, dtype=float)
    y = np.asarray(labels)
    if len(y) != len(X):
        raise ValueError("one label per embedding row expected")
    if len(y) < 10:
        raise ValueError("need at least 10 labeled users")
    _, counts = np.unique(y, return_counts=True)
    stratify = counts.min() >= n_splits
    if not stratify:
        log.warning("smallest class has %d users; falling back to unstratified folds", counts.min())

    folds, seeds = [], []
    for repeat in range(n_repeats):
        s = seed + repeat
        seeds.append(s)
        splitter = (StratifiedKFold if stratify else KFold)(n_splits, shuffle=True, random_state=s)
        for k, (tr, te) in enumerate(splitter.split(X, y)):
            if len(np.unique(y[tr])) < 2:
                log.warning("fold %d/%d has a single training class; skipped", repeat, k)
                continue
            clf = train_classifier(X[tr], y[tr], ClassifierConfig(**{**asdict(config), "seed": s * 1000 + k}))
            pred = clf.predict(X[te])
            folds.append({
                "repeat": repeat,
                "fold": k,
                "f1_micro": f1_micro(y[te], pred),
                "bacc": balanced_accuracy(y[te], pred),
            })
    return AttackReport(
        f1_micro=float(np.mean([f["f1_micro"] for f in folds])),
        bacc=float(np.mean([f["bacc"] for f in folds])),
        folds=folds,
        seeds=seeds,
        config={**asdict(config), "hidden_dims": list(config.hidden_dims),
                "n_splits": n_splits, "n_repeats": n_repeats, "stratified": bool(stratify)},
    )
