"""Entropy-penalized Wasserstein-2 barycenters on a fixed support.

The barycenter minimizes ``sum_i lam_i W2^2(P_i, B) + tau * sum_q alpha_q log alpha_q``
over weights ``alpha`` on fixed atoms. It is solved through the concave dual
in one potential vector ``g_i`` per input histogram::

    D(g) = sum_i lam_i sum_n w_{i,n} g_i^c(y_{i,n})
           - tau * log sum_q exp(-(1/tau) sum_i lam_i g_i[q])

with ``g^c(y) = min_q |y - s_q|^2 - g[q]``. The inner minimization over
``alpha`` has the closed form ``alpha = softmax(-sum_i lam_i g_i / tau)``.
For uniform histogram weights ``w_{i,n} = 1/N_i``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from raid.ot import Histogram, cost_matrix, w2_squared


@dataclass
class BarycenterSolution:
    support: np.ndarray
    alpha: np.ndarray
    potentials: np.ndarray  # (K, len(support))
    dual_value: float
    lam: np.ndarray
    tau: float
    history: np.ndarray = field(default_factory=lambda: np.empty(0), repr=False)

    def histogram(self) -> Histogram:
        return Histogram(self.support, self.alpha)


def c_transform(g, y, support):
    """Return ``(min_q |y - s_q|^2 - g[q], argmin)``; ties go to the lowest index."""
    values, idx = _c_transform_rows(np.asarray(g, dtype=float), cost_matrix(y, support))
    return float(values[0]), int(idx[0])


def _c_transform_rows(g, C):
    shifted = C - g[None, :]
    idx = np.argmin(shifted, axis=1)
    return shifted[np.arange(C.shape[0]), idx], idx


def recover_alpha(potentials, lam, tau) -> np.ndarray:
    """Barycenter weights ``softmax(-(lam @ g) / tau)``, strictly positive."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    z = -(np.asarray(lam, dtype=float) @ np.atleast_2d(potentials)) / tau
    z = z - z.max()
    w = np.exp(z)
    return w / w.sum()


def _log_partition(c, tau):
    z = -c / tau
    m = z.max()
    return m + math.log(np.exp(z - m).sum())


def default_lambda(class_hists) -> np.ndarray:
    sizes = np.array([len(h) for h in class_hists], dtype=float)
    return sizes / sizes.sum()


def _prepare(class_hists, support, lam, tau):
    if not class_hists:
        raise ValueError("need at least one class histogram")
    if tau <= 0:
        raise ValueError("tau must be positive")
    support = np.atleast_2d(np.asarray(support, dtype=float))
    lam = default_lambda(class_hists) if lam is None else np.asarray(lam, dtype=float)
    if lam.shape != (len(class_hists),):
        raise ValueError("one lambda per class histogram")
    costs = [cost_matrix(h.atoms, support) for h in class_hists]
    return support, lam, costs


def _objective_and_supergradient(g, hists, costs, lam, tau):
    c = lam @ g
    value = -tau * _log_partition(c, tau)
    alpha = recover_alpha(g, lam, tau)
    grad = np.empty_like(g)
    for i, (h, C) in enumerate(zip(hists, costs)):
        vals, idx = _c_transform_rows(g[i], C)
        value += lam[i] * float(h.weights @ vals)
        mass = np.bincount(idx, weights=h.weights, minlength=g.shape[1])
        grad[i] = lam[i] * (alpha - mass)
    return value, grad


def dual_objective(potentials, class_hists, support, lam=None, tau=1.0) -> float:
    support, lam, costs = _prepare(class_hists, support, lam, tau)
    g = _check_potentials(potentials, len(class_hists), support.shape[0])
    return _objective_and_supergradient(g, class_hists, costs, lam, tau)[0]


def dual_supergradient(potentials, class_hists, support, lam=None, tau=1.0):
    """Return ``(objective, supergradient)`` at ``potentials``.

    Component ``[i, q]`` is ``lam_i * (alpha_q - mass of class i whose
    c-transform argmin is q)``; it is the gradient wherever every argmin is
    unique.
    """
    support, lam, costs = _prepare(class_hists, support, lam, tau)
    g = _check_potentials(potentials, len(class_hists), support.shape[0])
    return _objective_and_supergradient(g, class_hists, costs, lam, tau)


def dual_ascent_step(potentials, class_hists, support, lam=None, tau=1.0, step_size=1.0):
    if step_size <= 0:
        raise ValueError("step_size must be positive")
    _, grad = dual_supergradient(potentials, class_hists, support, lam, tau)
    return np.asarray(potentials, dtype=float) + step_size * grad


def _check_potentials(potentials, K, n_support):
    g = np.atleast_2d(np.asarray(potentials, dtype=float))
    if g.shape != (K, n_support):
        raise ValueError(f"potentials have shape {g.shape}, expected {(K, n_support)}")
    if not np.all(np.isfinite(g)):
        raise ValueError("potentials must be finite")
    return g


def solve_barycenter(
    class_hists,
    support,
    lam=None,
    tau=1.0,
    steps=500,
    step_schedule=None,
    step_scale=None,
    init=None,
) -> BarycenterSolution:
    """Maximize the dual by supergradient ascent and recover the weights.

    The step at iteration ``t = 1, 2, ...`` is ``step_scale * step_schedule(t)``
    with ``step_schedule`` defaulting to ``1 / sqrt(t)``. Potentials are in
    cost units while supergradient entries are masses of order
    ``1 / len(support)``, so ``step_scale`` defaults to
    ``len(support) * min(tau, mean cost)``.

    The weights come from the best iterate seen, since supergradient ascent
    is not monotone. Fully deterministic.
    """
    support, lam, costs = _prepare(class_hists, support, lam, tau)
    if step_schedule is None:
        step_schedule = _inverse_sqrt
    if step_scale is None:
        mean_cost = float(np.mean([C.mean() for C in costs]))
        step_scale = support.shape[0] * min(tau, mean_cost) if mean_cost > 0 else tau
    K, n_support = len(class_hists), support.shape[0]
    g = np.zeros((K, n_support)) if init is None else _check_potentials(init, K, n_support).copy()

    best_value, best_g = -np.inf, g
    history = np.empty(steps + 1)
    for t in range(1, steps + 2):
        value, grad = _objective_and_supergradient(g, class_hists, costs, lam, tau)
        if value > best_value:
            best_value, best_g = value, g.copy()
        history[t - 1] = best_value
        if t == steps + 1:
            break
        g = g + step_scale * step_schedule(t) * grad

    return BarycenterSolution(
        support=support,
        alpha=recover_alpha(best_g, lam, tau),
        potentials=best_g,
        dual_value=best_value,
        lam=lam,
        tau=tau,
        history=history,
    )


def _inverse_sqrt(t):
    return 1.0 / math.sqrt(t)


def select_support(embeddings, size, strategy="subsample", seed=0, kmeans_iter=25) -> np.ndarray:
    """Pick ``size`` fixed support atoms from labeled user embeddings.

    ``subsample`` draws rows uniformly without replacement; ``kmeans`` runs
    Lloyd iterations from a seeded random subset of rows.
    """
    X = np.atleast_2d(np.asarray(embeddings, dtype=float))
    if size < 1:
        raise ValueError("support size must be >= 1")
    if size > X.shape[0]:
        raise ValueError(f"support size {size} exceeds {X.shape[0]} embeddings")
    rng = np.random.default_rng(seed)
    pick = rng.choice(X.shape[0], size=size, replace=False)
    if strategy == "subsample":
        return X[pick].copy()
    if strategy != "kmeans":
        raise ValueError(f"unknown strategy {strategy!r}")

    centers = X[pick].copy()
    for _ in range(kmeans_iter):
        assign = np.argmin(cost_matrix(X, centers), axis=1)
        counts = np.bincount(assign, minlength=size)
        sums = np.zeros_like(centers)
        np.add.at(sums, assign, X)
        filled = counts > 0
        # empty clusters keep their previous center
        centers[filled] = sums[filled] / counts[filled, None]
    return centers


def primal_objective(alpha, class_hists, support, lam=None, tau=1.0, method="exact", **ot_kw) -> float:
    """``sum_i lam_i W2^2(P_i, (support, alpha)) + tau * sum alpha log alpha``."""
    support = np.atleast_2d(np.asarray(support, dtype=float))
    alpha = np.asarray(alpha, dtype=float)
    lam = default_lambda(class_hists) if lam is None else np.asarray(lam, dtype=float)
    bary = Histogram(support, alpha)
    transport = sum(
        lam_i * w2_squared(h, bary, method=method, **ot_kw) for lam_i, h in zip(lam, class_hists)
    )
    pos = alpha[alpha > 0]
    return transport + tau * float(np.sum(pos * np.log(pos)))
