"""Matrix-factorization recommender with the barycenter-alignment defense.

The recommender scores a user/item pair as ``sigmoid(P[u] . Q[v])`` and is
trained on implicit feedback with binary cross-entropy. After ``e1`` plain
epochs, each further epoch adds ``eta`` times the sum over attribute classes
of the squared 2-Wasserstein distance between the class's user embeddings and
a shared entropy-penalized barycenter. The barycenter is refreshed every
``xi`` defense epochs; transport couplings are refreshed every epoch.
"""

from __future__ import annotations

import logging
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit

from raid.barycenter import BarycenterSolution, select_support, solve_barycenter
from raid.ot import (
    Coupling,
    Histogram,
    SinkhornConvergenceWarning,
    cost_matrix,
    exact_ot_oracle,
    round_to_marginals,
    sinkhorn,
)

log = logging.getLogger(__name__)

SCORE_CLAMP = 1e-7
THREADS_ENV = "RAID_NUM_THREADS"


class TrainingDiverged(RuntimeError):
    """A loss became NaN/inf; ``model`` holds the last finite parameters."""

    def __init__(self, message, model=None, history=None):
        super().__init__(message)
        self.model = model
        self.history = history


@dataclass
class EmbeddingModel:
    P: np.ndarray  # user embeddings (N, d)
    Q: np.ndarray  # item embeddings (M, d)

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=float)
        self.Q = np.asarray(self.Q, dtype=float)
        if self.P.ndim != 2 or self.Q.ndim != 2 or self.P.shape[1] != self.Q.shape[1]:
            raise ValueError("P and Q must be 2-d with a shared embedding dimension")
        if min(self.P.shape + self.Q.shape) < 1:
            raise ValueError("need at least one user, one item and d >= 1")

    @property
    def num_users(self):
        return self.P.shape[0]

    @property
    def num_items(self):
        return self.Q.shape[0]

    @property
    def dim(self):
        return self.P.shape[1]

    def copy(self):
        return EmbeddingModel(self.P.copy(), self.Q.copy())

    @classmethod
    def init(cls, num_users, num_items, dim=32, seed=0, std=0.01):
        rng = np.random.default_rng(seed)
        return cls(rng.normal(0.0, std, (num_users, dim)), rng.normal(0.0, std, (num_items, dim)))


@dataclass
class InteractionSet:
    """Observed positive pairs and sampled negative pairs, each shape (n, 2)."""

    positives: np.ndarray
    negatives: np.ndarray = field(default_factory=lambda: np.empty((0, 2), dtype=np.int64))

    def __post_init__(self):
        self.positives = np.asarray(self.positives, dtype=np.int64).reshape(-1, 2)
        self.negatives = np.asarray(self.negatives, dtype=np.int64).reshape(-1, 2)

    def __len__(self):
        return len(self.positives) + len(self.negatives)

    def arrays(self):
        """``(users, items, targets)`` with positives first."""
        pairs = np.vstack([self.positives, self.negatives])
        targets = np.concatenate([np.ones(len(self.positives)), np.zeros(len(self.negatives))])
        return pairs[:, 0], pairs[:, 1], targets

    def validate(self, num_users, num_items):
        pairs = np.vstack([self.positives, self.negatives])
        if len(pairs) and (
            pairs.min() < 0 or pairs[:, 0].max() >= num_users or pairs[:, 1].max() >= num_items
        ):
            raise IndexError("interaction index out of model bounds")
        pos = set(map(tuple, self.positives.tolist()))
        if any(tuple(p) in pos for p in self.negatives.tolist()):
            raise ValueError("a pair is both positive and negative")


@dataclass
class TrainConfig:
    eta: float = 1.0
    tau: float = 1.0
    xi: int = 4
    e1: int = 5
    e2: int = 15
    mu: float = 1e-4
    neg_ratio: int = 4
    seed: int = 0
    embedding_dim: int = 32
    batch_size: int | None = 256
    support_size: int = 512
    support_strategy: str = "subsample"
    bary_steps: int = 500
    sinkhorn_eps_scale: float = 1e-2  # epsilon = scale * mean(cost), per coupling
    sinkhorn_max_iter: int = 500
    sinkhorn_tol: float = 1e-6

    def __post_init__(self):
        if self.eta < 0:
            raise ValueError("eta must be >= 0")
        if self.xi < 1:
            raise ValueError("xi must be >= 1")
        if self.e1 < 0 or self.e2 < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.mu <= 0:
            raise ValueError("mu must be positive")
        if self.neg_ratio < 1:
            raise ValueError("neg_ratio must be >= 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    def to_dict(self):
        return asdict(self)

    def sinkhorn_kwargs(self):
        return dict(eps_scale=self.sinkhorn_eps_scale, max_iter=self.sinkhorn_max_iter, tol=self.sinkhorn_tol)


# --- recommendation objective -------------------------------------------------


def _check_pairs(model, users, items):
    if np.any(users < 0) or np.any(users >= model.num_users):
        raise IndexError("user index out of range")
    if np.any(items < 0) or np.any(items >= model.num_items):
        raise IndexError("item index out of range")


def predict_score(model: EmbeddingModel, u, v):
    """Clamped ``sigmoid(P[u] . Q[v])``; accepts scalars or index arrays."""
    users, items = np.asarray(u), np.asarray(v)
    _check_pairs(model, users, items)
    logits = np.einsum("...k,...k->...", model.P[users], model.Q[items])
    s = np.clip(expit(logits), SCORE_CLAMP, 1.0 - SCORE_CLAMP)
    return float(s) if s.ndim == 0 else s


def ce_loss(model: EmbeddingModel, batch: InteractionSet) -> float:
    """Mean binary cross-entropy over the batch (minimized, so always >= 0)."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    users, items, r = batch.arrays()
    s = predict_score(model, users, items)
    return float(-np.mean(r * np.log(s) + (1 - r) * np.log(1 - s)))


def _ce_grad_arrays(P, Q, users, items, r):
    s = np.clip(expit(np.einsum("ij,ij->i", P[users], Q[items])), SCORE_CLAMP, 1 - SCORE_CLAMP)
    coef = (s - r) / len(r)
    gP = np.zeros_like(P)
    gQ = np.zeros_like(Q)
    np.add.at(gP, users, coef[:, None] * Q[items])
    np.add.at(gQ, items, coef[:, None] * P[users])
    return gP, gQ, s


def ce_gradient(model: EmbeddingModel, batch: InteractionSet):
    """Gradients of :func:`ce_loss` w.r.t. ``(P, Q)``; untouched rows are zero.

    Uses the derivative of the unclamped logistic; the clamp only matters
    for scores within 1e-7 of 0 or 1.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    users, items, r = batch.arrays()
    _check_pairs(model, users, items)
    gP, gQ, _ = _ce_grad_arrays(model.P, model.Q, users, items, r)
    return gP, gQ


def negative_sample(positives, num_items, ratio=4, seed=0) -> InteractionSet:
    """Draw ``ratio`` uninteracted items per positive pair.

    Draws are uniform over the items the user never interacted with and
    without replacement within one positive's draw. Users who interacted
    with every item get no negatives (logged).
    """
    positives = np.asarray(positives, dtype=np.int64).reshape(-1, 2)
    rng = np.random.default_rng(seed)
    if len(positives) == 0:
        return InteractionSet(positives)
    keys = np.unique(positives[:, 0] * num_items + positives[:, 1])
    seen_count = np.bincount(keys // num_items)
    users = positives[:, 0]
    free = num_items - seen_count[users]

    skipped = np.unique(users[free <= 0])
    if len(skipped):
        log.warning("%d users interacted with every item; no negatives drawn", len(skipped))

    k = np.minimum(free, ratio)
    # rows with few free items: explicit draw from the complement
    tight = (free > 0) & (free < 2 * ratio)
    out_users, out_items = [], []
    for idx in np.flatnonzero(tight):
        u = users[idx]
        seen = keys[(keys >= u * num_items) & (keys < (u + 1) * num_items)] - u * num_items
        cand = np.setdiff1d(np.arange(num_items), seen)
        out_users.append(np.full(k[idx], u))
        out_items.append(rng.choice(cand, size=k[idx], replace=False))

    # remaining rows: rejection sampling, vectorized
    loose = np.flatnonzero(free >= 2 * ratio)
    draws = rng.integers(0, num_items, size=(len(loose), ratio))
    bad = _rejected(draws, users[loose], keys, num_items)
    while bad.any():
        draws[bad] = rng.integers(0, num_items, size=int(bad.sum()))
        bad = _rejected(draws, users[loose], keys, num_items)
    out_users.append(np.repeat(users[loose], ratio))
    out_items.append(draws.ravel())

    neg = np.column_stack([np.concatenate(out_users), np.concatenate(out_items)]).astype(np.int64)
    return InteractionSet(positives, neg)


def _rejected(draws, users, keys, num_items):
    """Draws that hit a seen item or repeat an earlier draw in the same row."""
    flat = users[:, None] * num_items + draws
    pos = np.minimum(np.searchsorted(keys, flat), len(keys) - 1)
    seen = keys[pos] == flat
    earlier = np.tril(np.ones((draws.shape[1],) * 2, dtype=bool), k=-1)
    repeat = ((draws[:, :, None] == draws[:, None, :]) & earlier).any(axis=2)
    return seen | repeat


# --- defense objective -----------------------------------------------------------


def group_users(labels):
    """Map class id -> user indices; labels < 1 mean unlabeled."""
    labels = np.asarray(labels)
    classes = np.unique(labels[labels >= 1])
    return {int(c): np.flatnonzero(labels == c) for c in classes}


def class_histograms(user_embeddings, labels, num_classes=None):
    """One uniform-weight histogram per nonempty class, in class order.

    ``labels[u]`` in ``1..K`` assigns user ``u``; values < 1 mark unlabeled
    users. Classes in ``1..num_classes`` with no users are dropped with a
    warning.
    """
    P = np.asarray(user_embeddings, dtype=float)
    labels = np.asarray(labels)
    if labels.shape[0] != P.shape[0]:
        raise ValueError("one label per user row expected")
    groups = group_users(labels)
    if num_classes is not None:
        missing = [c for c in range(1, num_classes + 1) if c not in groups]
        if missing:
            log.warning("classes %s have no users and are dropped from the defense", missing)
    return [Histogram.uniform(P[idx]) for idx in groups.values()]


def class_couplings(class_hists, barycenter: BarycenterSolution, eps_scale=1e-3, method="sinkhorn",
                    **sinkhorn_kw):
    """Coupling and cost matrix of every class against the barycenter.

    With ``method="sinkhorn"``, ``epsilon`` is ``eps_scale * mean(C)`` unless
    given explicitly, and unconverged plans are rounded onto the exact
    marginals. ``method="exact"`` solves the linear program (tiny instances).
    """
    if method not in ("sinkhorn", "exact"):
        raise ValueError(f"unknown method {method!r}")

    def one(h):
        C = cost_matrix(h.atoms, barycenter.support)
        if method == "exact":
            return exact_ot_oracle(h.weights, barycenter.alpha, C)[0], C
        kw = dict(sinkhorn_kw)
        if kw.get("epsilon") is None:
            kw["epsilon"] = eps_scale * C.mean() if C.mean() > 0 else eps_scale
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", SinkhornConvergenceWarning)
            T = sinkhorn(h.weights, barycenter.alpha, C, **kw)
        if not T.converged:
            log.debug("Sinkhorn unconverged (marginal error %.2e); rounding plan", T.marginal_error())
            T = round_to_marginals(T)
        return T, C

    threads = int(os.environ.get(THREADS_ENV, "1") or 1)
    if threads > 1 and len(class_hists) > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(one, class_hists))
    return [one(h) for h in class_hists]


def defense_loss(class_hists, barycenter: BarycenterSolution, **coupling_kw) -> float:
    """Sum over classes of the coupled W2^2 to the barycenter (see :func:`class_couplings`)."""
    return sum(c.cost(C) for c, C in class_couplings(class_hists, barycenter, **coupling_kw))


def defense_gradient(user_embeddings, labels, barycenter: BarycenterSolution, couplings):
    """Gradient of the defense loss w.r.t. every user embedding row.

    For user ``p`` in class ``i``: ``2 * (y_p / N_i - sum_q T_i[p, q] s_q)``.
    Rows of unlabeled users are zero. ``couplings`` follow the class order of
    :func:`class_histograms` and must have row marginals ``1/N_i`` and column
    marginals ``alpha``.
    """
    P = np.asarray(user_embeddings, dtype=float)
    groups = group_users(labels)
    if len(couplings) != len(groups):
        raise ValueError(f"{len(couplings)} couplings for {len(groups)} classes")
    grad = np.zeros_like(P)
    for idx, T in zip(groups.values(), couplings):
        plan = T.plan if isinstance(T, Coupling) else np.asarray(T)
        n = len(idx)
        if plan.shape != (n, len(barycenter.alpha)):
            raise ValueError("coupling shape does not match class and support sizes")
        if (
            np.abs(plan.sum(axis=1) - 1.0 / n).max() > 1e-4
            or np.abs(plan.sum(axis=0) - barycenter.alpha).max() > 1e-4
        ):
            raise ValueError("coupling marginals do not match the class and barycenter weights")
        grad[idx] = 2.0 * (P[idx] / n - plan @ barycenter.support)
    return grad


def total_gradient(model, batch, labels, barycenter, couplings, eta):
    """Gradient of ``ce_loss + eta * defense_loss`` with couplings held fixed."""
    gP, gQ = ce_gradient(model, batch)
    if eta:
        gP = gP + eta * defense_gradient(model.P, labels, barycenter, couplings)
    return gP, gQ


def refresh_barycenter(user_embeddings, labels, config: TrainConfig, seed):
    P = np.asarray(user_embeddings, dtype=float)
    hists = class_histograms(P, labels)
    labeled = P[np.asarray(labels) >= 1]
    size = min(config.support_size, len(labeled))
    support = select_support(labeled, size, config.support_strategy, seed=seed)
    return solve_barycenter(hists, support, tau=config.tau, steps=config.bary_steps)


# --- training loop -----------------------------------------------------------


def _seeds(seed):
    ss = np.random.SeedSequence(seed)
    init, shuffle, neg, support = ss.spawn(4)
    return init, shuffle, neg, support


def train_raid(positives, num_users, num_items, labels, config: TrainConfig, model=None, callback=None):
    """Two-phase training. Returns ``(model, history)``.

    Phase I runs ``e1`` epochs of cross-entropy SGD. Phase II runs ``e2``
    epochs that also descend ``eta`` times the defense loss. The barycenter
    is recomputed on the first Phase II epoch and then every ``xi`` epochs.
    Within an epoch both gradients of the defense are taken at the
    parameters the epoch starts from; the cross-entropy part runs over
    minibatches of ``batch_size`` pairs (``None``: one full batch).

    ``history`` has one dict per epoch: ``epoch``, ``phase``, ``loss_p``
    (mean minibatch loss), ``loss_d`` (defense loss at the start of the
    epoch, ``None`` when not computed) and ``refreshed``. ``callback(model,
    entry)``, if given, runs after every epoch and must not mutate ``model``.
    """
    positives = np.asarray(positives, dtype=np.int64).reshape(-1, 2)
    labels = np.asarray(labels)
    if labels.shape[0] != num_users:
        raise ValueError("labels must have one entry per user (values < 1 = unlabeled)")
    init_seed, shuffle_seed, neg_seed, support_seed = _seeds(config.seed)
    if model is None:
        model = EmbeddingModel.init(num_users, num_items, config.embedding_dim, seed=init_seed)
    else:
        model = model.copy()
    shuffle_rng = np.random.default_rng(shuffle_seed)
    neg_seeds = neg_seed.spawn(config.e1 + config.e2)
    support_seeds = support_seed.spawn(config.e2)

    history = []
    barycenter = None
    defended = config.eta > 0 and np.any(labels >= 1)
    for epoch in range(1, config.e1 + config.e2 + 1):
        phase = 1 if epoch <= config.e1 else 2
        entry = {"epoch": epoch, "phase": phase, "loss_p": None, "loss_d": None, "refreshed": False}
        last_good = model.copy()

        gD = None
        if phase == 2 and defended:
            k = epoch - config.e1 - 1
            if k % config.xi == 0:
                barycenter = refresh_barycenter(model.P, labels, config, seed=support_seeds[k])
                entry["refreshed"] = True
            hists = class_histograms(model.P, labels)
            pairs = class_couplings(hists, barycenter, **config.sinkhorn_kwargs())
            entry["loss_d"] = float(sum(c.cost(C) for c, C in pairs))
            gD = defense_gradient(model.P, labels, barycenter, [c for c, _ in pairs])

        if len(positives):
            batch = negative_sample(positives, num_items, config.neg_ratio, seed=neg_seeds[epoch - 1])
            users, items, r = batch.arrays()
            order = shuffle_rng.permutation(len(r))
            size = len(r) if config.batch_size is None else config.batch_size
            losses = []
            for start in range(0, len(r), size):
                sel = order[start:start + size]
                gP, gQ, s = _ce_grad_arrays(model.P, model.Q, users[sel], items[sel], r[sel])
                losses.append(-np.mean(r[sel] * np.log(s) + (1 - r[sel]) * np.log(1 - s)))
                if gD is not None and start == 0 and size >= len(r):
                    # full batch: one joint step, exactly theta - mu * (gP + eta * gD)
                    gP = gP + config.eta * gD
                    gD = None
                model.P -= config.mu * gP
                model.Q -= config.mu * gQ
            entry["loss_p"] = float(np.mean(losses))
        if gD is not None:
            model.P -= config.mu * config.eta * gD

        history.append(entry)
        bad = [k for k in ("loss_p", "loss_d") if entry[k] is not None and not np.isfinite(entry[k])]
        if bad or not (np.all(np.isfinite(model.P)) and np.all(np.isfinite(model.Q))):
            raise TrainingDiverged(
                f"non-finite {'/'.join(bad) or 'parameters'} at epoch {epoch}", last_good, history
            )
        log.info("epoch %d phase %d loss_p=%s loss_d=%s", epoch, phase, entry["loss_p"], entry["loss_d"])
        if callback is not None:
            callback(model, entry)
    return model, history


def defend_embeddings(user_embeddings, labels, config: TrainConfig, epochs=None, callback=None):
    """Defense-only Phase II on frozen-recommender user embeddings.

    Same schedule as :func:`train_raid` with no interaction data, so every
    epoch is a single step ``P <- P - mu * eta * grad``.
    """
    P = np.asarray(user_embeddings, dtype=float)
    cfg = TrainConfig(**{**config.to_dict(), "e1": 0, "e2": config.e2 if epochs is None else epochs})
    model = EmbeddingModel(P, np.zeros((1, P.shape[1])))
    model, history = train_raid(
        np.empty((0, 2)), P.shape[0], 1, labels, cfg, model=model, callback=callback
    )
    return model.P, history


def dp_perturb(model: EmbeddingModel, sigma, seed=0) -> EmbeddingModel:
    """Add i.i.d. N(0, sigma^2) noise to every user embedding entry."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    out = model.copy()
    if sigma > 0:
        out.P += np.random.default_rng(seed).normal(0.0, sigma, out.P.shape)
    return out
