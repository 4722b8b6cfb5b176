"""Leave-one-out ranking evaluation over the full candidate item set."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

DEFAULT_CUTOFFS = (5, 10, 15, 20)


def rank_test_item(model, user, test_item, excluded=()) -> int:
    """1-based rank of ``test_item`` among all items not in ``excluded``.

    Items are ordered by descending logit ``P[u] . Q[v]`` (the same order as
    the sigmoid score, without its clamp). Ties go to the lower item index.
    """
    excluded = np.asarray(list(excluded), dtype=np.int64)
    if np.any(excluded == test_item):
        raise ValueError("test item is among the excluded items")
    scores = model.Q @ model.P[user]
    return int(_ranks(scores[None, :], np.array([test_item]), [excluded])[0])


def _ranks(scores, test_items, excluded):
    """Vectorized ranks for a block of users; ``scores`` is (B, M)."""
    B, M = scores.shape
    rows = np.arange(B)
    target = scores[rows, test_items][:, None]
    idx = np.arange(M)[None, :]
    ahead = (scores > target) | ((scores == target) & (idx < test_items[:, None]))
    for b, ex in enumerate(excluded):
        ahead[b, ex] = False
    return 1 + ahead.sum(axis=1)


def hr_at_k(ranks, k) -> float:
    ranks = np.asarray(ranks)
    if k < 1 or ranks.size == 0:
        raise ValueError("need k >= 1 and at least one rank")
    return float(np.mean(ranks <= k))


def ndcg_at_k(ranks, k) -> float:
    """Mean of ``1 / log2(rank + 1)`` within the cutoff; one relevant item per user."""
    ranks = np.asarray(ranks, dtype=float)
    if k < 1 or ranks.size == 0:
        raise ValueError("need k >= 1 and at least one rank")
    return float(np.mean(np.where(ranks <= k, 1.0 / np.log2(ranks + 1.0), 0.0)))


@dataclass
class RecReport:
    hr: dict
    ndcg: dict
    num_users: int
    skipped_users: int = 0
    config: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        d["hr"] = {str(k): v for k, v in self.hr.items()}
        d["ndcg"] = {str(k): v for k, v in self.ndcg.items()}
        return d

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), sort_keys=True, **kw)


def user_ranks(model, train_pairs, test_items, block=512):
    """Rank of each user's test item; ``-1`` for users without one.

    ``test_items[u]`` is the held-out item of user ``u`` or a negative value.
    Candidates are all items the user has no training interaction with.
    """
    train_pairs = np.asarray(train_pairs, dtype=np.int64).reshape(-1, 2)
    test_items = np.asarray(test_items, dtype=np.int64)
    order = np.argsort(train_pairs[:, 0], kind="stable")
    by_user = np.split(train_pairs[order, 1], np.searchsorted(train_pairs[order, 0], np.arange(1, len(test_items))))
    ranks = np.full(len(test_items), -1, dtype=np.int64)
    users = np.flatnonzero(test_items >= 0)
    for start in range(0, len(users), block):
        chunk = users[start:start + block]
        excluded = []
        for u in chunk:
            ex = by_user[u]
            ex = ex[ex != test_items[u]]
            excluded.append(ex)
        scores = model.P[chunk] @ model.Q.T
        ranks[chunk] = _ranks(scores, test_items[chunk], excluded)
    return ranks


def evaluate_model(model, train_pairs, test_items, cutoffs=DEFAULT_CUTOFFS) -> RecReport:
    """HR@K and NDCG@K over every user that has a test item.

    A test item that also appears among the user's training pairs stays a
    candidate (it is not excluded from its own ranking).
    """
    ranks = user_ranks(model, train_pairs, test_items)
    valid = ranks[ranks > 0]
    if valid.size == 0:
        raise ValueError("no user has a test item")
    cutoffs = sorted(int(k) for k in cutoffs)
    return RecReport(
        hr={k: hr_at_k(valid, k) for k in cutoffs},
        ndcg={k: ndcg_at_k(valid, k) for k in cutoffs},
        num_users=int(valid.size),
        skipped_users=int(np.sum(ranks < 0)),
        config={"cutoffs": cutoffs},
    )
