"""Synthetic fixtures: labeled Gaussian embeddings and a small recommender world."""

from __future__ import annotations

import os

import numpy as np

from raid.data import RawRatings


def gaussian_classes(n_per_class=200, dim=8, shift=2.0, sigma=0.5, seed=0):
    """Two classes with means ``+shift * e1`` (label 1) and ``-shift * e1`` (label 2)."""
    rng = np.random.default_rng(seed)
    X = rng.normal(0.0, sigma, (2 * n_per_class, dim))
    X[:n_per_class, 0] += shift
    X[n_per_class:, 0] -= shift
    labels = np.repeat([1, 2], n_per_class)
    return X, labels


def preference_world(num_users=400, num_items=300, per_user=30, dim=8, shift=1.0, noise=1.0,
                     temperature=1.0, seed=0):
    """Interactions whose item choices depend on a binary user attribute.

    User tastes are Gaussian around ``+/- shift * e1`` by class; item traits
    are standard normal. Each user picks ``per_user`` distinct items with
    probability proportional to ``exp(taste . trait / temperature)``; the
    pick order becomes the timestamp. Returns ``(RawRatings, labels)`` where
    ``labels[u]`` belongs to raw user id ``str(u + 1)``.
    """
    if per_user >= num_items:
        raise ValueError("per_user must be below num_items")
    rng = np.random.default_rng(seed)
    labels = np.where(np.arange(num_users) < num_users // 2, 1, 2)
    taste = rng.normal(0.0, noise, (num_users, dim))
    taste[:, 0] += np.where(labels == 1, shift, -shift)
    trait = rng.normal(0.0, 1.0, (num_items, dim))
    logits = taste @ trait.T / temperature
    # Gumbel top-k: a weighted draw without replacement, in pick order
    keys = logits + rng.gumbel(size=logits.shape)
    picks = np.argsort(-keys, axis=1)[:, :per_user]
    users = np.repeat(np.arange(num_users), per_user)
    items = picks.ravel()
    stamps = np.tile(np.arange(per_user), num_users) + 1_000_000
    ratings = RawRatings(
        (users + 1).astype(str), (items + 1).astype(str), np.full(len(users), 5.0), stamps
    )
    return ratings, labels


def write_movielens(directory, ratings: RawRatings, labels):
    """Write ``ratings.dat`` and ``users.dat`` in the ML-1M layout.

    Label 1 is written as gender ``F`` and age 25, label 2 as ``M`` and
    age 50, so both attribute schemes recover ``labels``.
    """
    os.makedirs(directory, exist_ok=True)
    rpath = os.path.join(directory, "ratings.dat")
    upath = os.path.join(directory, "users.dat")
    with open(rpath, "w", encoding="utf-8") as fh:
        for u, i, r, t in zip(ratings.users, ratings.items, ratings.ratings, ratings.timestamps):
            fh.write(f"{u}::{i}::{int(r)}::{t}\n")
    with open(upath, "w", encoding="utf-8") as fh:
        for u, c in enumerate(labels):
            gender, age = ("F", 25) if c == 1 else ("M", 50)
            fh.write(f"{u + 1}::{gender}::{age}::0::00000\n")
    return rpath, upath
