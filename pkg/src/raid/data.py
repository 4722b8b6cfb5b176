"""MovieLens-style ingestion: parsing, k-core filtering, attribute bins, splits.

A :class:`Dataset` is stored as a directory holding ``manifest.json`` and
plain CSV tables (``users.csv``, ``items.csv``, ``train.csv``,
``heldout.csv``, ``loo.csv``). Writing is deterministic: the same inputs
and seed give byte-identical files.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

MALFORMED_LIMIT = 0.01
FORMATS = ("movielens_dat", "csv")
SCHEMES = {"gender": "gender2", "age": "age3"}
AGE_RULE = "age3: <35 -> 1, 35..45 inclusive -> 2, >45 -> 3 (ML-1M codes 1/18/25 -> 1, 35/45 -> 2, 50/56 -> 3)"
MANIFEST_VERSION = 1


class DataError(ValueError):
    """Input that cannot be turned into a dataset."""


@dataclass
class RawRatings:
    """Parallel arrays of raw ids (strings), ratings and integer timestamps."""

    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    timestamps: np.ndarray

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=str)
        self.items = np.asarray(self.items, dtype=str)
        self.ratings = np.asarray(self.ratings, dtype=float)
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        n = len(self.users)
        if not (len(self.items) == len(self.ratings) == len(self.timestamps) == n):
            raise ValueError("rating columns differ in length")

    def __len__(self):
        return len(self.users)

    def subset(self, mask):
        return RawRatings(self.users[mask], self.items[mask], self.ratings[mask], self.timestamps[mask])

    @classmethod
    def empty(cls):
        return cls(np.empty(0, str), np.empty(0, str), np.empty(0), np.empty(0, np.int64))


def _parse_line(line, sep):
    parts = [p.strip() for p in line.split(sep)]
    if len(parts) != 4 or not parts[0] or not parts[1]:
        raise ValueError("expected 4 fields with nonempty ids")
    return parts[0], parts[1], float(parts[2]), int(parts[3])


def parse_ratings(path, format="movielens_dat", malformed_limit=MALFORMED_LIMIT) -> RawRatings:
    """Read ``user::item::rating::timestamp`` lines (or comma-separated ones).

    Blank lines are ignored. A CSV whose first line does not parse is taken
    to have a header. Malformed lines are skipped while they stay within
    ``malformed_limit`` of all lines; beyond that a :class:`DataError`
    lists the offending line numbers.
    """
    if format not in FORMATS:
        raise DataError(f"unknown ratings format {format!r}; expected one of {FORMATS}")
    sep = "::" if format == "movielens_dat" else ","
    rows, bad, total = [], [], 0
    with open(path, encoding="utf-8", errors="replace") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append(_parse_line(line, sep))
            except ValueError:
                if format == "csv" and lineno == 1:
                    continue  # header
                bad.append(lineno)
            total += 1
    if bad:
        if len(bad) > malformed_limit * total:
            shown = ", ".join(map(str, bad[:20])) + (" ..." if len(bad) > 20 else "")
            raise DataError(f"{path}: {len(bad)} of {total} lines malformed (lines {shown})")
        log.warning("%s: skipped %d malformed lines (%s)", path, len(bad), bad[:20])
    if not rows:
        log.warning("%s: no ratings found", path)
        return RawRatings.empty()
    u, i, r, t = zip(*rows)
    return RawRatings(np.array(u), np.array(i), np.array(r), np.array(t))


def bin_attribute(raw_value, scheme) -> int:
    """Class index (from 1) of a raw attribute value; ``ValueError`` if unknown."""
    token = str(raw_value).strip()
    if scheme == "gender2":
        classes = {"F": 1, "M": 2}
        if token.upper() not in classes:
            raise ValueError(f"unknown gender token {token!r}")
        return classes[token.upper()]
    if scheme == "age3":
        try:
            age = float(token)
        except ValueError:
            raise ValueError(f"unparseable age {token!r}") from None
        if not np.isfinite(age) or age < 0:
            raise ValueError(f"invalid age {token!r}")
        # ML-1M age codes (1, 18, 25, 35, 45, 50, 56) fall on the same bands
        if age < 35:
            return 1
        return 2 if age <= 45 else 3
    raise ValueError(f"unknown scheme {scheme!r}")


def parse_users(path):
    """Read ``user::gender::age::occupation::zip`` lines.

    Returns ``{raw_user_id: {"gender": class, "age": class}}``. A value
    that cannot be binned leaves that attribute out for the user (logged).
    """
    out, unknown = {}, 0
    with open(path, encoding="utf-8", errors="replace") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("::")
            if len(parts) < 3 or not parts[0]:
                raise DataError(f"{path}:{lineno}: expected user::gender::age::...")
            attrs = {}
            for name, raw in (("gender", parts[1]), ("age", parts[2])):
                try:
                    attrs[name] = bin_attribute(raw, SCHEMES[name])
                except ValueError:
                    unknown += 1
            out[parts[0]] = attrs
    if unknown:
        log.warning("%s: %d attribute values could not be binned; those users are unlabeled", path, unknown)
    return out


def dedupe(ratings: RawRatings) -> RawRatings:
    """Keep the earliest record of every (user, item) pair."""
    if len(ratings) == 0:
        return ratings
    order = np.lexsort((np.arange(len(ratings)), ratings.timestamps, ratings.items, ratings.users))
    u, i = ratings.users[order], ratings.items[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = (u[1:] != u[:-1]) | (i[1:] != i[:-1])
    return ratings.subset(np.sort(order[first]))


def filter_kcore(ratings: RawRatings, min_user=5, min_item=5) -> RawRatings:
    """Alternate user and item filters until neither removes anything.

    Repeated (user, item) pairs are collapsed first, so counts are distinct
    interactions.
    """
    if min_user < 1 or min_item < 1:
        raise ValueError("thresholds must be >= 1")
    ratings = dedupe(ratings)
    while True:
        n = len(ratings)
        _, inv, counts = np.unique(ratings.users, return_inverse=True, return_counts=True)
        ratings = ratings.subset(counts[inv] >= min_user)
        _, inv, counts = np.unique(ratings.items, return_inverse=True, return_counts=True)
        ratings = ratings.subset(counts[inv] >= min_item)
        if len(ratings) == 0:
            raise DataError(f"k-core filtering (user>={min_user}, item>={min_item}) removed everything")
        if len(ratings) == n:
            return ratings


def _index_of(ordered, values):
    by_value = np.argsort(ordered)
    return by_value[np.searchsorted(ordered, values, sorter=by_value)]


def _id_order(ids):
    """Sorted unique ids: numerically when all are integers, else as strings."""
    uniq = np.unique(ids)
    try:
        keys = np.array([int(x) for x in uniq])
    except ValueError:
        return uniq
    return uniq[np.argsort(keys, kind="stable")]


@dataclass
class Dataset:
    user_ids: np.ndarray  # raw id of user index u
    item_ids: np.ndarray
    train: np.ndarray  # (n, 2) user/item index pairs
    heldout: np.ndarray  # (n, 2) the 10% interaction-level remainder
    validation_items: np.ndarray  # (N,)
    test_items: np.ndarray  # (N,)
    attributes: dict = field(default_factory=dict)  # name -> (N,) classes, 0 = unlabeled
    meta: dict = field(default_factory=dict)

    @property
    def num_users(self):
        return len(self.user_ids)

    @property
    def num_items(self):
        return len(self.item_ids)

    def labels(self, attribute):
        if attribute not in self.attributes:
            raise KeyError(f"dataset has no attribute {attribute!r}; have {sorted(self.attributes)}")
        return self.attributes[attribute]

    def fingerprint(self) -> str:
        """SHA-256 over index maps, splits and labels."""
        h = hashlib.sha256()
        for arr in (self.user_ids, self.item_ids):
            h.update("\n".join(arr.tolist()).encode())
        for arr in (self.train, self.heldout, self.validation_items, self.test_items):
            h.update(np.ascontiguousarray(arr, dtype="<i8").tobytes())
        for name in sorted(self.attributes):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.attributes[name], dtype="<i8").tobytes())
        return h.hexdigest()

    def num_interactions(self):
        return len(self.train) + len(self.heldout) + 2 * self.num_users

    def save(self, directory):
        os.makedirs(directory, exist_ok=True)
        names = sorted(self.attributes)
        _write_csv(
            os.path.join(directory, "users.csv"),
            ["user", "raw_id", *names],
            [[u, rid, *(int(self.attributes[n][u]) for n in names)] for u, rid in enumerate(self.user_ids)],
        )
        _write_csv(os.path.join(directory, "items.csv"), ["item", "raw_id"], list(enumerate(self.item_ids)))
        _write_csv(os.path.join(directory, "train.csv"), ["user", "item"], self.train.tolist())
        _write_csv(os.path.join(directory, "heldout.csv"), ["user", "item"], self.heldout.tolist())
        _write_csv(
            os.path.join(directory, "loo.csv"),
            ["user", "validation_item", "test_item"],
            [[u, int(v), int(t)] for u, (v, t) in enumerate(zip(self.validation_items, self.test_items))],
        )
        manifest = {
            "version": MANIFEST_VERSION,
            "num_users": self.num_users,
            "num_items": self.num_items,
            "num_interactions": int(self.num_interactions()),
            "num_train": len(self.train),
            "num_heldout": len(self.heldout),
            "attributes": {
                n: {"scheme": SCHEMES.get(n, n), "counts": _class_counts(self.attributes[n])} for n in names
            },
            "fingerprint": self.fingerprint(),
            **{k: v for k, v in self.meta.items() if k not in ("version", "fingerprint")},
        }
        with open(os.path.join(directory, "manifest.json"), "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, directory):
        path = os.path.join(directory, "manifest.json")
        if not os.path.isfile(path):
            raise FileNotFoundError(f"no dataset manifest at {path}")
        with open(path, encoding="utf-8") as fh:
            manifest = json.load(fh)
        if manifest.get("version") != MANIFEST_VERSION:
            raise DataError(f"unsupported dataset version {manifest.get('version')!r}")
        header, users = _read_csv(os.path.join(directory, "users.csv"))
        _, items = _read_csv(os.path.join(directory, "items.csv"))
        _, loo = _read_csv(os.path.join(directory, "loo.csv"))
        attrs = {name: np.array([int(r[2 + j]) for r in users], dtype=np.int64)
                 for j, name in enumerate(header[2:])}
        meta = {k: v for k, v in manifest.items()
                if k not in ("num_users", "num_items", "num_interactions", "num_train",
                             "num_heldout", "attributes", "fingerprint", "version")}
        ds = cls(
            user_ids=np.array([r[1] for r in users], dtype=str),
            item_ids=np.array([r[1] for r in items], dtype=str),
            train=_pairs(os.path.join(directory, "train.csv")),
            heldout=_pairs(os.path.join(directory, "heldout.csv")),
            validation_items=np.array([int(r[1]) for r in loo], dtype=np.int64),
            test_items=np.array([int(r[2]) for r in loo], dtype=np.int64),
            attributes=attrs,
            meta=meta,
        )
        if ds.fingerprint() != manifest["fingerprint"]:
            raise DataError(f"{directory}: tables do not match the manifest fingerprint")
        return ds


def _class_counts(labels):
    values, counts = np.unique(labels, return_counts=True)
    return {str(int(v)): int(c) for v, c in zip(values, counts)}


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def _pairs(path):
    _, rows = _read_csv(path)
    return np.array(rows, dtype=np.int64).reshape(-1, 2)


def build_splits(ratings: RawRatings, seed=0, user_attributes=None, heldout_fraction=0.1) -> Dataset:
    """Leave-two-out plus an interaction-level train/held-out split.

    Per user, interactions are ordered by time (ties by item index); the
    last becomes the test item, the one before it the validation item.
    The remaining interactions of all users are shuffled with ``seed`` and
    ``heldout_fraction`` of them are held out. Users with fewer than three
    interactions are dropped (logged). Repeated pairs are collapsed first.

    ``user_attributes`` maps raw user ids to ``{name: class}``; users
    without an entry stay in the data with label 0 (unlabeled).
    """
    ratings = dedupe(ratings)
    if len(ratings) == 0:
        raise DataError("no ratings to split")
    _, inv, counts = np.unique(ratings.users, return_inverse=True, return_counts=True)
    short = counts < 3
    if short.any():
        log.warning("dropping %d users with fewer than 3 interactions", int(short.sum()))
        ratings = ratings.subset(~short[inv])
        if len(ratings) == 0:
            raise DataError("no user has 3 or more interactions")

    user_ids = _id_order(ratings.users)
    item_ids = _id_order(ratings.items)
    uidx = _index_of(user_ids, ratings.users)
    iidx = _index_of(item_ids, ratings.items)

    order = np.lexsort((iidx, ratings.timestamps, uidx))
    u, i = uidx[order], iidx[order]
    last = np.r_[u[1:] != u[:-1], True]
    second = np.r_[last[1:], False]
    N = len(user_ids)
    test = np.empty(N, dtype=np.int64)
    val = np.empty(N, dtype=np.int64)
    test[u[last]] = i[last]
    val[u[second]] = i[second]

    rest = np.column_stack([u, i])[~(last | second)]
    perm = np.random.default_rng(seed).permutation(len(rest))
    n_held = int(round(heldout_fraction * len(rest)))
    held = rest[np.sort(perm[:n_held])]
    train = rest[np.sort(perm[n_held:])]

    attributes = {}
    if user_attributes is not None:
        for name in SCHEMES:
            attributes[name] = np.array(
                [user_attributes.get(rid, {}).get(name, 0) for rid in user_ids], dtype=np.int64
            )
    meta = {"seed": int(seed), "heldout_fraction": heldout_fraction, "dropped_short_users": int(short.sum()),
            "age_bands": AGE_RULE}
    return Dataset(user_ids, item_ids, train, held, val, test, attributes, meta)


def ingest(ratings_path, users_path=None, format="movielens_dat", min_user=5, min_item=5, seed=0) -> Dataset:
    """Full pipeline: parse, k-core filter, split, attach attribute labels."""
    raw = parse_ratings(ratings_path, format)
    if len(raw) == 0:
        raise DataError(f"{ratings_path}: no ratings")
    attrs = parse_users(users_path) if users_path else None
    filtered = filter_kcore(raw, min_user, min_item)
    ds = build_splits(filtered, seed=seed, user_attributes=attrs)
    ds.meta.update({
        "min_user": int(min_user),
        "min_item": int(min_item),
        "format": format,
        "raw_ratings": len(raw),
        "inputs": {
            "ratings": {"name": os.path.basename(ratings_path), "sha256": _sha256(ratings_path)},
            **({"users": {"name": os.path.basename(users_path), "sha256": _sha256(users_path)}}
               if users_path else {}),
        },
    })
    return ds


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
