"""Interaction-log ingestion, leave-one-out splitting and negative sampling.

Supported input layouts:
  tab_separated  user<TAB>item<TAB>rating<TAB>timestamp   (MovieLens-100K u.data)
  double_colon   user::item::rating::timestamp            (MovieLens-1M ratings.dat)
  lastfm         userID<TAB>artistID<TAB>weight, with a header line
                 (Last.fm user_artists.dat; no timestamps)

All ratings are binarized: any logged interaction counts as a positive.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMATS = ("tab_separated", "double_colon", "lastfm")

N_EVAL_NEGATIVES = 99
MIN_INTERACTIONS = 5

SPLIT_CACHE_VERSION = 1


class DatasetFormatError(ValueError):
    """Raised when an interaction file cannot be parsed."""

    def __init__(self, message, path=None, line_no=None):
        self.path = path
        self.line_no = line_no
        prefix = f"{path}:{line_no}: " if line_no is not None else ""
        super().__init__(f"{prefix}{message}")


@dataclass(frozen=True)
class Interaction:
    """One positive user-item event. Timestamp is only used for ordering."""

    user_id: int
    item_id: int
    timestamp: int = 0


@dataclass
class InteractionDataset:
    """Per-user train positives plus leave-one-out test item and eval negatives.

    Ids are dense 0-based. ``user_ids``/``item_ids`` map dense index back to
    the original id from the source file. Immutable after construction.
    """

    num_users: int
    num_items: int
    train: list[list[int]]
    test_item: list[int]
    eval_negatives: list[list[int]]
    user_ids: list[int]
    item_ids: list[int]
    seed: int
    _train_sets: list[frozenset] = field(default_factory=list, repr=False)
    _neg_pools: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self._train_sets:
            self._train_sets = [frozenset(t) for t in self.train]

    @property
    def num_interactions(self) -> int:
        return sum(len(t) + 1 for t in self.train)

    def train_set(self, user: int) -> frozenset:
        return self._train_sets[user]

    def negative_pool(self, user: int) -> np.ndarray:
        """Items outside the user's train positives (the training-negative pool)."""
        pool = self._neg_pools.get(user)
        if pool is None:
            mask = np.ones(self.num_items, dtype=bool)
            mask[self.train[user]] = False
            pool = np.flatnonzero(mask)
            self._neg_pools[user] = pool
        return pool

    def validate(self):
        """Check the structural invariants; raises AssertionError on violation."""
        assert len(self.train) == len(self.test_item) == len(self.eval_negatives) == self.num_users
        total = 0
        for u in range(self.num_users):
            train = self._train_sets[u]
            assert self.test_item[u] not in train
            negs = self.eval_negatives[u]
            assert len(negs) == N_EVAL_NEGATIVES
            assert len(set(negs)) == N_EVAL_NEGATIVES
            interacted = train | {self.test_item[u]}
            assert not interacted.intersection(negs)
            assert all(0 <= i < self.num_items for i in interacted)
            total += len(train) + 1
        assert total == self.num_interactions


def parse_interactions(path, fmt: str) -> tuple[list[Interaction], bool]:
    """Parse a raw interaction file.

    Returns the interactions (original ids, duplicates collapsed to the latest
    timestamp) and whether the format carries timestamps.
    """
    if fmt not in FORMATS:
        raise ValueError(f"unknown format {fmt!r}; expected one of {FORMATS}")
    path = Path(path)
    sep = "::" if fmt == "double_colon" else "\t"
    has_ts = fmt != "lastfm"
    latest: dict[tuple[int, int], int] = {}
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line:
                continue
            if fmt == "lastfm" and line_no == 1 and not line.split(sep)[0].isdigit():
                continue  # header line
            parts = line.split(sep)
            expected = 3 if fmt == "lastfm" else 4
            if len(parts) != expected:
                raise DatasetFormatError(
                    f"expected {expected} fields, got {len(parts)}", path, line_no)
            try:
                user = int(parts[0])
                item = int(parts[1])
                float(parts[2])  # rating/weight: binarized, but must be numeric
                ts = int(float(parts[3])) if has_ts else 0
            except ValueError as exc:
                raise DatasetFormatError(f"bad field: {exc}", path, line_no) from None
            if user < 0 or item < 0:
                raise DatasetFormatError("negative user or item id", path, line_no)
            key = (user, item)
            if key not in latest or ts > latest[key]:
                latest[key] = ts
    if not latest:
        raise DatasetFormatError("file contains no interactions", path)
    interactions = [Interaction(u, i, t) for (u, i), t in latest.items()]
    return interactions, has_ts


def filter_min_interactions(interactions, min_interactions=MIN_INTERACTIONS):
    """Drop users with fewer than ``min_interactions`` events."""
    counts: dict[int, int] = {}
    for it in interactions:
        counts[it.user_id] = counts.get(it.user_id, 0) + 1
    keep = {u for u, c in counts.items() if c >= min_interactions}
    return [it for it in interactions if it.user_id in keep]


def remap_dense(interactions):
    """Remap original ids to dense 0-based indices (sorted original-id order)."""
    user_ids = sorted({it.user_id for it in interactions})
    item_ids = sorted({it.item_id for it in interactions})
    u_map = {orig: k for k, orig in enumerate(user_ids)}
    i_map = {orig: k for k, orig in enumerate(item_ids)}
    remapped = [Interaction(u_map[it.user_id], i_map[it.item_id], it.timestamp)
                for it in interactions]
    return remapped, user_ids, item_ids


def leave_one_out_split(interactions, num_users, num_items, seed,
                        timestamped=True, user_ids=None, item_ids=None) -> InteractionDataset:
    """Hold out one positive per user as the test item and sample 99 negatives.

    With timestamps, the latest interaction is held out (timestamp ties broken
    by larger item id). Without timestamps, a uniformly random positive is held
    out under the split seed. Negatives are drawn uniformly without replacement
    from the user's never-interacted items, once, at split time.
    """
    per_user: list[list[Interaction]] = [[] for _ in range(num_users)]
    for it in interactions:
        per_user[it.user_id].append(it)

    rng = np.random.default_rng(np.random.SeedSequence(seed))
    train: list[list[int]] = []
    test_item: list[int] = []
    eval_negatives: list[list[int]] = []
    for u in range(num_users):
        events = per_user[u]
        if len(events) < 2:
            raise ValueError(f"user {u} has {len(events)} interactions; need >= 2 to split")
        if timestamped:
            held = max(events, key=lambda it: (it.timestamp, it.item_id))
        else:
            held = events[int(rng.integers(len(events)))]
        items = sorted(it.item_id for it in events if it is not held)
        interacted = set(items) | {held.item_id}
        n_free = num_items - len(interacted)
        if n_free < N_EVAL_NEGATIVES:
            raise ValueError(
                f"user {u} has only {n_free} non-interacted items; "
                f"cannot sample {N_EVAL_NEGATIVES} eval negatives")
        mask = np.ones(num_items, dtype=bool)
        mask[list(interacted)] = False
        pool = np.flatnonzero(mask)
        negs = rng.choice(pool, size=N_EVAL_NEGATIVES, replace=False)
        train.append(items)
        test_item.append(held.item_id)
        eval_negatives.append([int(x) for x in negs])

    return InteractionDataset(
        num_users=num_users,
        num_items=num_items,
        train=train,
        test_item=test_item,
        eval_negatives=eval_negatives,
        user_ids=list(user_ids) if user_ids is not None else list(range(num_users)),
        item_ids=list(item_ids) if item_ids is not None else list(range(num_items)),
        seed=seed,
    )


def load_dataset(path, fmt: str, seed: int,
                 min_interactions=MIN_INTERACTIONS) -> InteractionDataset:
    """Parse, filter (< ``min_interactions`` users dropped), remap and split."""
    interactions, has_ts = parse_interactions(path, fmt)
    interactions = filter_min_interactions(interactions, min_interactions)
    if not interactions:
        raise DatasetFormatError("no users survive the minimum-interaction filter", path)
    remapped, user_ids, item_ids = remap_dense(interactions)
    return leave_one_out_split(
        remapped, len(user_ids), len(item_ids), seed,
        timestamped=has_ts, user_ids=user_ids, item_ids=item_ids)


def sample_training_batch(dataset: InteractionDataset, user: int,
                          negatives_per_positive: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Labeled items for one local epoch: every train positive once (label 1)
    plus ``negatives_per_positive`` uniform draws from the user's
    non-train items per positive (label 0). Returns (items, labels) arrays.
    """
    if negatives_per_positive < 0:
        raise ValueError("negatives_per_positive must be >= 0")
    positives = np.asarray(dataset.train[user], dtype=np.int64)
    n_pos = len(positives)
    n_neg = n_pos * negatives_per_positive
    if n_neg:
        pool = dataset.negative_pool(user)
        if len(pool) == 0:
            raise ValueError(f"user {user} has no negative items to sample")
        negatives = pool[rng.integers(0, len(pool), size=n_neg)]
        items = np.concatenate([positives, negatives])
        labels = np.concatenate([np.ones(n_pos), np.zeros(n_neg)])
    else:
        items = positives
        labels = np.ones(n_pos)
    return items, labels


def save_split(dataset: InteractionDataset, path):
    """Write the split (including id remap tables) as versioned JSON."""
    payload = {
        "version": SPLIT_CACHE_VERSION,
        "seed": dataset.seed,
        "num_users": dataset.num_users,
        "num_items": dataset.num_items,
        "user_ids": dataset.user_ids,
        "item_ids": dataset.item_ids,
        "train": dataset.train,
        "test_item": dataset.test_item,
        "eval_negatives": dataset.eval_negatives,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(payload, fh, separators=(",", ":"))


def load_split(path) -> InteractionDataset:
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("version") != SPLIT_CACHE_VERSION:
        raise ValueError(f"unsupported split cache version {payload.get('version')!r}")
    return InteractionDataset(
        num_users=payload["num_users"],
        num_items=payload["num_items"],
        train=payload["train"],
        test_item=payload["test_item"],
        eval_negatives=payload["eval_negatives"],
        user_ids=payload["user_ids"],
        item_ids=payload["item_ids"],
        seed=payload["seed"],
    )
