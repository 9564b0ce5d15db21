"""Interaction data: CSV loading, synthetic generation, sequencing and splits.

Every sequence holds 11 chronological interactions of one user: the first 10
form the history and the last one is the target. Sequences are partitioned
8:1:1 into train/validation/test.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence as Seq

import numpy as np

from .config import ConfigError, coerce, parse_floats, parse_ints

log = logging.getLogger(__name__)

HISTORY_LEN = 10
WINDOW_LEN = HISTORY_LEN + 1
SPLIT_RATIO = (8, 1, 1)

USERS_HEADER = ["user_id", "group", "attribute_tokens"]
ITEMS_HEADER = ["item_id", "title_tokens"]
INTERACTIONS_HEADER = ["user_id", "item_id", "rating", "timestamp"]


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class UserRecord:
    user_id: str
    group: str
    attribute_tokens: tuple[int, ...] = ()


@dataclass(frozen=True)
class ItemRecord:
    item_id: str
    title_tokens: tuple[int, ...]
    # Ground truth of a synthetic item: its group pool (None = neutral or
    # unknown) and popularity relative to the most popular item of that pool.
    # Neither is part of items.csv.
    pool: str | None = None
    strength: float = 1.0


@dataclass(frozen=True, order=True)
class Interaction:
    user_id: str
    item_id: str
    rating: int
    timestamp: int

    def sort_key(self):
        return (self.timestamp, self.item_id)


@dataclass(frozen=True)
class InteractionDataset:
    users: tuple[UserRecord, ...]
    items: tuple[ItemRecord, ...]
    interactions: tuple[Interaction, ...]
    group_set: tuple[str, ...]
    rating_median: int
    rating_scale: tuple[int, int] = (1, 5)
    _user_index: dict = field(default=None, init=False, repr=False, compare=False)
    _item_index: dict = field(default=None, init=False, repr=False, compare=False)
    _histories: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(self.group_set) < 2:
            raise DatasetError("group_set needs at least 2 groups")
        if len(set(self.group_set)) != len(self.group_set):
            raise DatasetError("group_set has duplicate labels")
        lo, hi = self.rating_scale
        if not lo <= self.rating_median <= hi:
            raise DatasetError(f"rating_median {self.rating_median} outside scale {self.rating_scale}")
        users = {}
        for u in self.users:
            if u.user_id in users:
                raise DatasetError(f"duplicate user_id {u.user_id!r}")
            if u.group not in self.group_set:
                raise DatasetError(f"user {u.user_id!r} has unknown group label {u.group!r}")
            users[u.user_id] = u
        items = {}
        for v in self.items:
            if v.item_id in items:
                raise DatasetError(f"duplicate item_id {v.item_id!r}")
            if not v.title_tokens:
                raise DatasetError(f"item {v.item_id!r} has empty title_tokens")
            items[v.item_id] = v
        hist: dict[str, list[Interaction]] = {uid: [] for uid in users}
        for x in self.interactions:
            if x.user_id not in users:
                raise DatasetError(f"interaction references unknown user {x.user_id!r}")
            if x.item_id not in items:
                raise DatasetError(f"interaction references unknown item {x.item_id!r}")
            if not lo <= x.rating <= hi:
                raise DatasetError(f"rating {x.rating} outside scale {self.rating_scale}")
            hist[x.user_id].append(x)
        for xs in hist.values():
            xs.sort(key=Interaction.sort_key)
        object.__setattr__(self, "_user_index", users)
        object.__setattr__(self, "_item_index", items)
        object.__setattr__(self, "_histories", {k: tuple(v) for k, v in hist.items()})

    def user(self, user_id) -> UserRecord:
        return self._user_index[user_id]

    def item(self, item_id) -> ItemRecord:
        return self._item_index[item_id]

    def has_item(self, item_id) -> bool:
        return item_id in self._item_index

    def history(self, user_id) -> tuple[Interaction, ...]:
        """Chronological interactions of ``user_id`` (ties broken by item_id)."""
        return self._histories[user_id]

    def users_in(self, group) -> list[UserRecord]:
        return [u for u in self.users if u.group == group]

    def restrict(self, interactions) -> "InteractionDataset":
        """Same users/items/groups, different interaction list."""
        return InteractionDataset(
            users=self.users,
            items=self.items,
            interactions=tuple(interactions),
            group_set=self.group_set,
            rating_median=self.rating_median,
            rating_scale=self.rating_scale,
        )


@dataclass(frozen=True)
class Sequence:
    user_id: str
    history: tuple[Interaction, ...]
    target: Interaction

    def __post_init__(self):
        if len(self.history) != HISTORY_LEN:
            raise DatasetError(f"history must hold {HISTORY_LEN} interactions, got {len(self.history)}")
        keys = [x.sort_key() for x in (*self.history, self.target)]
        if any(a >= b for a, b in zip(keys, keys[1:])):
            raise DatasetError("sequence interactions are not strictly chronological")

    @property
    def history_items(self) -> list[str]:
        return [x.item_id for x in self.history]


class SequenceList(list):
    """A list of sequences that also remembers how many users were skipped."""

    n_skipped: int = 0


@dataclass(frozen=True)
class DataSplit:
    train: tuple[Sequence, ...]
    validation: tuple[Sequence, ...]
    test: tuple[Sequence, ...]

    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.validation), len(self.test)


def label_from_rating(rating: int, rating_median: int) -> int:
    """1 (like) iff ``rating >= rating_median``."""
    return int(rating >= rating_median)


# --------------------------------------------------------------------------- CSV


def _parse_tokens(field_value: str, path, lineno) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in field_value.split())
    except ValueError:
        raise DatasetError(f"{path}:{lineno}: token list must be space-separated integers") from None


def _rows(path, header):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            first = next(reader)
        except StopIteration:
            raise DatasetError(f"{path}: empty file") from None
        if [h.strip() for h in first] != header:
            raise DatasetError(f"{path}:1: expected header {','.join(header)}")
        for row in reader:
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DatasetError(
                    f"{path}:{reader.line_num}: expected {len(header)} fields, got {len(row)}"
                )
            yield reader.line_num, [c.strip() for c in row]


def load_dataset(users_path, items_path, interactions_path, group_set, rating_median,
                 rating_scale=(1, 5)) -> InteractionDataset:
    """Read the three CSV files into a validated dataset.

    Interactions duplicated on ``(user, item, timestamp)`` keep their first row.
    Errors carry the file name and line number of the offending row.
    """
    group_set = tuple(group_set)
    users = []
    for lineno, (uid, group, toks) in _rows(users_path, USERS_HEADER):
        if group not in group_set:
            raise DatasetError(f"{users_path}:{lineno}: unknown group label {group!r}")
        users.append(UserRecord(uid, group, _parse_tokens(toks, users_path, lineno)))
    items = []
    for lineno, (iid, toks) in _rows(items_path, ITEMS_HEADER):
        tokens = _parse_tokens(toks, items_path, lineno)
        if not tokens:
            raise DatasetError(f"{items_path}:{lineno}: empty title_tokens")
        items.append(ItemRecord(iid, tokens))
    user_ids = {u.user_id for u in users}
    item_ids = {v.item_id for v in items}
    lo, hi = rating_scale
    seen = set()
    interactions = []
    for lineno, (uid, iid, rating, ts) in _rows(interactions_path, INTERACTIONS_HEADER):
        try:
            rating, ts = int(rating), int(ts)
        except ValueError:
            raise DatasetError(f"{interactions_path}:{lineno}: rating/timestamp must be integers") from None
        if uid not in user_ids:
            raise DatasetError(f"{interactions_path}:{lineno}: dangling user reference {uid!r}")
        if iid not in item_ids:
            raise DatasetError(f"{interactions_path}:{lineno}: dangling item reference {iid!r}")
        if not lo <= rating <= hi:
            raise DatasetError(f"{interactions_path}:{lineno}: rating {rating} outside scale {rating_scale}")
        key = (uid, iid, ts)
        if key in seen:
            continue
        seen.add(key)
        interactions.append(Interaction(uid, iid, rating, ts))
    return InteractionDataset(tuple(users), tuple(items), tuple(interactions), group_set,
                              int(rating_median), tuple(rating_scale))


def save_dataset(dataset: InteractionDataset, out_dir) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "users": out_dir / "users.csv",
        "items": out_dir / "items.csv",
        "interactions": out_dir / "interactions.csv",
    }
    with open(paths["users"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(USERS_HEADER)
        for u in dataset.users:
            w.writerow([u.user_id, u.group, " ".join(map(str, u.attribute_tokens))])
    with open(paths["items"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ITEMS_HEADER)
        for v in dataset.items:
            w.writerow([v.item_id, " ".join(map(str, v.title_tokens))])
    with open(paths["interactions"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(INTERACTIONS_HEADER)
        for x in dataset.interactions:
            w.writerow([x.user_id, x.item_id, x.rating, x.timestamp])
    return paths


# --------------------------------------------------------------------- sequences


def build_sequences(dataset: InteractionDataset, max_sequences: int, seed: int) -> SequenceList:
    """Sample up to ``max_sequences`` distinct 11-interaction windows.

    Windows are contiguous in each user's chronological history and are drawn
    uniformly without replacement from the pool of all windows, so one user can
    contribute several sequences. Users with fewer than 11 interactions are
    skipped and counted in ``result.n_skipped``.
    """
    if max_sequences < 1:
        raise DatasetError("max_sequences must be positive")
    windows = []
    skipped = 0
    for u in dataset.users:
        n = len(dataset.history(u.user_id))
        if n < WINDOW_LEN:
            skipped += 1
            continue
        windows.extend((u.user_id, start) for start in range(n - WINDOW_LEN + 1))
    if not windows:
        raise DatasetError(f"no user has at least {WINDOW_LEN} interactions")
    rng = np.random.default_rng(seed)
    take = min(max_sequences, len(windows))
    picked = rng.permutation(len(windows))[:take]
    out = SequenceList()
    for idx in picked:
        uid, start = windows[idx]
        xs = dataset.history(uid)[start:start + WINDOW_LEN]
        out.append(Sequence(uid, tuple(xs[:HISTORY_LEN]), xs[HISTORY_LEN]))
    out.n_skipped = skipped
    if skipped:
        log.info("skipped %d users with fewer than %d interactions", skipped, WINDOW_LEN)
    return out


def split_sizes(n: int) -> tuple[int, int, int]:
    """8:1:1 sizes; validation and test are ``round(n / 10)``, train takes the rest."""
    if n < 10:
        raise DatasetError(f"need at least 10 sequences to split, got {n}")
    tenth = int(n / 10 + 0.5)
    return n - 2 * tenth, tenth, tenth


def leave_one_out_split(sequences: Seq[Sequence], seed: int) -> DataSplit:
    n_train, n_val, _ = split_sizes(len(sequences))
    order = np.random.default_rng(seed).permutation(len(sequences))
    seqs = [sequences[i] for i in order]
    return DataSplit(
        train=tuple(seqs[:n_train]),
        validation=tuple(seqs[n_train:n_train + n_val]),
        test=tuple(seqs[n_train + n_val:]),
    )


# --------------------------------------------------------------------- synthetic

SYNTHETIC_SCHEMA = {
    "n_users": int,
    "n_items": int,
    "group_ratio": parse_floats,
    "affinity": float,
    "rating_scale": parse_ints,
    "interactions_per_user": int,
    # optional
    "group_labels": lambda s: [x.strip() for x in s.split(",") if x.strip()],
    "neutral_prob": float,
    "affinity_spread": float,
    "preference_strength": float,
    "popularity_skew": float,
    "rating_median": int,
    "like_offset": float,
    "group_preference": float,
}
SYNTHETIC_REQUIRED = ("n_users", "n_items", "group_ratio", "affinity", "rating_scale",
                      "interactions_per_user")


@dataclass(frozen=True)
class SyntheticConfig:
    """Knobs of :func:`generate_synthetic`.

    ``affinity`` is the probability that an interaction lands on an item from
    the user's own group pool; each user draws their personal affinity around
    it with ``affinity_spread``. ``preference_strength`` controls how strongly
    that personal affinity tilts ratings toward own-group items and away from
    other groups' items. ``group_preference`` adds a like bonus on own-group
    items that grows with their popularity, so the head of each pool is what
    the group likes best; ``like_offset`` shifts every like logit.
    """

    n_users: int
    n_items: int
    group_ratio: tuple[float, ...] = (0.7, 0.3)
    affinity: float = 0.85
    rating_scale: tuple[int, int] = (1, 5)
    interactions_per_user: int = 20
    group_labels: tuple[str, ...] | None = None
    neutral_prob: float = 0.2
    affinity_spread: float = 0.2
    preference_strength: float = 6.0
    popularity_skew: float = 1.0
    rating_median: int | None = None
    like_offset: float = -2.0
    group_preference: float = 5.0

    @classmethod
    def from_mapping(cls, values: dict) -> "SyntheticConfig":
        kw = coerce(values, SYNTHETIC_SCHEMA, SYNTHETIC_REQUIRED, where="synthetic config")
        for key in ("group_ratio", "rating_scale", "group_labels"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)

    def to_mapping(self) -> dict:
        out = {}
        for k in SYNTHETIC_SCHEMA:
            v = getattr(self, k)
            if v is not None:
                out[k] = list(v) if isinstance(v, tuple) else v
        return out

    @property
    def labels(self) -> tuple[str, ...]:
        if self.group_labels is not None:
            return tuple(self.group_labels)
        return tuple(f"G{i + 1}" for i in range(len(self.group_ratio)))

    @property
    def median(self) -> int:
        if self.rating_median is not None:
            return self.rating_median
        lo, hi = self.rating_scale
        return (lo + hi) // 2

    def validate(self) -> None:
        ratio = np.asarray(self.group_ratio, dtype=float)
        if ratio.size < 2:
            raise ConfigError("group_ratio needs at least 2 entries")
        if np.any(ratio <= 0) or abs(ratio.sum() - 1.0) > 1e-6:
            raise ConfigError("group_ratio entries must be positive and sum to 1")
        if len(self.labels) != ratio.size:
            raise ConfigError("group_labels and group_ratio lengths differ")
        if not 0.0 <= self.affinity <= 1.0:
            raise ConfigError("affinity must lie in [0, 1]")
        if not 0.0 <= self.neutral_prob < 1.0:
            raise ConfigError("neutral_prob must lie in [0, 1)")
        if len(self.rating_scale) != 2 or self.rating_scale[0] >= self.rating_scale[1]:
            raise ConfigError("rating_scale must be 'lo,hi' with lo < hi")
        lo, hi = self.rating_scale
        if not lo < self.median <= hi:
            raise ConfigError("rating_median must lie in (lo, hi]")
        if self.n_users < 1 or self.n_items < 1 or self.interactions_per_user < 1:
            raise ConfigError("n_users, n_items and interactions_per_user must be positive")
        if self.affinity_spread < 0:
            raise ConfigError("affinity_spread must be non-negative")
        if self.popularity_skew < 0:
            raise ConfigError("popularity_skew must be non-negative")


def _apportion(total: int, weights) -> np.ndarray:
    """Integer counts summing to ``total`` proportional to ``weights`` (largest remainder)."""
    w = np.asarray(weights, dtype=float)
    raw = total * w / w.sum()
    counts = np.floor(raw).astype(int)
    rest = total - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:rest]] += 1
    return counts


def generate_synthetic(config: SyntheticConfig, seed: int) -> InteractionDataset:
    """Planted-bias interaction data.

    Users get exact group counts from ``group_ratio``. Items go to a neutral
    pool (share ``neutral_prob``) or to one group pool (remaining items split by
    ``group_ratio``) and get Zipf popularity ``rank ** -popularity_skew`` within
    their pool. Each interaction picks an own-pool item with the user's personal
    affinity and otherwise an item outside the own pool, popularity-weighted
    in both cases. A like has logit
    ``offset + quality + group_preference * own * popularity + strength * sign * (affinity_u - 0.5)``
    where ``own`` is 1 on own-pool items and sign is +1 for own-pool items,
    -1 for other groups' pools and 0 for neutral items.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    labels = config.labels
    n_groups = len(labels)
    lo, hi = config.rating_scale
    median = config.median

    user_counts = _apportion(config.n_users, config.group_ratio)
    user_groups = rng.permutation(np.repeat(np.arange(n_groups), user_counts))

    n_neutral = int(round(config.neutral_prob * config.n_items))
    pool_counts = _apportion(config.n_items - n_neutral, config.group_ratio)
    for g, c in enumerate(pool_counts):
        if c == 0 and user_counts[g] > 0:
            raise ConfigError(f"group {labels[g]!r} has users but an empty item pool")
    item_pool = rng.permutation(np.concatenate([np.repeat(np.arange(n_groups), pool_counts),
                                                np.full(n_neutral, -1)]))
    quality = rng.normal(size=config.n_items)
    # Zipf popularity inside every pool (neutral included), random rank order
    popularity = np.zeros(config.n_items)
    for p in range(-1, n_groups):
        members = np.flatnonzero(item_pool == p)
        ranks = rng.permutation(members.size) + 1
        popularity[members] = ranks.astype(float) ** -config.popularity_skew

    width_u = len(str(config.n_users))
    width_i = len(str(config.n_items))
    users = tuple(
        UserRecord(f"u{i:0{width_u}d}", labels[g], (int(g),)) for i, g in enumerate(user_groups)
    )
    items = tuple(
        ItemRecord(f"i{j:0{width_i}d}", (j,), None if p < 0 else labels[p], float(popularity[j]))
        for j, p in enumerate(item_pool)
    )

    k = config.interactions_per_user
    pools = [np.flatnonzero(item_pool == g) for g in range(n_groups)]
    outside = [np.flatnonzero(item_pool != g) for g in range(n_groups)]

    def draw(candidates, n):
        w = popularity[candidates]
        return rng.choice(candidates, size=n, replace=False, p=w / w.sum())

    interactions = []
    for i, g in enumerate(user_groups):
        a_u = float(np.clip(config.affinity + config.affinity_spread * rng.normal(), 0.0, 1.0))
        n_own = int(rng.binomial(k, a_u))
        n_own = min(n_own, len(pools[g]))
        n_out = min(k - n_own, len(outside[g]))
        if n_own + n_out < k:
            raise ConfigError("interactions_per_user exceeds the number of available items")
        picked = np.concatenate([draw(pools[g], n_own), draw(outside[g], n_out)]).astype(int)
        picked = rng.permutation(picked)
        pool = item_pool[picked]
        sign = np.where(pool == g, 1.0, np.where(pool < 0, 0.0, -1.0))
        logit = (config.like_offset + quality[picked] + config.group_preference * (sign > 0) * popularity[picked]
                 + config.preference_strength * sign * (a_u - 0.5))
        like = rng.random(k) < 1.0 / (1.0 + np.exp(-logit))
        ratings = np.where(like, rng.integers(median, hi + 1, size=k),
                           rng.integers(lo, median, size=k))
        t = int(rng.integers(0, 10_000)) + np.cumsum(rng.integers(1, 100, size=k))
        for j, r, ts in zip(picked, ratings, t):
            interactions.append(Interaction(users[i].user_id, items[j].item_id, int(r), int(ts)))

    return InteractionDataset(users, items, tuple(interactions), labels, median, (lo, hi))
