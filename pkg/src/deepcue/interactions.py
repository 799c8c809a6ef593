"""Play-count ingestion, filtering, binarization, item splits and tags."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass
from os import PathLike

import numpy as np

from .errors import ParseError, SplitError, ValidationError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class InteractionSet:
    """Sparse user x item play counts with their id vocabularies.

    ``users``, ``items`` and ``counts`` are parallel arrays; each (user, item)
    pair appears once.
    """

    user_vocab: tuple[str, ...]
    item_vocab: tuple[str, ...]
    users: np.ndarray
    items: np.ndarray
    counts: np.ndarray

    @property
    def num_users(self) -> int:
        return len(self.user_vocab)

    @property
    def num_items(self) -> int:
        return len(self.item_vocab)

    def __len__(self) -> int:
        return len(self.counts)

    @classmethod
    def from_records(cls, records, user_vocab=None, item_vocab=None) -> "InteractionSet":
        """Build from ``(user_id, item_id, count)`` records, summing duplicates.

        Vocabularies are in first-appearance order unless given.
        """
        users: dict[str, int] = {u: k for k, u in enumerate(user_vocab or ())}
        items: dict[str, int] = {i: k for k, i in enumerate(item_vocab or ())}
        totals: dict[tuple[int, int], int] = {}
        for user, item, count in records:
            if count < 1:
                raise ValidationError(f"play count must be >= 1, got {count} for ({user}, {item})")
            u = users.setdefault(user, len(users))
            i = items.setdefault(item, len(items))
            totals[(u, i)] = totals.get((u, i), 0) + int(count)
        pairs = sorted(totals)
        return cls(
            tuple(users),
            tuple(items),
            np.array([p[0] for p in pairs], dtype=np.int64),
            np.array([p[1] for p in pairs], dtype=np.int64),
            np.array([totals[p] for p in pairs], dtype=np.int64),
        )


@dataclass(frozen=True)
class BinaryInteractions:
    """Per-user sorted arrays of positive item indices."""

    num_users: int
    num_items: int
    positives: tuple[np.ndarray, ...]

    @classmethod
    def from_pairs(cls, num_users: int, num_items: int, users, items) -> "BinaryInteractions":
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        buckets = [[] for _ in range(num_users)]
        for u, i in zip(users.tolist(), items.tolist()):
            buckets[u].append(i)
        return cls(num_users, num_items, tuple(np.unique(np.array(b, dtype=np.int64)) for b in buckets))

    @classmethod
    def from_dense(cls, matrix) -> "BinaryInteractions":
        m = np.asarray(matrix) != 0
        return cls(m.shape[0], m.shape[1], tuple(np.flatnonzero(row) for row in m))

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.num_users, self.num_items))
        for u, pos in enumerate(self.positives):
            out[u, pos] = 1.0
        return out

    @property
    def nnz(self) -> int:
        return sum(len(p) for p in self.positives)

    def item_user_counts(self) -> np.ndarray:
        counts = np.zeros(self.num_items, dtype=np.int64)
        for pos in self.positives:
            counts[pos] += 1
        return counts

    def item_positives(self) -> tuple[np.ndarray, ...]:
        """Transpose: per-item sorted arrays of users."""
        buckets = [[] for _ in range(self.num_items)]
        for u, pos in enumerate(self.positives):
            for i in pos.tolist():
                buckets[i].append(u)
        return tuple(np.array(b, dtype=np.int64) for b in buckets)

    def restrict(self, items) -> "BinaryInteractions":
        """Same index space, keeping only positives whose item is in ``items``."""
        keep = np.zeros(self.num_items, dtype=bool)
        keep[np.asarray(items, dtype=np.int64)] = True
        return BinaryInteractions(self.num_users, self.num_items, tuple(p[keep[p]] for p in self.positives))

    def pairs(self) -> list[tuple[int, int]]:
        return [(u, int(i)) for u, pos in enumerate(self.positives) for i in pos]


@dataclass(frozen=True)
class ItemSplit:
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    seed: int

    def as_dict(self) -> dict:
        return {
            "seed": self.seed,
            "train": self.train.tolist(),
            "valid": self.valid.tolist(),
            "test": self.test.tolist(),
        }


@dataclass(frozen=True)
class TagSet:
    tag_vocab: tuple[str, ...]
    item_ids: tuple[str, ...]
    matrix: np.ndarray  # [items x tags], 0/1

    @property
    def num_tags(self) -> int:
        return len(self.tag_vocab)


def _read_lines(path: str | PathLike) -> list[str]:
    with open(path, encoding="utf-8", newline="") as fh:
        text = fh.read()
    lines = text.split("\n")
    if lines[-1] == "":
        lines.pop()
    return lines


def load_triplets(path: str | PathLike) -> InteractionSet:
    """Read ``user<TAB>song<TAB>count`` lines; duplicate pairs are summed."""
    records = []
    for lineno, line in enumerate(_read_lines(path), start=1):
        fields = line.rstrip("\r").split("\t")
        if len(fields) != 3 or not fields[0] or not fields[1]:
            raise ParseError(f"expected 3 tab-separated fields, got {line!r}", lineno)
        try:
            count = int(fields[2])
        except ValueError:
            raise ParseError(f"play count {fields[2]!r} is not an integer", lineno) from None
        if count < 1:
            raise ValidationError(f"line {lineno}: play count must be >= 1, got {count}")
        records.append((fields[0], fields[1], count))
    s = InteractionSet.from_records(records)
    logger.info("loaded %d triples (%d users, %d items) from %s", len(s), s.num_users, s.num_items, path)
    return s


def _top_indices(scores: np.ndarray, n: int) -> np.ndarray:
    # stable sort on descending score keeps vocab order among ties
    order = np.argsort(-scores, kind="stable")
    return np.sort(order[:n])


def filter_topk(s: InteractionSet, n_items: int, n_users: int) -> InteractionSet:
    """Keep the ``n_items`` most-played items, then the ``n_users`` most active users.

    User activity is counted over retained items only. Ties go to the earlier
    vocabulary entry and survivors keep their relative vocabulary order.
    """
    if n_items < 1 or n_users < 1:
        raise ValidationError("n_items and n_users must be >= 1")
    item_totals = np.bincount(s.items, weights=s.counts, minlength=s.num_items)
    keep_items = _top_indices(item_totals, n_items)
    item_mask = np.zeros(s.num_items, dtype=bool)
    item_mask[keep_items] = True
    rows = item_mask[s.items]

    activity = np.bincount(s.users[rows], minlength=s.num_users).astype(float)
    active = np.flatnonzero(activity > 0)
    keep_users = active[_top_indices(activity[active], n_users)]
    user_mask = np.zeros(s.num_users, dtype=bool)
    user_mask[keep_users] = True
    rows &= user_mask[s.users]

    user_map = np.full(s.num_users, -1, dtype=np.int64)
    user_map[keep_users] = np.arange(len(keep_users))
    item_map = np.full(s.num_items, -1, dtype=np.int64)
    item_map[keep_items] = np.arange(len(keep_items))
    return InteractionSet(
        tuple(s.user_vocab[u] for u in keep_users),
        tuple(s.item_vocab[i] for i in keep_items),
        user_map[s.users[rows]],
        item_map[s.items[rows]],
        s.counts[rows].copy(),
    )


def binarize(s: InteractionSet) -> BinaryInteractions:
    """A pair is positive iff it was played at least once."""
    mask = s.counts >= 1
    return BinaryInteractions.from_pairs(s.num_users, s.num_items, s.users[mask], s.items[mask])


def split_items(items, ratios=(0.7, 0.1, 0.2), seed: int = 0) -> ItemSplit:
    """Shuffle ``items`` under ``seed`` and cut contiguous train/valid/test blocks."""
    items = np.asarray(items, dtype=np.int64)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise SplitError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    n = len(items)
    if n < 3:
        raise SplitError(f"need at least 3 items to split, got {n}")
    n_train = int(round(ratios[0] * n))
    n_valid = int(round(ratios[1] * n))
    n_valid = min(n_valid, n - n_train)
    perm = np.random.default_rng(seed).permutation(items)
    return ItemSplit(
        np.sort(perm[:n_train]),
        np.sort(perm[n_train : n_train + n_valid]),
        np.sort(perm[n_train + n_valid :]),
        seed,
    )


def split_pairs(b: BinaryInteractions, holdout: float = 0.2, seed: int = 0):
    """Hold out a fraction of each user's positives (warm-start protocol).

    Returns ``(train, heldout)`` over the same index space. Users with a single
    positive keep it in train.
    """
    rng = np.random.default_rng(seed)
    train, held = [], []
    for pos in b.positives:
        n_out = int(np.floor(holdout * len(pos))) if len(pos) > 1 else 0
        if len(pos) > 1:
            n_out = max(n_out, 1)
        perm = rng.permutation(pos)
        held.append(np.sort(perm[:n_out]))
        train.append(np.sort(perm[n_out:]))
    return (
        BinaryInteractions(b.num_users, b.num_items, tuple(train)),
        BinaryInteractions(b.num_users, b.num_items, tuple(held)),
    )


def popularity_scores(b: BinaryInteractions, items) -> np.ndarray:
    """Number of distinct listeners of each item in ``items``."""
    return b.item_user_counts()[np.asarray(items, dtype=np.int64)].astype(np.float64)


def load_tags(path: str | PathLike, n_tags: int = 50) -> TagSet:
    """Read ``song<TAB>tag1,tag2,...`` lines and keep the ``n_tags`` most used tags.

    Tag frequency is the number of songs carrying the tag; ties go to the tag
    seen first. Songs left without a retained tag are dropped.
    """
    entries: list[tuple[str, list[str]]] = []
    freq: Counter = Counter()
    first_seen: dict[str, int] = {}
    for lineno, line in enumerate(_read_lines(path), start=1):
        fields = line.rstrip("\r").split("\t")
        if len(fields) != 2 or not fields[0]:
            raise ParseError(f"expected 2 tab-separated fields, got {line!r}", lineno)
        tags = list(dict.fromkeys(t.strip() for t in fields[1].split(",") if t.strip()))
        for t in tags:
            first_seen.setdefault(t, len(first_seen))
        freq.update(tags)
        entries.append((fields[0], tags))

    ranked = sorted(freq, key=lambda t: (-freq[t], first_seen[t]))[:n_tags]
    vocab = tuple(sorted(ranked, key=first_seen.__getitem__))
    col = {t: k for k, t in enumerate(vocab)}
    item_ids, rows = [], []
    for item, tags in entries:
        hits = [col[t] for t in tags if t in col]
        if hits:
            row = np.zeros(len(vocab), dtype=np.uint8)
            row[hits] = 1
            item_ids.append(item)
            rows.append(row)
    matrix = np.array(rows, dtype=np.uint8).reshape(len(rows), len(vocab))
    return TagSet(vocab, tuple(item_ids), matrix)
