"""Interaction logs: loading, k-core filtering, splitting, and popularity stats.

A Dataset is an immutable implicit-feedback log over dense 0-based user and
item ids, with per-user/per-item interaction counts and positive sets. Splits
share the source's id space so embeddings stay aligned across members.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError

# Sentinel for interactions without a timestamp in a mixed-column file.
TS_MISSING = np.iinfo(np.int64).min

HEAD, MID, TAIL = 0, 1, 2
SUBGROUP_NAMES = ("head", "mid", "tail")


@dataclass(frozen=True)
class Interaction:
    user_id: int
    item_id: int
    timestamp: Optional[int] = None


class Dataset:
    """Immutable interaction log with popularity statistics and id maps."""

    def __init__(
        self,
        users: np.ndarray,
        items: np.ndarray,
        timestamps: Optional[np.ndarray],
        num_users: int,
        num_items: int,
        user_ids: Sequence[str],
        item_ids: Sequence[str],
    ):
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        if users.shape != items.shape:
            raise DataError("user and item arrays differ in length")
        if len(users) and (users.min() < 0 or users.max() >= num_users):
            raise DataError("user id out of range")
        if len(items) and (items.min() < 0 or items.max() >= num_items):
            raise DataError("item id out of range")
        if len(user_ids) != num_users or len(item_ids) != num_items:
            raise DataError("id maps do not match num_users/num_items")
        pairs = set(zip(users.tolist(), items.tolist()))
        if len(pairs) != len(users):
            raise DataError("duplicate (user, item) interaction")

        self.users = users
        self.items = items
        self.timestamps = None if timestamps is None else np.asarray(timestamps, dtype=np.int64)
        self.num_users = int(num_users)
        self.num_items = int(num_items)
        self.user_ids = tuple(user_ids)
        self.item_ids = tuple(item_ids)
        self.user_index = {raw: k for k, raw in enumerate(self.user_ids)}
        self.item_index = {raw: k for k, raw in enumerate(self.item_ids)}
        self.user_pop = np.bincount(users, minlength=num_users).astype(np.int64)
        self.item_pop = np.bincount(items, minlength=num_items).astype(np.int64)

        pos_u: list[set[int]] = [set() for _ in range(num_users)]
        pos_i: list[set[int]] = [set() for _ in range(num_items)]
        for u, i in zip(users.tolist(), items.tolist()):
            pos_u[u].add(i)
            pos_i[i].add(u)
        self.user_positives = tuple(frozenset(s) for s in pos_u)
        self.item_positives = tuple(frozenset(s) for s in pos_i)

        for arr in (self.users, self.items, self.user_pop, self.item_pop):
            arr.setflags(write=False)
        if self.timestamps is not None:
            self.timestamps.setflags(write=False)

    def __len__(self) -> int:
        return len(self.users)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        same_ts = (
            (self.timestamps is None and other.timestamps is None)
            or (
                self.timestamps is not None
                and other.timestamps is not None
                and np.array_equal(self.timestamps, other.timestamps)
            )
        )
        return (
            self.num_users == other.num_users
            and self.num_items == other.num_items
            and self.user_ids == other.user_ids
            and self.item_ids == other.item_ids
            and np.array_equal(self.users, other.users)
            and np.array_equal(self.items, other.items)
            and same_ts
        )

    @property
    def has_timestamps(self) -> bool:
        return self.timestamps is not None and not np.any(self.timestamps == TS_MISSING)

    def iter_interactions(self) -> Iterator[Interaction]:
        for k in range(len(self.users)):
            ts = None
            if self.timestamps is not None and self.timestamps[k] != TS_MISSING:
                ts = int(self.timestamps[k])
            yield Interaction(int(self.users[k]), int(self.items[k]), ts)

    def subset(self, idx: np.ndarray) -> "Dataset":
        """New Dataset over the same id space holding the given interaction rows."""
        idx = np.asarray(idx, dtype=np.int64)
        ts = None if self.timestamps is None else self.timestamps[idx]
        return Dataset(
            self.users[idx], self.items[idx], ts,
            self.num_users, self.num_items, self.user_ids, self.item_ids,
        )


@dataclass
class DataSplit:
    train: Dataset
    validation: Dataset
    test_imbalanced: Optional[Dataset] = None
    test_balanced: Optional[Dataset] = None
    test_temporal: Optional[Dataset] = None

    def members(self) -> dict[str, Dataset]:
        out = {"train": self.train, "validation": self.validation}
        for name in ("test_imbalanced", "test_balanced", "test_temporal"):
            member = getattr(self, name)
            if member is not None:
                out[name] = member
        return out


def load_interactions(
    path,
    sep: Optional[str] = "\t",
    id_maps: Optional[tuple[Sequence[str], Sequence[str]]] = None,
) -> Dataset:
    """Parse a delimited interaction log into a Dataset.

    One interaction per line: ``<user><sep><item>[<sep><timestamp>]``.
    Lines starting with ``#`` and blank lines are skipped. Duplicate (user,
    item) pairs collapse to one interaction keeping the earliest timestamp.
    Dense ids are assigned in first-seen order unless id_maps pins them.
    """
    path = Path(path)
    if id_maps is not None:
        user_ids = list(id_maps[0])
        item_ids = list(id_maps[1])
        user_index = {raw: k for k, raw in enumerate(user_ids)}
        item_index = {raw: k for k, raw in enumerate(item_ids)}
    else:
        user_ids, item_ids = [], []
        user_index, item_index = {}, {}

    order: list[tuple[int, int]] = []
    seen: dict[tuple[int, int], int] = {}
    stamps: list[int] = []
    any_ts = False

    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split(sep)
            if len(fields) < 2 or len(fields) > 3:
                raise DataError(f"{path}:{lineno}: expected 2 or 3 fields, got {len(fields)}")
            raw_u, raw_i = fields[0], fields[1]
            ts = TS_MISSING
            if len(fields) == 3:
                try:
                    ts = int(fields[2])
                except ValueError:
                    raise DataError(f"{path}:{lineno}: timestamp {fields[2]!r} is not an integer")
                any_ts = True

            if raw_u not in user_index:
                if id_maps is not None:
                    raise DataError(f"{path}:{lineno}: user {raw_u!r} not in the provided id map")
                user_index[raw_u] = len(user_ids)
                user_ids.append(raw_u)
            if raw_i not in item_index:
                if id_maps is not None:
                    raise DataError(f"{path}:{lineno}: item {raw_i!r} not in the provided id map")
                item_index[raw_i] = len(item_ids)
                item_ids.append(raw_i)

            key = (user_index[raw_u], item_index[raw_i])
            if key in seen:
                k = seen[key]
                old = stamps[k]
                if ts != TS_MISSING and (old == TS_MISSING or ts < old):
                    stamps[k] = ts
            else:
                seen[key] = len(order)
                order.append(key)
                stamps.append(ts)

    if not order:
        raise DataError(f"{path}: no interactions found")

    users = np.array([k[0] for k in order], dtype=np.int64)
    items = np.array([k[1] for k in order], dtype=np.int64)
    timestamps = np.array(stamps, dtype=np.int64) if any_ts else None
    return Dataset(users, items, timestamps, len(user_ids), len(item_ids), user_ids, item_ids)


def save_interactions(ds: Dataset, path, sep: str = "\t") -> None:
    """Write a Dataset back to the delimited text format using raw ids."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for k in range(len(ds)):
            row = [ds.user_ids[ds.users[k]], ds.item_ids[ds.items[k]]]
            if ds.timestamps is not None and ds.timestamps[k] != TS_MISSING:
                row.append(str(int(ds.timestamps[k])))
            fh.write(sep.join(row) + "\n")


def k_core_filter(ds: Dataset, k: int) -> Dataset:
    """Iteratively drop users/items with fewer than k interactions, to a fixpoint.

    Surviving ids are re-densified in first-seen order; the result is a
    k-core or an empty dataset.
    """
    if k < 1:
        raise ConfigError("k must be >= 1")
    keep = np.ones(len(ds), dtype=bool)
    while True:
        u_cnt = np.bincount(ds.users[keep], minlength=ds.num_users)
        i_cnt = np.bincount(ds.items[keep], minlength=ds.num_items)
        bad = (u_cnt[ds.users] < k) | (i_cnt[ds.items] < k)
        bad &= keep
        if not bad.any():
            break
        keep &= ~bad

    idx = np.flatnonzero(keep)
    users_old = ds.users[idx]
    items_old = ds.items[idx]
    u_order = _first_seen(users_old)
    i_order = _first_seen(items_old)
    u_remap = {old: new for new, old in enumerate(u_order)}
    i_remap = {old: new for new, old in enumerate(i_order)}
    users = np.array([u_remap[v] for v in users_old.tolist()], dtype=np.int64)
    items = np.array([i_remap[v] for v in items_old.tolist()], dtype=np.int64)
    ts = None if ds.timestamps is None else ds.timestamps[idx]
    return Dataset(
        users, items, ts, len(u_order), len(i_order),
        [ds.user_ids[v] for v in u_order], [ds.item_ids[v] for v in i_order],
    )


def _first_seen(values: np.ndarray) -> list[int]:
    seen: dict[int, None] = {}
    for v in values.tolist():
        seen.setdefault(v, None)
    return list(seen)


def split_random(
    ds: Dataset,
    balanced_frac: float = 0.15,
    train_frac: float = 0.60,
    val_frac: float = 0.10,
    test_frac: float = 0.15,
    seed: int = 0,
) -> DataSplit:
    """Random split: an item-balanced test slice, then a long-tail-preserving split.

    The balanced slice draws items with equal probability (uniform over
    non-exhausted items, then uniform over that item's remaining
    interactions). The remaining interactions are split uniformly at random
    with train/val/test fractions interpreted relative to the original total
    and renormalized over the remainder, so the members always partition the
    source exactly.
    """
    if not 0.0 <= balanced_frac < 1.0:
        raise ConfigError("balanced_frac must be in [0, 1)")
    for name, frac in (("train_frac", train_frac), ("val_frac", val_frac), ("test_frac", test_frac)):
        if not 0.0 < frac < 1.0:
            raise ConfigError(f"{name} must be in (0, 1)")
    if balanced_frac + train_frac + val_frac + test_frac > 1.0 + 1e-9:
        raise ConfigError("fractions sum above 1")

    rng = np.random.default_rng(seed)
    n = len(ds)
    n_bal = int(round(balanced_frac * n))

    taken = np.zeros(n, dtype=bool)
    bal_idx: list[int] = []
    if n_bal > 0:
        slots: list[list[int]] = [[] for _ in range(ds.num_items)]
        for pos, item in enumerate(ds.items.tolist()):
            slots[item].append(pos)
        active = [i for i in range(ds.num_items) if slots[i]]
        while len(bal_idx) < n_bal and active:
            a = int(rng.integers(len(active)))
            item = active[a]
            pool = slots[item]
            j = int(rng.integers(len(pool)))
            pool[j], pool[-1] = pool[-1], pool[j]
            pick = pool.pop()
            bal_idx.append(pick)
            taken[pick] = True
            if not pool:
                active[a], active[-1] = active[-1], active[a]
                active.pop()

    rem = np.flatnonzero(~taken)
    rem = rem[rng.permutation(len(rem))]
    total = train_frac + val_frac + test_frac
    n_tr = int(round(train_frac / total * len(rem)))
    n_val = int(round(val_frac / total * len(rem)))
    n_tr = min(n_tr, len(rem))
    n_val = min(n_val, len(rem) - n_tr)

    def member(idx) -> Dataset:
        return ds.subset(np.sort(np.asarray(idx, dtype=np.int64)))

    return DataSplit(
        train=member(rem[:n_tr]),
        validation=member(rem[n_tr:n_tr + n_val]),
        test_imbalanced=member(rem[n_tr + n_val:]),
        test_balanced=member(bal_idx) if n_bal > 0 else None,
    )


def split_temporal(ds: Dataset, ratios: tuple[float, float, float] = (7, 1, 2), seed: int = 0) -> DataSplit:
    """Chronological split into train/validation/test by the given ratios.

    Interactions are ordered by timestamp with ties broken by input order.
    """
    if ds.timestamps is None:
        raise ConfigError("temporal split requires timestamps, but the dataset has none")
    missing = np.flatnonzero(ds.timestamps == TS_MISSING)
    if len(missing):
        k = int(missing[0])
        raise ConfigError(
            "temporal split requires timestamps; interaction "
            f"({ds.user_ids[ds.users[k]]!r}, {ds.item_ids[ds.items[k]]!r}) has none"
        )
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ConfigError("ratios must be three positive numbers")

    order = np.argsort(ds.timestamps, kind="stable")
    n = len(ds)
    total = float(sum(ratios))
    n_tr = int(math.floor(ratios[0] / total * n))
    n_val = int(math.floor((ratios[0] + ratios[1]) / total * n)) - n_tr
    return DataSplit(
        train=ds.subset(order[:n_tr]),
        validation=ds.subset(order[n_tr:n_tr + n_val]),
        test_temporal=ds.subset(order[n_tr + n_val:]),
    )


def kl_divergence_uniform(item_pop: np.ndarray) -> float:
    """KL divergence (nats) of the empirical count distribution from uniform."""
    counts = np.asarray(item_pop, dtype=np.float64)
    if counts.ndim != 1 or len(counts) == 0:
        raise DataError("item_pop must be a nonempty vector")
    if (counts < 0).any():
        raise DataError("negative counts")
    total = counts.sum()
    if total <= 0:
        raise DataError("all counts are zero")
    p = counts / total
    nz = p > 0
    return float(np.sum(p[nz] * np.log(p[nz] * len(counts))))


def subgroup_partition(item_pop: np.ndarray) -> np.ndarray:
    """Label each item head/mid/tail by popularity thirds.

    Items are ordered by descending count, ties broken by ascending id; the
    first ceil(n/3) are head, the next ceil(n/3) mid, the rest tail.
    """
    pop = np.asarray(item_pop)
    n = len(pop)
    if n == 0:
        raise DataError("empty popularity vector")
    order = np.lexsort((np.arange(n), -pop))
    third = math.ceil(n / 3)
    labels = np.empty(n, dtype=np.int8)
    labels[order[:third]] = HEAD
    labels[order[third:2 * third]] = MID
    labels[order[2 * third:]] = TAIL
    return labels


def verify_partition(source: Dataset, split: DataSplit) -> None:
    """Raise unless the split members exactly partition the source interactions."""
    members = list(split.members().values())
    seen: set[tuple[int, int]] = set()
    total = 0
    for m in members:
        pairs = set(zip(m.users.tolist(), m.items.tolist()))
        if pairs & seen:
            raise DataError("split members overlap")
        seen |= pairs
        total += len(m)
    src = set(zip(source.users.tolist(), source.items.tolist()))
    if seen != src or total != len(source):
        raise DataError("split members do not cover the source exactly")


# ---------------------------------------------------------------------------
# split persistence
# ---------------------------------------------------------------------------

SPLIT_MANIFEST = "manifest.json"


def save_split(split: DataSplit, outdir, sep: str = "\t", extra: Optional[dict] = None) -> Path:
    """Write member files plus a manifest with counts and KL statistics."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    members = split.members()
    manifest = {
        "schema_version": 1,
        "sep": sep,
        "num_users": split.train.num_users,
        "num_items": split.train.num_items,
        "users": list(split.train.user_ids),
        "items": list(split.train.item_ids),
        "kl_log_base": "e",
        "members": {},
    }
    if extra:
        manifest.update(extra)
    for name, member in members.items():
        fname = f"{name}.txt"
        save_interactions(member, outdir / fname, sep=sep)
        kl = kl_divergence_uniform(member.item_pop) if len(member) else None
        manifest["members"][name] = {
            "file": fname,
            "interactions": len(member),
            "kl_uniform_items": kl,
        }
    with (outdir / SPLIT_MANIFEST).open("w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return outdir / SPLIT_MANIFEST


def load_split(indir) -> DataSplit:
    """Reload a saved split; all members share the manifest's id space."""
    indir = Path(indir)
    with (indir / SPLIT_MANIFEST).open("r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    maps = (manifest["users"], manifest["items"])
    sep = manifest.get("sep", "\t")
    kwargs = {}
    for name, entry in manifest["members"].items():
        if entry["interactions"] == 0:
            empty = np.empty(0, dtype=np.int64)
            kwargs[name] = Dataset(empty, empty, None, len(maps[0]), len(maps[1]), maps[0], maps[1])
        else:
            kwargs[name] = load_interactions(indir / entry["file"], sep=sep, id_maps=maps)
    return DataSplit(**kwargs)
