"""Rating-log ingestion, sparsity filtering, splitting and sampling."""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

TRAIN, VALID, TEST = 0, 1, 2
SPLIT_NAMES = ("train", "valid", "test")


class DatasetError(ValueError):
    pass


class ParseError(DatasetError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


class SamplingError(RuntimeError):
    pass


@dataclass
class RawRating:
    user_id: str
    item_id: str
    rating: float | None = None
    timestamp: int | None = None


def _split_fields(line: str) -> list[str]:
    sep = "\t" if "\t" in line else ","
    return [f.strip() for f in line.split(sep)]


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def read_ratings(path: str | os.PathLike, require_rating: bool = True) -> list[RawRating]:
    """Parse ``user,item,rating[,timestamp]`` records (comma or tab separated).

    A non-numeric first line is treated as a header and skipped.
    """
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            fields = _split_fields(line)
            if lineno == 1 and not records and _looks_like_header(fields):
                continue
            if len(fields) < 2 or (require_rating and len(fields) < 3) or len(fields) > 4:
                raise ParseError(lineno, f"expected user,item,rating[,timestamp], got {len(fields)} fields")
            user, item = fields[0], fields[1]
            if not user or not item:
                raise ParseError(lineno, "empty user or item id")
            rating = ts = None
            if len(fields) >= 3 and fields[2] != "":
                try:
                    rating = float(fields[2])
                except ValueError:
                    raise ParseError(lineno, f"bad rating {fields[2]!r}") from None
            elif require_rating:
                raise ParseError(lineno, "missing rating")
            if len(fields) == 4 and fields[3] != "":
                try:
                    ts = int(float(fields[3]))
                except ValueError:
                    raise ParseError(lineno, f"bad timestamp {fields[3]!r}") from None
            records.append(RawRating(user, item, rating, ts))
    return records


def _looks_like_header(fields: list[str]) -> bool:
    if len(fields) >= 3:
        return not _is_number(fields[2])
    return not any(_is_number(f) for f in fields)


def ingest_and_binarize(
    path: str | os.PathLike, threshold: float = 3.0, binarize: bool = True
) -> list[tuple[str, str]]:
    """Positive (user, item) pairs from a rating log.

    With ``binarize`` the last rating of each pair must exceed ``threshold``;
    otherwise every event counts as a positive. Pairs come back once each, in
    order of first appearance.
    """
    records = read_ratings(path, require_rating=binarize)
    last: dict[tuple[str, str], float | None] = {}
    for r in records:
        last[(r.user_id, r.item_id)] = r.rating
    if binarize:
        pairs = [k for k, rating in last.items() if rating > threshold]
    else:
        pairs = list(last)
    if not pairs:
        raise DatasetError(f"{path}: no positive interactions")
    return pairs


@dataclass
class InteractionStore:
    """Deduplicated positives with contiguous user/item indices.

    ``labels`` is ``None`` until :func:`split_interactions` assigns
    train/valid/test to every pair.
    """

    user_ids: list
    item_ids: list
    pairs: np.ndarray  # (P, 2) int64 internal (user, item)
    labels: np.ndarray | None = None
    seed: int | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    def split_pairs(self, split: int) -> np.ndarray:
        if self.labels is None:
            raise DatasetError("store has not been split")
        return self.pairs[self.labels == split]

    @property
    def train_pairs(self) -> np.ndarray:
        return self.split_pairs(TRAIN)

    def positive_keys(self, split: int | None = None) -> np.ndarray:
        """Sorted ``u * N + v`` keys for one split (or all positives)."""
        key = ("keys", split)
        if key not in self._cache:
            pairs = self.pairs if split is None else self.split_pairs(split)
            self._cache[key] = np.unique(pairs[:, 0] * self.n_items + pairs[:, 1])
        return self._cache[key]

    def positive_counts(self, split: int | None = None) -> np.ndarray:
        pairs = self.pairs if split is None else self.split_pairs(split)
        return np.bincount(pairs[:, 0], minlength=self.n_users)

    def items_of(self, u: int, split: int | None = None) -> np.ndarray:
        keys = self.positive_keys(split)
        lo, hi = np.searchsorted(keys, [u * self.n_items, (u + 1) * self.n_items])
        return keys[lo:hi] - u * self.n_items


def filter_sparse(
    pairs: list[tuple], min_user_pos: int = 5, min_item_users: int = 2
) -> InteractionStore:
    """Drop sparse users and items alternately until both thresholds hold."""
    if not pairs:
        raise DatasetError("empty pair list")
    kept = list(dict.fromkeys(pairs))
    while True:
        users: dict = {}
        for u, _ in kept:
            users[u] = users.get(u, 0) + 1
        after_users = [(u, i) for u, i in kept if users[u] >= min_user_pos]
        items: dict = {}
        for _, i in after_users:
            items[i] = items.get(i, 0) + 1
        after_items = [(u, i) for u, i in after_users if items[i] >= min_item_users]
        if len(after_items) == len(kept):
            break
        kept = after_items
    if not kept:
        raise DatasetError("all interactions removed by sparsity filtering")

    user_index: dict = {}
    item_index: dict = {}
    arr = np.empty((len(kept), 2), dtype=np.int64)
    for n, (u, i) in enumerate(kept):
        arr[n, 0] = user_index.setdefault(u, len(user_index))
        arr[n, 1] = item_index.setdefault(i, len(item_index))
    return InteractionStore(list(user_index), list(item_index), arr)


def split_counts(total: int, fractions=(0.7, 0.1, 0.2)) -> tuple[int, int, int]:
    n_train = int(round(total * fractions[0]))
    n_valid = int(round(total * fractions[1]))
    n_valid = min(n_valid, total - n_train)
    return n_train, n_valid, total - n_train - n_valid


def split_interactions(store: InteractionStore, fractions=(0.7, 0.1, 0.2), seed: int = 0) -> InteractionStore:
    """Random per-interaction train/valid/test labeling.

    A user left without a train positive gets their lowest-index held-out item
    moved to train; to keep the split sizes, a train interaction of a user with
    at least two train positives takes over the vacated label.
    """
    total = len(store.pairs)
    rng = np.random.default_rng(seed)
    order = rng.permutation(total)
    n_train, n_valid, _ = split_counts(total, fractions)
    labels = np.full(total, TEST, dtype=np.int8)
    labels[order[:n_train]] = TRAIN
    labels[order[n_train : n_train + n_valid]] = VALID

    users = store.pairs[:, 0]
    train_count = np.bincount(users[labels == TRAIN], minlength=store.n_users)
    orphans = np.flatnonzero((train_count == 0) & (np.bincount(users, minlength=store.n_users) > 0))
    if orphans.size:
        # donors are scanned from the end of the shuffle order
        donor_order = order[:n_train][::-1]
        d = 0
        for u in orphans:
            rows = np.flatnonzero(users == u)
            row = rows[np.argmin(store.pairs[rows, 1])]
            vacated = labels[row]
            labels[row] = TRAIN
            train_count[u] += 1
            while d < donor_order.size:
                cand = donor_order[d]
                d += 1
                cu = users[cand]
                if labels[cand] == TRAIN and train_count[cu] >= 2 and cu != u:
                    labels[cand] = vacated
                    train_count[cu] -= 1
                    break
    return InteractionStore(store.user_ids, store.item_ids, store.pairs, labels, seed)


class NeighborhoodIndex:
    """For every item, the ascending list of users with a train positive on it."""

    def __init__(self, n_items: int, train_pairs: np.ndarray):
        self.n_items = n_items
        order = np.lexsort((train_pairs[:, 0], train_pairs[:, 1]))
        items = train_pairs[order, 1]
        self._users = train_pairs[order, 0].copy()
        self._offsets = np.searchsorted(items, np.arange(n_items + 1))

    @classmethod
    def from_store(cls, store: InteractionStore) -> "NeighborhoodIndex":
        return cls(store.n_items, store.train_pairs)

    def raters(self, v: int) -> np.ndarray:
        return self._users[self._offsets[v] : self._offsets[v + 1]]

    def degree(self, v: int) -> int:
        return int(self._offsets[v + 1] - self._offsets[v])

    def contains(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        """Elementwise membership of (user, item) in the train index."""
        users = np.asarray(users)
        items = np.asarray(items)
        out = np.zeros(users.shape, dtype=bool)
        for idx in np.ndindex(users.shape):
            r = self.raters(int(items[idx]))
            j = np.searchsorted(r, users[idx])
            out[idx] = j < r.size and r[j] == users[idx]
        return out


def neighborhood_of(index: NeighborhoodIndex, v: int, exclude: int, cap: int = 50, seed=None) -> np.ndarray:
    """Train raters of ``v`` other than ``exclude``, subsampled to ``cap``.

    ``seed`` may be an int or a ``numpy.random.Generator``; the generator is
    only consumed when subsampling is needed.
    """
    raters = index.raters(v)
    j = np.searchsorted(raters, exclude)
    if j < raters.size and raters[j] == exclude:
        raters = np.delete(raters, j)
    if raters.size > cap:
        rng = np.random.default_rng(seed)
        raters = np.sort(raters[rng.choice(raters.size, cap, replace=False)])
    return raters


def neighborhood_batch(index: NeighborhoodIndex, users, items, cap: int = 50, rng=None):
    """Padded neighbor matrix ``(B, C)`` plus validity mask for a batch of pairs."""
    rng = np.random.default_rng(rng)
    lists = [neighborhood_of(index, int(v), int(u), cap, rng) for u, v in zip(users, items)]
    width = max((len(x) for x in lists), default=0)
    width = max(width, 1)
    nbr = np.zeros((len(lists), width), dtype=np.int64)
    valid = np.zeros((len(lists), width), dtype=bool)
    for row, x in enumerate(lists):
        nbr[row, : len(x)] = x
        valid[row, : len(x)] = True
    return nbr, valid


def sample_negative_items(store: InteractionStore, u, count: int, seed=None, split: int | None = TRAIN) -> np.ndarray:
    """``count`` uniform items per user, rejecting the user's positives.

    ``u`` may be a scalar (returns shape ``(count,)``) or an array of users
    (returns ``(len(u), count)``). Rejection uses the given split's positives
    (``None`` means every known positive).
    """
    rng = np.random.default_rng(seed)
    users = np.atleast_1d(np.asarray(u, dtype=np.int64))
    n = store.n_items
    keys = store.positive_keys(split)
    counts = np.bincount(keys // n, minlength=store.n_users) if keys.size else np.zeros(store.n_users, int)
    if (counts[users] >= n).any():
        bad = users[counts[users] >= n][0]
        raise SamplingError(f"user {bad} has positives covering the whole catalog")
    out = rng.integers(0, n, size=(users.size, count))
    uu = np.broadcast_to(users[:, None], out.shape)
    while True:
        flat_keys = uu * n + out
        pos = np.searchsorted(keys, flat_keys)
        pos = np.minimum(pos, max(keys.size - 1, 0))
        bad = keys[pos] == flat_keys if keys.size else np.zeros(out.shape, bool)
        if not bad.any():
            break
        out[bad] = rng.integers(0, n, size=int(bad.sum()))
    return out[0] if np.ndim(u) == 0 else out


def sample_negative_users(n_users: int, exclude, K: int, seed=None) -> np.ndarray:
    """``K`` users uniform over all users except ``exclude`` (scalar or array)."""
    if n_users < 2:
        raise SamplingError("need at least two users to sample negatives")
    rng = np.random.default_rng(seed)
    ex = np.atleast_1d(np.asarray(exclude, dtype=np.int64))
    out = rng.integers(0, n_users - 1, size=(ex.size, K))
    out += out >= ex[:, None]
    return out[0] if np.ndim(exclude) == 0 else out


def distinct_negatives(store: InteractionStore, u: int, count: int, rng) -> np.ndarray | None:
    """``count`` distinct items the user never interacted with, or ``None``."""
    known = store.items_of(u, None)
    if store.n_items - known.size < count:
        return None
    chosen: list = []
    seen = set(known.tolist())
    while len(chosen) < count:
        draw = rng.integers(0, store.n_items, size=2 * (count - len(chosen)))
        for v in draw.tolist():
            if v not in seen:
                seen.add(v)
                chosen.append(v)
                if len(chosen) == count:
                    break
    return np.asarray(chosen, dtype=np.int64)


# ---------------------------------------------------------------- prepared files


def write_prepared(store: InteractionStore, outdir: str | os.PathLike, extra: dict | None = None) -> None:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    for split, name in enumerate(SPLIT_NAMES):
        pairs = store.split_pairs(split)
        with open(out / f"{name}.tsv", "w", encoding="utf-8") as fh:
            fh.writelines(f"{u}\t{v}\n" for u, v in pairs.tolist())
    with open(out / "mapping.tsv", "w", encoding="utf-8") as fh:
        fh.write("kind\texternal\tinternal\n")
        fh.writelines(f"user\t{x}\t{i}\n" for i, x in enumerate(store.user_ids))
        fh.writelines(f"item\t{x}\t{i}\n" for i, x in enumerate(store.item_ids))
    meta = {
        "M": store.n_users,
        "N": store.n_items,
        "ratings": len(store.pairs),
        "train": int((store.labels == TRAIN).sum()),
        "valid": int((store.labels == VALID).sum()),
        "test": int((store.labels == TEST).sum()),
        "seed": store.seed,
    }
    meta.update(extra or {})
    with open(out / "meta.txt", "w", encoding="utf-8") as fh:
        fh.writelines(f"{k}={v}\n" for k, v in meta.items())


def read_meta(outdir: str | os.PathLike) -> dict:
    meta = {}
    with open(Path(outdir) / "meta.txt", encoding="utf-8") as fh:
        for line in fh:
            if "=" in line:
                k, v = line.rstrip("\n").split("=", 1)
                meta[k] = v
    return meta


def load_prepared(outdir: str | os.PathLike) -> InteractionStore:
    out = Path(outdir)
    meta = read_meta(out)
    user_ids: list = [None] * int(meta["M"])
    item_ids: list = [None] * int(meta["N"])
    with open(out / "mapping.tsv", encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            kind, ext, internal = line.rstrip("\n").split("\t")
            (user_ids if kind == "user" else item_ids)[int(internal)] = ext
    chunks, labels = [], []
    for split, name in enumerate(SPLIT_NAMES):
        arr = np.loadtxt(out / f"{name}.tsv", dtype=np.int64, delimiter="\t", ndmin=2).reshape(-1, 2)
        chunks.append(arr)
        labels.append(np.full(len(arr), split, dtype=np.int8))
    seed = meta.get("seed")
    return InteractionStore(
        user_ids,
        item_ids,
        np.concatenate(chunks),
        np.concatenate(labels),
        int(seed) if seed not in (None, "None") else None,
    )
