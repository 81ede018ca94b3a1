"""Sampled-negative ranking evaluation (HR@k / NDCG@k) and relevance heatmaps."""
from __future__ import annotations

import csv
import json
import math
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .dataio import TEST, TRAIN, InteractionStore, NeighborhoodIndex, distinct_negatives
from .model import ModelParams, heatmap_scores, predict

log = logging.getLogger(__name__)

N_NEGATIVES = 99


class LeakageError(AssertionError):
    pass


@dataclass
class TestCases:
    """One row per held-out positive; column 0 of ``candidates`` is the positive."""

    users: np.ndarray
    candidates: np.ndarray
    skipped: int = 0
    seed: int | None = None

    __test__ = False  # not a pytest class

    def __len__(self) -> int:
        return self.users.size

    @property
    def positives(self) -> np.ndarray:
        return self.candidates[:, 0]


def build_cases(
    store: InteractionStore, split: int = TEST, n_neg: int = N_NEGATIVES, seed: int = 0, limit: int | None = None
) -> TestCases:
    """Attach ``n_neg`` distinct negatives (never positives in any split) to
    every positive of ``split``. Users who cannot supply that many negatives
    are skipped and counted."""
    rng = np.random.default_rng(seed)
    pairs = store.split_pairs(split)
    if limit is not None and limit < len(pairs):
        pairs = pairs[np.sort(rng.choice(len(pairs), limit, replace=False))]
    users, rows, skipped = [], [], 0
    for u, v in pairs.tolist():
        neg = distinct_negatives(store, u, n_neg, rng)
        if neg is None:
            skipped += 1
            continue
        users.append(u)
        rows.append(np.concatenate([[v], neg]))
    if skipped:
        log.warning("skipped %d cases with fewer than %d available negatives", skipped, n_neg)
    cand = np.asarray(rows, dtype=np.int64).reshape(-1, n_neg + 1)
    return TestCases(np.asarray(users, dtype=np.int64), cand, skipped, seed)


def rank_of(scores, items, pos: int = 0) -> np.ndarray:
    """1-based rank of column ``pos`` in each row of ``scores``.

    Candidates scoring strictly higher rank above; equal scores are ordered by
    ascending item index.
    """
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    items = np.atleast_2d(np.asarray(items))
    s_pos = scores[:, pos : pos + 1]
    i_pos = items[:, pos : pos + 1]
    ahead = (scores > s_pos) | ((scores == s_pos) & (items < i_pos))
    return 1 + ahead.sum(axis=1)


def rank_test_case(scorer: Callable, user: int, candidates) -> int:
    """Rank of ``candidates[0]`` (the held-out positive) among all candidates."""
    candidates = np.asarray(candidates, dtype=np.int64)
    scores = scorer(np.full(candidates.size, user), candidates)
    return int(rank_of(scores, candidates)[0])


def metrics_at_k(ranks, k: int) -> tuple[float, float]:
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        raise ValueError("metrics_at_k: no ranks")
    hit = ranks <= k
    # correctly rounded sums make the result independent of case order
    gains = 1.0 / np.log2(ranks[hit] + 1.0)
    return int(hit.sum()) / ranks.size, math.fsum(gains.tolist()) / ranks.size


@dataclass
class EvalReport:
    hr: dict = field(default_factory=dict)
    ndcg: dict = field(default_factory=dict)
    n_cases: int = 0
    skipped: int = 0
    seed: int | None = None
    users: np.ndarray | None = None
    items: np.ndarray | None = None
    ranks: np.ndarray | None = None

    def flat(self) -> dict:
        out: dict = {}
        for k in sorted(self.hr):
            out[f"HR@{k}"] = self.hr[k]
        for k in sorted(self.ndcg):
            out[f"NDCG@{k}"] = self.ndcg[k]
        out.update(cases=self.n_cases, skipped=self.skipped, seed=self.seed)
        return out


def evaluate_cases(cases: TestCases, scorer: Callable, k_max: int = 10) -> EvalReport:
    """Score every candidate with ``scorer(users, items) -> scores`` and
    aggregate HR/NDCG for k = 1..k_max."""
    if len(cases) == 0:
        raise ValueError("no test cases")
    width = cases.candidates.shape[1]
    scores = scorer(np.repeat(cases.users, width), cases.candidates.reshape(-1))
    ranks = rank_of(np.asarray(scores).reshape(-1, width), cases.candidates)
    rep = EvalReport(n_cases=len(cases), skipped=cases.skipped, seed=cases.seed)
    for k in range(1, k_max + 1):
        rep.hr[k], rep.ndcg[k] = metrics_at_k(ranks, k)
    rep.users, rep.items, rep.ranks = cases.users, cases.positives, ranks
    return rep


def leakage_audit(store: InteractionStore) -> Callable:
    """Hook asserting every gathered neighbor holds a train positive on the item."""
    keys = store.positive_keys(TRAIN)
    n = store.n_items

    def check(users, items, nbr, valid):
        k = (nbr * n + np.asarray(items)[:, None])[valid]
        j = np.minimum(np.searchsorted(keys, k), keys.size - 1)
        if not (keys[j] == k).all():
            raise LeakageError("neighborhood contains a non-train interaction")
        if (nbr[valid] == np.repeat(np.asarray(users), valid.sum(axis=1))).any():
            raise LeakageError("target user appears in their own neighborhood")

    return check


def model_scorer(params: ModelParams, index: NeighborhoodIndex, mode: str, cap: int = 50, seed: int = 0, audit=None):
    """Scoring closure; each call reseeds so repeated evaluations agree."""

    def scorer(users, items):
        return predict(params, index, users, items, mode, cap, np.random.default_rng(seed), audit=audit)

    return scorer


def evaluate_model(
    params: ModelParams,
    store: InteractionStore,
    index: NeighborhoodIndex,
    mode: str = "full",
    cap: int = 50,
    seed: int = 0,
    split: int = TEST,
    k_max: int = 10,
    audit: bool = False,
) -> EvalReport:
    cases = build_cases(store, split, seed=seed)
    hook = leakage_audit(store) if audit else None
    return evaluate_cases(cases, model_scorer(params, index, mode, cap, seed, hook), k_max)


def write_report(report: EvalReport, outdir: str | os.PathLike, mapping: tuple[list, list] | None = None) -> None:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.json", "w", encoding="utf-8") as fh:
        json.dump(report.flat(), fh, indent=1)
        fh.write("\n")
    with open(out / "ranks.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user", "item", "rank"])
        for u, v, r in zip(report.users.tolist(), report.items.tolist(), report.ranks.tolist()):
            if mapping is not None:
                u, v = mapping[0][u], mapping[1][v]
            w.writerow([u, v, r])


def export_relevance_heatmap(
    params: ModelParams, index: NeighborhoodIndex, user: int, items, max_neighbors: int = 20
) -> list[list]:
    """Relevance-score table: header row of neighbor labels, then one row per
    item (label first). Items without neighbors get empty cells."""
    rows = []
    width = 0
    for v in items:
        _, beta = heatmap_scores(params, index, user, int(v), max_neighbors)
        rows.append([v] + beta.tolist())
        width = max(width, beta.size)
    header = ["item"] + [f"n{j}" for j in range(1, width + 1)]
    return [header] + [r + [""] * (width + 1 - len(r)) for r in rows]


def write_heatmap(table: list[list], path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in table:
            w.writerow([repr(x) if isinstance(x, float) else x for x in row])
