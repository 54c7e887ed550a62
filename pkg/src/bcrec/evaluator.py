"""All-ranking top-K evaluation: HR/Recall/NDCG overall and per popularity subgroup."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import SUBGROUP_NAMES, Dataset
from .encoders import Recommender


@dataclass
class MetricBlock:
    recall: float
    ndcg: float
    hr: float
    users: int


@dataclass
class EvalReport:
    k: int
    overall: Optional[MetricBlock]
    subgroups: dict[str, Optional[MetricBlock]] = field(default_factory=dict)
    interactions: int = 0
    subgroup_interactions: dict[str, int] = field(default_factory=dict)
    timestamp: str = ""

    def to_dict(self) -> dict:
        def block(b):
            return None if b is None else {"recall": b.recall, "ndcg": b.ndcg, "hr": b.hr, "users": b.users}

        return {
            "schema_version": 1,
            "k": self.k,
            "overall": block(self.overall),
            "subgroups": {name: block(b) for name, b in self.subgroups.items()},
            "interactions": self.interactions,
            "subgroup_interactions": self.subgroup_interactions,
            "timestamp": self.timestamp,
        }

    def csv_rows(self, member: str = "") -> list[dict]:
        rows = []
        scopes = [("overall", self.overall)] + list(self.subgroups.items())
        for scope, b in scopes:
            if b is None:
                continue
            for metric, value in (("recall", b.recall), ("ndcg", b.ndcg), ("hr", b.hr)):
                rows.append({"member": member, "subgroup": scope, "metric": f"{metric}@{self.k}",
                             "value": value, "users": b.users})
        return rows


def rank_topk(model: Recommender, user: int, k: int,
              exclude: Optional[set[int]] = None) -> np.ndarray:
    """Top-k catalog items for one user by descending score, ties by ascending id.

    Excluded items are removed before ranking; if fewer than k remain, all
    remaining items are returned.
    """
    scores = model.score_matrix(np.array([user]))[0]
    return topk_from_scores(scores, k, exclude)


def topk_from_scores(scores: np.ndarray, k: int,
                     exclude: Optional[set[int]] = None) -> np.ndarray:
    n = len(scores)
    if exclude:
        scores = scores.copy()
        scores[list(exclude)] = -np.inf
        avail = n - len(exclude)
    else:
        avail = n
    order = np.lexsort((np.arange(n), -scores))
    return order[: min(k, avail)]


def recall_at_k(ranked: Sequence[int], relevant: set[int]) -> float:
    """Fraction of the relevant items that appear in the ranked list."""
    if not relevant:
        raise ValueError("relevant set is empty")
    hits = sum(1 for i in ranked if i in relevant)
    return hits / len(relevant)


def ndcg_at_k(ranked: Sequence[int], relevant: set[int], k: Optional[int] = None) -> float:
    """Binary-relevance NDCG with 1/log2(p+1) discount, IDCG truncated at min(k, |relevant|)."""
    if not relevant:
        raise ValueError("relevant set is empty")
    if k is None:
        k = len(ranked)
    dcg = sum(1.0 / math.log2(p + 2) for p, i in enumerate(ranked) if i in relevant)
    ideal = min(k, len(relevant))
    idcg = sum(1.0 / math.log2(p + 2) for p in range(ideal))
    return dcg / idcg


def hr_at_k(ranked: Sequence[int], relevant: set[int]) -> float:
    """1.0 if any relevant item appears in the ranked list, else 0.0."""
    if not relevant:
        raise ValueError("relevant set is empty")
    return 1.0 if any(i in relevant for i in ranked) else 0.0


def evaluate(model: Recommender, member: Dataset, train: Optional[Dataset] = None,
             subgroups: Optional[np.ndarray] = None, k: int = 20,
             user_chunk: int = 256) -> EvalReport:
    """All-ranking evaluation of one split member.

    Rankings exclude each user's training positives. Overall metrics average
    over users with at least one positive in the member; subgroup metrics
    restrict each user's relevant set to that subgroup's items (the ranking
    itself is unchanged) and skip users with no positives there.
    """
    if len(member) == 0:
        raise ValueError("empty split member")
    eval_users = np.flatnonzero(member.user_pop > 0)

    sums = {"recall": 0.0, "ndcg": 0.0, "hr": 0.0}
    count = 0
    sub_sums = {name: {"recall": 0.0, "ndcg": 0.0, "hr": 0.0} for name in SUBGROUP_NAMES}
    sub_counts = {name: 0 for name in SUBGROUP_NAMES}

    for start in range(0, len(eval_users), user_chunk):
        chunk = eval_users[start:start + user_chunk]
        scores = model.score_matrix(chunk)
        for row, u in enumerate(chunk.tolist()):
            exclude = train.user_positives[u] if train is not None else None
            ranked = topk_from_scores(scores[row], k, exclude)
            relevant = member.user_positives[u]
            sums["recall"] += recall_at_k(ranked, relevant)
            sums["ndcg"] += ndcg_at_k(ranked, relevant, k)
            sums["hr"] += hr_at_k(ranked, relevant)
            count += 1
            if subgroups is not None:
                for gi, name in enumerate(SUBGROUP_NAMES):
                    rel_g = {i for i in relevant if subgroups[i] == gi}
                    if not rel_g:
                        continue
                    sub_sums[name]["recall"] += recall_at_k(ranked, rel_g)
                    sub_sums[name]["ndcg"] += ndcg_at_k(ranked, rel_g, k)
                    sub_sums[name]["hr"] += hr_at_k(ranked, rel_g)
                    sub_counts[name] += 1

    def block(s, c):
        if c == 0:
            return None
        return MetricBlock(s["recall"] / c, s["ndcg"] / c, s["hr"] / c, c)

    report = EvalReport(
        k=k,
        overall=block(sums, count),
        interactions=len(member),
        timestamp=datetime.now(timezone.utc).isoformat(),
    )
    if subgroups is not None:
        report.subgroups = {name: block(sub_sums[name], sub_counts[name]) for name in SUBGROUP_NAMES}
        items = member.items
        report.subgroup_interactions = {
            name: int(np.sum(subgroups[items] == gi)) for gi, name in enumerate(SUBGROUP_NAMES)
        }
    return report


def overall_recall(model: Recommender, member: Dataset, train: Optional[Dataset],
                   k: int = 20) -> float:
    """Recall@k averaged over users with positives in the member (early-stop metric)."""
    report = evaluate(model, member, train, subgroups=None, k=k)
    return 0.0 if report.overall is None else report.overall.recall


def save_report(report: EvalReport, outdir, member: str = "") -> None:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    with (outdir / "report.json").open("w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    with (outdir / "report.csv").open("w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["member", "subgroup", "metric", "value", "users"])
        writer.writeheader()
        for row in report.csv_rows(member):
            writer.writerow(row)
