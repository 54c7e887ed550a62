"""Geometric diagnostics: angle distributions, compactness/dispersion sums,
bias-degree correlations, and the user-by-item subgroup angle matrix."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .bias import PopularityEmbeddings, bias_cosines
from .data import SUBGROUP_NAMES, Dataset, subgroup_partition
from .encoders import MIN_NORM, EmbeddingTable, Recommender

DEFAULT_BIN_WIDTH = math.pi / 30
DEFAULT_PLOT_ITEMS = 500  # positives plus sampled negatives per inspected user


@dataclass
class AngleReport:
    user: int
    mean_positive_angle: float
    mean_negative_angle: Optional[float]
    bin_edges: np.ndarray
    positive_hist: np.ndarray
    negative_hist: np.ndarray
    num_positives: int
    num_negatives: int

    def to_dict(self) -> dict:
        return {
            "user": self.user,
            "mean_positive_angle": self.mean_positive_angle,
            "mean_negative_angle": self.mean_negative_angle,
            "bin_edges": self.bin_edges.tolist(),
            "positive_hist": self.positive_hist.tolist(),
            "negative_hist": self.negative_hist.tolist(),
            "num_positives": self.num_positives,
            "num_negatives": self.num_negatives,
        }


def _angles_to(user_vec: np.ndarray, item_vecs: np.ndarray) -> np.ndarray:
    nu = np.linalg.norm(user_vec)
    ni = np.linalg.norm(item_vecs, axis=1)
    if nu < MIN_NORM or (ni < MIN_NORM).any():
        raise ValueError("zero-norm vector: degenerate embedding")
    cos = np.clip(item_vecs @ user_vec / (nu * ni), -1.0, 1.0)
    return np.arccos(cos)


def angle_report(model: Recommender, user: int, positives: Sequence[int],
                 negatives: Sequence[int],
                 bin_width: float = DEFAULT_BIN_WIDTH) -> AngleReport:
    """Positive/negative angle statistics of one user's (propagated) representation."""
    if len(positives) == 0:
        raise ValueError("user needs at least one positive item")
    table = model.propagated()
    uv = table.user_vecs[user]
    pos_angles = _angles_to(uv, table.item_vecs[np.asarray(positives, dtype=np.int64)])
    neg = np.asarray(negatives, dtype=np.int64)
    neg_angles = _angles_to(uv, table.item_vecs[neg]) if len(neg) else np.zeros(0)

    nbins = max(1, math.ceil(math.pi / bin_width))
    edges = np.linspace(0.0, nbins * bin_width, nbins + 1)
    pos_hist, _ = np.histogram(pos_angles, bins=edges)
    neg_hist, _ = np.histogram(neg_angles, bins=edges)
    return AngleReport(
        user=user,
        mean_positive_angle=float(pos_angles.mean()),
        mean_negative_angle=float(neg_angles.mean()) if len(neg_angles) else None,
        bin_edges=edges,
        positive_hist=pos_hist,
        negative_hist=neg_hist,
        num_positives=len(pos_angles),
        num_negatives=len(neg_angles),
    )


def sample_plot_negatives(ds: Dataset, user: int, rng: np.random.Generator,
                          total_items: int = DEFAULT_PLOT_ITEMS) -> np.ndarray:
    """Uniform non-positive items so positives + negatives reach `total_items`."""
    positives = ds.user_positives[user]
    pool = np.array([i for i in range(ds.num_items) if i not in positives], dtype=np.int64)
    want = min(max(total_items - len(positives), 0), len(pool))
    if want == 0:
        return np.zeros(0, dtype=np.int64)
    return rng.choice(pool, size=want, replace=False)


@dataclass
class NegativeSampleSpec:
    per_user: int = 128
    seed: int = 0
    full_enumeration: bool = False


@dataclass
class GeometryReport:
    compactness_sum: float
    dispersion_sum: float          # negative of the summed pairwise squared distances
    mean_negative_sqdist: float
    compactness_entities: int      # users + items contributing
    negative_pairs: int
    excluded_users: int
    excluded_items: int
    normalized: bool = True
    sampling: dict = field(default_factory=dict)

    @property
    def compactness_per_entity(self) -> float:
        if self.compactness_entities == 0:
            return 0.0
        return self.compactness_sum / self.compactness_entities

    def to_dict(self) -> dict:
        return {
            "compactness_sum": self.compactness_sum,
            "compactness_per_entity": self.compactness_per_entity,
            "dispersion_sum": self.dispersion_sum,
            "mean_negative_sqdist": self.mean_negative_sqdist,
            "compactness_entities": self.compactness_entities,
            "negative_pairs": self.negative_pairs,
            "excluded_users": self.excluded_users,
            "excluded_items": self.excluded_items,
            "normalized": self.normalized,
            "sampling": self.sampling,
        }


def geometry_report(table: EmbeddingTable, train: Dataset,
                    spec: Optional[NegativeSampleSpec] = None) -> GeometryReport:
    """Compactness and dispersion sums over L2-normalized embedding copies.

    Compactness: squared distance of each user to the raw mean of its
    positive items' unit vectors, plus the symmetric item-side term; entities
    with no training positives are excluded and counted. Dispersion: minus
    the squared distances between each user and its sampled (or fully
    enumerated) non-interacted items.
    """
    spec = spec or NegativeSampleSpec()
    un = np.linalg.norm(table.user_vecs, axis=1)
    inn = np.linalg.norm(table.item_vecs, axis=1)
    if (un < MIN_NORM).any() or (inn < MIN_NORM).any():
        raise ValueError("zero-norm vector: degenerate embedding")
    u = table.user_vecs / un[:, None]
    v = table.item_vecs / inn[:, None]

    compact = 0.0
    entities = 0
    excluded_users = excluded_items = 0
    for uid in range(train.num_users):
        pos = train.user_positives[uid]
        if not pos:
            excluded_users += 1
            continue
        c = v[np.fromiter(pos, dtype=np.int64)].mean(axis=0)
        diff = u[uid] - c
        compact += float(diff @ diff)
        entities += 1
    for iid in range(train.num_items):
        pos = train.item_positives[iid]
        if not pos:
            excluded_items += 1
            continue
        c = u[np.fromiter(pos, dtype=np.int64)].mean(axis=0)
        diff = v[iid] - c
        compact += float(diff @ diff)
        entities += 1

    rng = np.random.default_rng(spec.seed)
    sq_sum = 0.0
    pairs = 0
    for uid in range(train.num_users):
        pos = train.user_positives[uid]
        if len(pos) >= train.num_items:
            continue
        if spec.full_enumeration:
            negs = np.array([i for i in range(train.num_items) if i not in pos], dtype=np.int64)
        else:
            pool = np.array([i for i in range(train.num_items) if i not in pos], dtype=np.int64)
            take = min(spec.per_user, len(pool))
            negs = rng.choice(pool, size=take, replace=False)
        if len(negs) == 0:
            continue
        diff = v[negs] - u[uid]
        sq_sum += float(np.sum(diff * diff))
        pairs += len(negs)

    return GeometryReport(
        compactness_sum=compact,
        dispersion_sum=-sq_sum,
        mean_negative_sqdist=sq_sum / pairs if pairs else 0.0,
        compactness_entities=entities,
        negative_pairs=pairs,
        excluded_users=excluded_users,
        excluded_items=excluded_items,
        sampling={"per_user": spec.per_user, "seed": spec.seed,
                  "full_enumeration": spec.full_enumeration},
    )


def pearson(x: np.ndarray, y: np.ndarray) -> Optional[float]:
    """Pearson correlation, or None when either series is constant."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) < 2 or np.all(x == x[0]) or np.all(y == y[0]):
        return None
    xc = x - x.mean()
    yc = y - y.mean()
    return float(np.sum(xc * yc) / math.sqrt(np.sum(xc * xc) * np.sum(yc * yc)))


@dataclass
class BiasCorrelation:
    pearson_user: Optional[float]
    pearson_item: Optional[float]
    item_popularity: np.ndarray
    item_mean_cos: np.ndarray
    user_popularity: np.ndarray
    user_mean_cos: np.ndarray
    log_popularity: bool = False

    def to_dict(self) -> dict:
        return {
            "pearson_user": self.pearson_user,
            "pearson_item": self.pearson_item,
            "log_popularity": self.log_popularity,
        }


def bias_correlation(pe: PopularityEmbeddings, ds: Dataset,
                     log_popularity: bool = False) -> BiasCorrelation:
    """Correlate per-entity mean bias degree cos(xi) with popularity.

    Bias degrees are computed per training interaction and averaged per item
    (and per user); popularity is the raw count, or its log when requested.
    """
    if len(ds) == 0:
        raise ValueError("empty dataset")
    cos_xi = bias_cosines(pe, ds.user_pop[ds.users], ds.item_pop[ds.items])

    def grouped(ids, count):
        sums = np.zeros(count)
        cnts = np.zeros(count)
        np.add.at(sums, ids, cos_xi)
        np.add.at(cnts, ids, 1.0)
        present = cnts > 0
        return present, sums[present] / cnts[present]

    item_present, item_mean = grouped(ds.items, ds.num_items)
    user_present, user_mean = grouped(ds.users, ds.num_users)
    item_pop = ds.item_pop[item_present].astype(np.float64)
    user_pop = ds.user_pop[user_present].astype(np.float64)
    if log_popularity:
        item_x = np.log(item_pop)
        user_x = np.log(user_pop)
    else:
        item_x = item_pop
        user_x = user_pop
    return BiasCorrelation(
        pearson_user=pearson(user_x, user_mean),
        pearson_item=pearson(item_x, item_mean),
        item_popularity=item_pop,
        item_mean_cos=item_mean,
        user_popularity=user_pop,
        user_mean_cos=user_mean,
        log_popularity=log_popularity,
    )


def subgroup_angle_matrix(pe: PopularityEmbeddings, ds: Dataset) -> dict:
    """Mean and std of the bias angle xi per (user subgroup x item subgroup) cell.

    Subgroups come from popularity thirds of users and items; empty cells are
    None. Returns {"mean": 3x3 list, "std": 3x3 list, "count": 3x3 list}.
    """
    if len(ds) == 0:
        raise ValueError("empty dataset")
    user_groups = subgroup_partition(ds.user_pop)
    item_groups = subgroup_partition(ds.item_pop)
    xi = np.arccos(bias_cosines(pe, ds.user_pop[ds.users], ds.item_pop[ds.items]))
    gu = user_groups[ds.users]
    gi = item_groups[ds.items]

    mean = [[None] * 3 for _ in range(3)]
    std = [[None] * 3 for _ in range(3)]
    count = [[0] * 3 for _ in range(3)]
    for a in range(3):
        for b in range(3):
            sel = xi[(gu == a) & (gi == b)]
            count[a][b] = int(len(sel))
            if len(sel):
                mean[a][b] = float(sel.mean())
                std[a][b] = float(sel.std())
    return {"mean": mean, "std": std, "count": count,
            "user_groups": list(SUBGROUP_NAMES), "item_groups": list(SUBGROUP_NAMES)}
