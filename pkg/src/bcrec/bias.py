"""Popularity bias extractor: popularity-keyed embeddings, bias angles, margins.

The extractor predicts interactions from popularity counts alone. The cosine
of its user/item popularity embeddings is the interaction's bias degree; its
angle feeds the bias-aware angular margin used by bc_loss.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import Dataset
from .encoders import MIN_NORM, EmbeddingTable
from .errors import ConfigError
from .losses import LossBatch, SparseGrads, softmax_family
from .serialize import read_blob, write_blob


@dataclass
class PopularityEmbeddings:
    """One vector per distinct popularity count seen in training, per side."""

    user_keys: np.ndarray  # sorted distinct user popularity counts
    user_vecs: np.ndarray
    item_keys: np.ndarray
    item_vecs: np.ndarray

    @property
    def d(self) -> int:
        return self.user_vecs.shape[1]

    def copy(self) -> "PopularityEmbeddings":
        return PopularityEmbeddings(self.user_keys.copy(), self.user_vecs.copy(),
                                    self.item_keys.copy(), self.item_vecs.copy())


def init_popularity_embeddings(train: Dataset, d: int, rng: np.random.Generator,
                               std: float = 0.1) -> PopularityEmbeddings:
    user_keys = np.unique(train.user_pop[train.user_pop > 0])
    item_keys = np.unique(train.item_pop[train.item_pop > 0])
    if len(user_keys) == 0 or len(item_keys) == 0:
        raise ValueError("training data has no interactions to key popularity embeddings")
    return PopularityEmbeddings(
        user_keys, rng.normal(0.0, std, size=(len(user_keys), d)),
        item_keys, rng.normal(0.0, std, size=(len(item_keys), d)),
    )


def nearest_key_rows(keys: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Row indices of the nearest seen popularity keys; ties go to the smaller key."""
    counts = np.asarray(counts, dtype=np.int64)
    pos = np.searchsorted(keys, counts)
    pos = np.clip(pos, 0, len(keys) - 1)
    left = np.clip(pos - 1, 0, len(keys) - 1)
    d_left = np.abs(counts - keys[left])
    d_right = np.abs(keys[pos] - counts)
    return np.where(d_left <= d_right, left, pos)


def bias_score(pe: PopularityEmbeddings, p_u: int, p_i: int) -> float:
    """Bias degree cos(xi) of the (p_u, p_i) popularity pair."""
    uv = pe.user_vecs[nearest_key_rows(pe.user_keys, np.array([p_u]))[0]]
    iv = pe.item_vecs[nearest_key_rows(pe.item_keys, np.array([p_i]))[0]]
    nu = float(np.linalg.norm(uv))
    ni = float(np.linalg.norm(iv))
    if nu < MIN_NORM or ni < MIN_NORM:
        raise ValueError("zero-norm popularity vector")
    return float(np.clip(float(uv @ iv) / (nu * ni), -1.0, 1.0))


def bias_angle(pe: PopularityEmbeddings, p_u: int, p_i: int) -> float:
    """Bias angle xi in [0, pi]."""
    return float(np.arccos(bias_score(pe, p_u, p_i)))


def bias_cosines(pe: PopularityEmbeddings, p_u: np.ndarray, p_i: np.ndarray) -> np.ndarray:
    """Vectorized bias degrees for paired popularity-count arrays."""
    uv = pe.user_vecs[nearest_key_rows(pe.user_keys, p_u)]
    iv = pe.item_vecs[nearest_key_rows(pe.item_keys, p_i)]
    nu = np.linalg.norm(uv, axis=1)
    ni = np.linalg.norm(iv, axis=1)
    if (nu < MIN_NORM).any() or (ni < MIN_NORM).any():
        raise ValueError("zero-norm popularity vector")
    return np.clip(np.einsum("bd,bd->b", uv, iv) / (nu * ni), -1.0, 1.0)


def margin(xi, theta, strength: float = 1.0):
    """Bias-aware angular margin min(strength * xi, pi - theta).

    Keeps theta + margin <= pi, where cos(theta + .) is still decreasing.
    Scalar or array arguments broadcast.
    """
    out = np.minimum(strength * np.asarray(xi, dtype=np.float64),
                     np.pi - np.asarray(theta, dtype=np.float64))
    out = np.maximum(out, 0.0)
    return float(out) if out.ndim == 0 else out


def extractor_batch_rows(pe: PopularityEmbeddings, batch: LossBatch,
                         user_pop: np.ndarray, item_pop: np.ndarray):
    """Popularity-row indices (user side, positive side, negative side) of a batch."""
    u_rows = nearest_key_rows(pe.user_keys, user_pop[batch.users])
    p_rows = nearest_key_rows(pe.item_keys, item_pop[batch.pos_items])
    n_rows = nearest_key_rows(pe.item_keys, item_pop[batch.neg_items])
    return u_rows, p_rows, n_rows


def extractor_loss(pe: PopularityEmbeddings, batch: LossBatch,
                   user_pop: np.ndarray, item_pop: np.ndarray, tau2: float):
    """Softmax loss of the popularity-only predictor over a batch.

    Returns (value, SparseGrads) where the ids index popularity-key rows
    (user_ids into user_keys rows, item_ids into item_keys rows).
    """
    if not tau2 > 0:
        raise ConfigError("tau2 must be > 0")
    u_rows, p_rows, n_rows = extractor_batch_rows(pe, batch, user_pop, item_pop)
    pop_table = EmbeddingTable(pe.user_vecs, pe.item_vecs)
    pop_batch = LossBatch(u_rows, p_rows, n_rows, batch.neg_counts)
    return softmax_family(pop_table, pop_batch, tau2, None, None)


def apply_pop_grads(pe: PopularityEmbeddings, grads: SparseGrads):
    """Interpret SparseGrads ids as popularity-row indices (helper for tests)."""
    return (grads.user_ids, grads.user_grads, grads.item_ids, grads.item_grads)


def bias_report_rows(pe: PopularityEmbeddings, train: Dataset,
                     theta: Optional[np.ndarray] = None, strength: float = 1.0):
    """Per-training-interaction rows (p_u, p_i, cos_xi, margin) for CSV export.

    theta: per-interaction positive angles from the CF model; without them the
    margin column reports the uncapped strength * xi.
    """
    p_u = train.user_pop[train.users]
    p_i = train.item_pop[train.items]
    cos_xi = bias_cosines(pe, p_u, p_i)
    xi = np.arccos(cos_xi)
    if theta is None:
        m = strength * xi
    else:
        m = margin(xi, theta, strength)
    return zip(p_u.tolist(), p_i.tolist(), cos_xi.tolist(), np.asarray(m).tolist())


def save_extractor(path, pe: PopularityEmbeddings, meta: Optional[dict] = None) -> None:
    write_blob(path, {"user_keys": pe.user_keys, "user_vecs": pe.user_vecs,
                      "item_keys": pe.item_keys, "item_vecs": pe.item_vecs}, meta or {})


def load_extractor(path) -> tuple[PopularityEmbeddings, dict]:
    arrays, meta = read_blob(path)
    pe = PopularityEmbeddings(arrays["user_keys"], arrays["user_vecs"],
                              arrays["item_keys"], arrays["item_vecs"])
    return pe, meta
