"""Training objectives with exact analytic gradients.

All losses operate on cosine scores of an EmbeddingTable and return
(value, SparseGrads): the loss summed over the batch plus gradients for
every touched embedding row. Softmax-family losses subtract the max logit
before exponentiation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .encoders import MIN_NORM, EmbeddingTable
from .errors import ConfigError

ANGLE_SLACK = 1e-9  # tolerated overshoot of theta + margin past pi


@dataclass
class LossBatch:
    """A minibatch of interactions with per-interaction negative item lists."""

    users: np.ndarray       # (B,)
    pos_items: np.ndarray   # (B,)
    neg_items: np.ndarray   # (B, Jmax), zero-padded
    neg_counts: np.ndarray  # (B,)

    def __len__(self) -> int:
        return len(self.users)

    @classmethod
    def from_lists(cls, interactions: Sequence[tuple[int, int]],
                   negatives: Sequence[Sequence[int]]) -> "LossBatch":
        if len(interactions) != len(negatives):
            raise ValueError("interactions and negatives differ in length")
        b = len(interactions)
        jmax = max((len(ns) for ns in negatives), default=0)
        users = np.array([u for u, _ in interactions], dtype=np.int64)
        pos = np.array([i for _, i in interactions], dtype=np.int64)
        neg = np.zeros((b, max(jmax, 1)), dtype=np.int64)
        cnt = np.zeros(b, dtype=np.int64)
        for r, ns in enumerate(negatives):
            cnt[r] = len(ns)
            neg[r, : len(ns)] = ns
        return cls(users, pos, neg, cnt)

    def check_negatives(self, user_positives: Sequence[frozenset[int]]) -> None:
        """Raise if any negative lies in its row's user training positives."""
        for r in range(len(self)):
            pos = user_positives[self.users[r]]
            for j in range(self.neg_counts[r]):
                if int(self.neg_items[r, j]) in pos:
                    raise ValueError(
                        f"negative item {int(self.neg_items[r, j])} is a positive of user {int(self.users[r])}"
                    )


@dataclass
class SparseGrads:
    """Gradients for the unique user rows and item rows touched by a batch."""

    user_ids: np.ndarray
    user_grads: np.ndarray
    item_ids: np.ndarray
    item_grads: np.ndarray

    @classmethod
    def empty(cls, d: int) -> "SparseGrads":
        z = np.zeros((0, d))
        ids = np.zeros(0, dtype=np.int64)
        return cls(ids, z, ids, z.copy())


def add_grads(a: SparseGrads, b: SparseGrads) -> SparseGrads:
    uid, ug = _merge(a.user_ids, a.user_grads, b.user_ids, b.user_grads)
    iid, ig = _merge(a.item_ids, a.item_grads, b.item_ids, b.item_grads)
    return SparseGrads(uid, ug, iid, ig)


def _merge(ids1, g1, ids2, g2):
    return _scatter(np.concatenate([ids1, ids2]), np.concatenate([g1, g2]))


def _scatter(ids: np.ndarray, grads: np.ndarray):
    """Accumulate per-slot gradients into unique rows (bincount per column)."""
    uniq, inv = np.unique(ids.reshape(-1), return_inverse=True)
    flat = grads.reshape(-1, grads.shape[-1])
    out = np.empty((len(uniq), flat.shape[1]))
    for k in range(flat.shape[1]):
        out[:, k] = np.bincount(inv, weights=flat[:, k], minlength=len(uniq))
    return uniq, out


def _check_tau(tau: float, name: str = "tau") -> None:
    if not tau > 0:
        raise ConfigError(f"{name} must be > 0")


def _gather(table: EmbeddingTable, batch: LossBatch):
    u = table.user_vecs[batch.users]
    p = table.item_vecs[batch.pos_items]
    n = table.item_vecs[batch.neg_items]
    mask = np.arange(batch.neg_items.shape[1])[None, :] < batch.neg_counts[:, None]
    min_sq = MIN_NORM * MIN_NORM
    if (np.einsum("bd,bd->b", u, u) < min_sq).any() or \
            (np.einsum("bd,bd->b", p, p) < min_sq).any() or \
            (np.einsum("bjd,bjd->bj", n, n)[mask] < min_sq).any():
        raise ValueError("zero-norm vector: degenerate embedding")
    return u, p, n


def softmax_family(table: EmbeddingTable, batch: LossBatch, tau: float,
                   margins: Optional[np.ndarray], weights: Optional[np.ndarray]):
    """Shared softmax/margin-softmax dispatch; returns (value, SparseGrads)."""
    if (batch.neg_counts < 1).any():
        raise ValueError("every interaction needs at least one negative")
    u, p, n = _gather(table, batch)
    b = len(batch)
    w = np.ones(b) if weights is None else np.asarray(weights, dtype=np.float64)
    m = np.zeros(b) if margins is None else np.asarray(margins, dtype=np.float64)
    if margins is not None:
        if (m < 0).any() or (m > np.pi + ANGLE_SLACK).any():
            raise ValueError("margins must lie in [0, pi]")
        un = u / np.linalg.norm(u, axis=1, keepdims=True)
        pn = p / np.linalg.norm(p, axis=1, keepdims=True)
        theta = np.arccos(np.clip(np.einsum("bd,bd->b", un, pn), -1.0, 1.0))
        if (theta + m > np.pi + ANGLE_SLACK).any():
            raise ValueError("margin pushes the positive angle past pi")

    loss, gu, gp, gn = kernels.margin_softmax(u, p, n, batch.neg_counts, m, w, tau)
    uid, ugr = _scatter(batch.users, gu)

    mask = np.arange(batch.neg_items.shape[1])[None, :] < batch.neg_counts[:, None]
    item_ids = np.concatenate([batch.pos_items, batch.neg_items[mask]])
    item_g = np.concatenate([gp, gn[mask]])
    iid, igr = _scatter(item_ids, item_g)
    return loss, SparseGrads(uid, ugr, iid, igr)


def softmax_loss(table: EmbeddingTable, batch: LossBatch, tau: float,
                 weights: Optional[np.ndarray] = None):
    """Sampled softmax over cosine logits divided by the temperature."""
    _check_tau(tau)
    return softmax_family(table, batch, tau, None, weights)


def bc_loss(table: EmbeddingTable, batch: LossBatch, margins: np.ndarray, tau: float,
            weights: Optional[np.ndarray] = None):
    """Margin softmax: the positive logit becomes cos(theta + margin) / tau.

    Margins are constants for the backward pass; the positive-pair gradient
    carries the angle chain factor sin(theta + margin)/sin(theta), guarded
    near |cos theta| = 1 where the arccos derivative diverges.
    """
    _check_tau(tau)
    return softmax_family(table, batch, tau, np.asarray(margins, dtype=np.float64), weights)


def bpr_loss(table: EmbeddingTable, batch: LossBatch,
             weights: Optional[np.ndarray] = None):
    """Pairwise -log sigmoid(pos - neg) on cosine scores; exactly one negative each."""
    if (batch.neg_counts != 1).any():
        raise ValueError("bpr_loss needs exactly one negative per interaction")
    u, p, n = _gather(table, batch)
    w = np.ones(len(batch)) if weights is None else np.asarray(weights, dtype=np.float64)
    loss, gu, gp, gn = kernels.bpr(u, p, n[:, 0, :], w)
    uid, ugr = _scatter(batch.users, gu)
    iid, igr = _scatter(np.concatenate([batch.pos_items, batch.neg_items[:, 0]]),
                        np.concatenate([gp, gn]))
    return loss, SparseGrads(uid, ugr, iid, igr)


def ips_cn_weights(item_pop: np.ndarray, batch_items: np.ndarray,
                   clip_max: Optional[float] = None) -> np.ndarray:
    """Inverse-popularity weights, clipped then normalized to batch mean 1.

    clip_max defaults to 10x the median raw weight of the batch.
    """
    pop = np.asarray(item_pop, dtype=np.float64)[np.asarray(batch_items, dtype=np.int64)]
    if (pop <= 0).any():
        raise ValueError("batch contains an item with zero training popularity")
    raw = 1.0 / pop
    if clip_max is None:
        clip_max = 10.0 * float(np.median(raw))
    if not clip_max > 0:
        raise ConfigError("clip_max must be > 0")
    clipped = np.minimum(raw, clip_max)
    return clipped / clipped.mean()


def l2_penalty(table: EmbeddingTable, user_rows: np.ndarray, item_rows: np.ndarray,
               coefficient: float):
    """coefficient * sum of squared norms over the touched (unique) rows."""
    if coefficient < 0:
        raise ConfigError("regularization coefficient must be >= 0")
    uid = np.unique(np.asarray(user_rows, dtype=np.int64))
    iid = np.unique(np.asarray(item_rows, dtype=np.int64))
    uv = table.user_vecs[uid]
    iv = table.item_vecs[iid]
    value = coefficient * (float(np.sum(uv * uv)) + float(np.sum(iv * iv)))
    return value, SparseGrads(uid, 2.0 * coefficient * uv, iid, 2.0 * coefficient * iv)
