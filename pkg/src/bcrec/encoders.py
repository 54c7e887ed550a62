"""User/item representations: embedding tables, cosine geometry, LightGCN propagation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .data import Dataset
from .errors import ConfigError
from .serialize import read_blob, write_blob

MIN_NORM = 1e-12


@dataclass
class EmbeddingTable:
    """Dense user and item parameter matrices sharing one dimension."""

    user_vecs: np.ndarray
    item_vecs: np.ndarray

    def __post_init__(self):
        if self.user_vecs.ndim != 2 or self.item_vecs.ndim != 2:
            raise ValueError("embedding matrices must be 2-D")
        if self.user_vecs.shape[1] != self.item_vecs.shape[1]:
            raise ValueError("user and item embedding dimensions differ")

    @property
    def d(self) -> int:
        return self.user_vecs.shape[1]

    @property
    def num_users(self) -> int:
        return self.user_vecs.shape[0]

    @property
    def num_items(self) -> int:
        return self.item_vecs.shape[0]

    def copy(self) -> "EmbeddingTable":
        return EmbeddingTable(self.user_vecs.copy(), self.item_vecs.copy())


def init_table(num_users: int, num_items: int, d: int, rng: np.random.Generator,
               std: float = 0.1) -> EmbeddingTable:
    """Fresh table with i.i.d. normal entries (diffuse initial cosines)."""
    if d < 1:
        raise ConfigError("embedding dimension must be >= 1")
    return EmbeddingTable(
        rng.normal(0.0, std, size=(num_users, d)),
        rng.normal(0.0, std, size=(num_items, d)),
    )


@dataclass(frozen=True)
class EncoderKind:
    variant: str  # "mf" or "lightgcn"
    layers: int = 0

    def __post_init__(self):
        if self.variant not in ("mf", "lightgcn"):
            raise ConfigError(f"unknown encoder variant {self.variant!r}")
        if self.layers < 0:
            raise ConfigError("layers must be >= 0")


MF = EncoderKind("mf")


def lightgcn(layers: int = 2) -> EncoderKind:
    return EncoderKind("lightgcn", layers)


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine of the angle between two vectors, clamped to [-1, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na < MIN_NORM or nb < MIN_NORM:
        raise ValueError("zero-norm vector: degenerate embedding")
    return float(np.clip(float(a @ b) / (na * nb), -1.0, 1.0))


def angle(a: np.ndarray, b: np.ndarray) -> float:
    """Angle between two vectors, in [0, pi]."""
    return float(np.arccos(cosine_similarity(a, b)))


class NormalizedAdjacency:
    """Symmetric-normalized bipartite adjacency over (num_users + num_items) nodes.

    Edge (u, i) carries 1/sqrt(deg(u) * deg(i)); no self-loops. Built from the
    training split only.
    """

    def __init__(self, mat: sp.csr_matrix, num_users: int, num_items: int, degrees: np.ndarray):
        self.mat = mat
        self.num_users = num_users
        self.num_items = num_items
        self.degrees = degrees

    @classmethod
    def from_dataset(cls, ds: Dataset) -> "NormalizedAdjacency":
        n = ds.num_users + ds.num_items
        deg = np.concatenate([ds.user_pop, ds.item_pop]).astype(np.float64)
        rows = ds.users
        cols = ds.items + ds.num_users
        vals = 1.0 / np.sqrt(deg[rows] * deg[cols])
        mat = sp.coo_matrix(
            (np.concatenate([vals, vals]),
             (np.concatenate([rows, cols]), np.concatenate([cols, rows]))),
            shape=(n, n),
        ).tocsr()
        return cls(mat, ds.num_users, ds.num_items, deg)


def lightgcn_propagate(table: EmbeddingTable, adj: NormalizedAdjacency, layers: int) -> EmbeddingTable:
    """Mean of the 0..layers propagated embeddings under the normalized adjacency."""
    if table.num_users != adj.num_users or table.num_items != adj.num_items:
        raise ValueError("embedding table and adjacency shapes do not match")
    e = np.vstack([table.user_vecs, table.item_vecs])
    acc = e.copy()
    cur = e
    for _ in range(layers):
        cur = adj.mat @ cur
        acc += cur
    acc /= layers + 1
    return EmbeddingTable(acc[: adj.num_users], acc[adj.num_users:])


def score(kind: EncoderKind, table: EmbeddingTable, adj: Optional[NormalizedAdjacency],
          u: int, i: int) -> float:
    """Cosine score of one user-item pair under the given encoder."""
    if not 0 <= u < table.num_users or not 0 <= i < table.num_items:
        raise ValueError(f"id out of range: user {u}, item {i}")
    if kind.variant == "lightgcn":
        if adj is None:
            raise ValueError("LightGCN scoring needs the normalized adjacency")
        table = lightgcn_propagate(table, adj, kind.layers)
    return cosine_similarity(table.user_vecs[u], table.item_vecs[i])


class Recommender:
    """Encoder bundle for evaluation: caches LightGCN propagation per pass."""

    def __init__(self, kind: EncoderKind, table: EmbeddingTable,
                 adj: Optional[NormalizedAdjacency] = None):
        if kind.variant == "lightgcn" and adj is None:
            raise ValueError("LightGCN needs the normalized adjacency")
        self.kind = kind
        self.table = table
        self.adj = adj
        self._prop: Optional[EmbeddingTable] = None

    def invalidate(self) -> None:
        self._prop = None

    def propagated(self) -> EmbeddingTable:
        if self.kind.variant == "mf":
            return self.table
        if self._prop is None:
            self._prop = lightgcn_propagate(self.table, self.adj, self.kind.layers)
        return self._prop

    def score(self, u: int, i: int) -> float:
        t = self.propagated()
        return cosine_similarity(t.user_vecs[u], t.item_vecs[i])

    def score_matrix(self, user_ids: np.ndarray) -> np.ndarray:
        """Cosine scores of the given users against the whole catalog."""
        t = self.propagated()
        uv = t.user_vecs[np.asarray(user_ids, dtype=np.int64)]
        un = np.linalg.norm(uv, axis=1)
        iv = t.item_vecs
        inn = np.linalg.norm(iv, axis=1)
        if (un < MIN_NORM).any() or (inn < MIN_NORM).any():
            raise ValueError("zero-norm vector: degenerate embedding")
        return np.clip((uv / un[:, None]) @ (iv / inn[:, None]).T, -1.0, 1.0)


def save_checkpoint(path, kind: EncoderKind, table: EmbeddingTable,
                    meta: Optional[dict] = None) -> None:
    """Binary checkpoint; deterministic bytes, matrices round-trip bit-exactly."""
    payload = {"variant": kind.variant, "layers": kind.layers, "meta": meta or {}}
    write_blob(path, {"user_vecs": table.user_vecs, "item_vecs": table.item_vecs}, payload)


def load_checkpoint(path) -> tuple[EncoderKind, EmbeddingTable, dict]:
    arrays, payload = read_blob(path)
    kind = EncoderKind(payload["variant"], payload["layers"])
    return kind, EmbeddingTable(arrays["user_vecs"], arrays["item_vecs"]), payload["meta"]
