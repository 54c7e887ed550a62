"""Mini-batch training: negative sampling, sparse Adam, joint bias-aware optimization.

The reference mode is single-threaded and bit-deterministic under a fixed
seed. Early stopping tracks validation Recall@K and restores the best
checkpoint.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import kernels
from .bias import (PopularityEmbeddings, bias_cosines, extractor_batch_rows,
                   extractor_loss, init_popularity_embeddings, margin)
from .data import Dataset, DataSplit
from .encoders import (EmbeddingTable, EncoderKind, NormalizedAdjacency,
                       Recommender, init_table, lightgcn_propagate)
from .errors import ConfigError
from .evaluator import evaluate
from .losses import (LossBatch, SparseGrads, add_grads, bc_loss, bpr_loss,
                     ips_cn_weights, l2_penalty, softmax_loss)

LOSS_KINDS = ("softmax", "bc", "bpr", "ips-cn-bpr", "ips-cn-softmax")


@dataclass
class TrainConfig:
    loss: str = "softmax"
    lr: float = 1e-3
    batch_size: int = 2048
    d: int = 64
    reg: float = 1e-5
    tau1: float = 0.1
    tau2: float = 0.1
    num_negatives: Optional[int] = None  # None: 128 sampled, or 1 for bpr-family
    neg_mode: Optional[str] = None       # sampled | in_batch; None: by encoder kind
    patience: int = 10
    max_epochs: int = 1000
    seed: int = 0
    margin_strength: float = 1.0
    schedule: str = "joint"              # joint | two_phase
    eval_k: int = 20
    ips_clip_max: Optional[float] = None
    reg_extractor: bool = True
    cached_propagation: bool = False
    init_std: float = 0.1

    def validate(self) -> None:
        if self.loss not in LOSS_KINDS:
            raise ConfigError(f"unknown loss {self.loss!r}; choose from {LOSS_KINDS}")
        if self.schedule not in ("joint", "two_phase"):
            raise ConfigError("schedule must be joint or two_phase")
        if self.neg_mode not in (None, "sampled", "in_batch"):
            raise ConfigError("neg_mode must be sampled or in_batch")
        for name in ("lr", "tau1", "tau2", "margin_strength", "init_std"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")
        for name in ("batch_size", "d", "patience", "max_epochs", "eval_k"):
            if not getattr(self, name) >= 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.reg < 0:
            raise ConfigError("reg must be >= 0")
        if self.num_negatives is not None and self.num_negatives < 1:
            raise ConfigError("num_negatives must be >= 1")

    def resolved(self, kind: EncoderKind) -> "TrainConfig":
        """Fill encoder-dependent defaults (negative mode and count)."""
        cfg = replace(self)
        if cfg.neg_mode is None:
            cfg.neg_mode = "in_batch" if kind.variant == "lightgcn" else "sampled"
        if cfg.loss in ("bpr", "ips-cn-bpr"):
            if cfg.neg_mode == "in_batch":
                raise ConfigError("bpr-family losses need exactly one sampled negative")
            if cfg.num_negatives is None:
                cfg.num_negatives = 1
            elif cfg.num_negatives != 1:
                raise ConfigError("bpr-family losses need exactly one negative")
        elif cfg.num_negatives is None and cfg.neg_mode == "sampled":
            cfg.num_negatives = 128
        return cfg


class AdamState:
    """First/second-moment accumulators per parameter matrix plus a step counter."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.slots: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def ensure(self, name: str, shape) -> tuple[np.ndarray, np.ndarray]:
        if name not in self.slots:
            self.slots[name] = (np.zeros(shape), np.zeros(shape))
        return self.slots[name]


def adam_step(params: dict[str, np.ndarray],
              grads: dict[str, tuple[np.ndarray, np.ndarray]],
              state: AdamState, lr: float) -> None:
    """One bias-corrected Adam step applied sparsely to the touched rows."""
    state.t += 1
    for name, (rows, g) in grads.items():
        if len(rows) == 0:
            continue
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name!r} at step {state.t}")
        m, v = state.ensure(name, params[name].shape)
        kernels.adam_rows(params[name], m, v,
                          np.ascontiguousarray(rows, dtype=np.int64),
                          np.ascontiguousarray(g), lr,
                          state.beta1, state.beta2, state.eps, state.t)


def sample_negatives(positives: frozenset[int], num_items: int, n: int,
                     rng: np.random.Generator) -> np.ndarray:
    """n uniform catalog draws with rejection of the user's training positives."""
    if len(positives) >= num_items:
        raise ValueError("user has interacted with the entire catalog")
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    out = rng.integers(0, num_items, size=n)
    while True:
        bad = np.array([k for k, c in enumerate(out.tolist()) if c in positives], dtype=np.int64)
        if len(bad) == 0:
            return out
        out[bad] = rng.integers(0, num_items, size=len(bad))


def in_batch_negatives(users: np.ndarray, pos_items: np.ndarray,
                       user_positives: Sequence[frozenset[int]]) -> list[list[int]]:
    """Other rows' positive items as negatives, minus each user's own positives.

    Rows may come back empty; callers skip those rows for the loss.
    """
    b = len(users)
    if b < 2:
        raise ValueError("in-batch negatives need a batch of at least 2")
    items = [int(i) for i in pos_items]
    out = []
    for r in range(b):
        own = user_positives[int(users[r])]
        out.append([items[q] for q in range(b) if q != r and items[q] not in own])
    return out


class EarlyStopper:
    """Stop when the metric has not strictly improved for `patience` epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -np.inf
        self.best_epoch = 0
        self.bad = 0

    def update(self, epoch: int, metric: float) -> bool:
        if metric > self.best:
            self.best = metric
            self.best_epoch = epoch
            self.bad = 0
            return True
        self.bad += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad >= self.patience


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    val_recall: list[float] = field(default_factory=list)
    val_ndcg: list[Optional[float]] = field(default_factory=list)
    extractor_loss: list[Optional[float]] = field(default_factory=list)
    best_epoch: int = 0
    stop_reason: str = ""
    wall_time: float = 0.0

    @property
    def epochs(self) -> int:
        return len(self.train_loss)


def _pair_codes(ds: Dataset) -> np.ndarray:
    """Training pairs encoded as u * num_items + i, sorted for membership tests."""
    return np.sort(ds.users * ds.num_items + ds.items)


def _sample_matrix(pair_codes, user_pop, users, n, num_items, rng) -> np.ndarray:
    """Batched with-replacement rejection sampling of negatives, row per interaction."""
    if (user_pop[users] >= num_items).any():
        raise ValueError("user has interacted with the entire catalog")
    neg = rng.integers(0, num_items, size=(len(users), n))
    base = users.astype(np.int64) * num_items
    while True:
        bad = np.isin(base[:, None] + neg, pair_codes)
        nbad = int(bad.sum())
        if nbad == 0:
            return neg
        neg[bad] = rng.integers(0, num_items, size=nbad)


def _backprop_propagation(grads: SparseGrads, adj: NormalizedAdjacency,
                          layers: int) -> SparseGrads:
    """Pull gradients on propagated embeddings back to the base table.

    The propagation operator (mean of adjacency powers) is symmetric, so the
    backward pass is the same propagation applied to the gradient matrix.
    """
    nu = adj.num_users
    gu = np.zeros((nu, grads.user_grads.shape[1]))
    gi = np.zeros((adj.num_items, grads.user_grads.shape[1]))
    gu[grads.user_ids] = grads.user_grads
    gi[grads.item_ids] = grads.item_grads
    back = lightgcn_propagate(EmbeddingTable(gu, gi), adj, layers)
    urows = np.flatnonzero(np.any(back.user_vecs != 0, axis=1))
    irows = np.flatnonzero(np.any(back.item_vecs != 0, axis=1))
    return SparseGrads(urows, back.user_vecs[urows], irows, back.item_vecs[irows])


def _positive_cosines(table: EmbeddingTable, users: np.ndarray, items: np.ndarray) -> np.ndarray:
    u = table.user_vecs[users]
    p = table.item_vecs[items]
    nu = np.linalg.norm(u, axis=1)
    npn = np.linalg.norm(p, axis=1)
    return np.clip(np.einsum("bd,bd->b", u, p) / (nu * npn), -1.0, 1.0)


def train(split: DataSplit, kind: EncoderKind, config: TrainConfig,
          val_metric_fn: Optional[Callable[[int, Recommender], float]] = None,
          epoch_hook: Optional[Callable[[int, EmbeddingTable], None]] = None,
          ) -> tuple[EmbeddingTable, Optional[PopularityEmbeddings], TrainReport]:
    """Train the encoder on split.train with the configured loss.

    Per epoch: shuffled mini-batches (negatives sampled or in-batch), the
    configured loss plus L2, one Adam step per batch; then Recall@eval_k on
    the validation member. Training stops when the metric has not improved
    for `patience` epochs or at max_epochs, and the best checkpoint is
    restored. val_metric_fn replaces the built-in validation metric (tests);
    epoch_hook observes the live table after each epoch.
    """
    config.validate()
    cfg = config.resolved(kind)
    train_ds = split.train
    if len(train_ds) == 0:
        raise ConfigError("training split is empty")

    rng = np.random.default_rng(cfg.seed)
    t0 = time.perf_counter()
    table = init_table(train_ds.num_users, train_ds.num_items, cfg.d, rng, cfg.init_std)

    pe: Optional[PopularityEmbeddings] = None
    pe_frozen = False
    report = TrainReport()
    if cfg.loss == "bc":
        if cfg.schedule == "two_phase":
            pe, _ = train_extractor(split, cfg)
            pe_frozen = True
        else:
            pe = init_popularity_embeddings(train_ds, cfg.d, rng, cfg.init_std)

    adj = NormalizedAdjacency.from_dataset(train_ds) if kind.variant == "lightgcn" else None
    pair_codes = _pair_codes(train_ds)
    adam = AdamState()
    params = {"user": table.user_vecs, "item": table.item_vecs}
    if pe is not None and not pe_frozen:
        params["pop_user"] = pe.user_vecs
        params["pop_item"] = pe.item_vecs

    best: tuple[EmbeddingTable, Optional[PopularityEmbeddings]] = (
        table.copy(), pe.copy() if pe is not None else None)
    stopper = EarlyStopper(cfg.patience)
    stop_reason = "max_epochs"
    n = len(train_ds)
    if epoch_hook is not None:
        epoch_hook(0, table)  # observe the initialization

    for epoch in range(1, cfg.max_epochs + 1):
        perm = rng.permutation(n)
        epoch_loss = 0.0
        epoch_ex_loss = 0.0
        diverged = False
        cached = (lightgcn_propagate(table, adj, kind.layers)
                  if adj is not None and cfg.cached_propagation else None)

        for start in range(0, n, cfg.batch_size):
            rows = perm[start:start + cfg.batch_size]
            users = train_ds.users[rows]
            pos = train_ds.items[rows]

            if cfg.neg_mode == "in_batch":
                if len(rows) < 2:
                    continue
                neg_lists = in_batch_negatives(users, pos, train_ds.user_positives)
                keep = [r for r, ns in enumerate(neg_lists) if ns]
                if not keep:
                    continue
                users = users[keep]
                pos = pos[keep]
                batch = LossBatch.from_lists(list(zip(users.tolist(), pos.tolist())),
                                             [neg_lists[r] for r in keep])
            else:
                neg = _sample_matrix(pair_codes, train_ds.user_pop, users,
                                     cfg.num_negatives, train_ds.num_items, rng)
                batch = LossBatch(users, pos,
                                  neg, np.full(len(users), cfg.num_negatives, dtype=np.int64))

            fwd = table
            if adj is not None:
                fwd = cached if cached is not None else lightgcn_propagate(table, adj, kind.layers)

            ex_grads: Optional[SparseGrads] = None
            try:
                if cfg.loss == "softmax":
                    value, grads = softmax_loss(fwd, batch, cfg.tau1)
                elif cfg.loss == "bpr":
                    value, grads = bpr_loss(fwd, batch)
                elif cfg.loss == "ips-cn-softmax":
                    w = ips_cn_weights(train_ds.item_pop, batch.pos_items, cfg.ips_clip_max)
                    value, grads = softmax_loss(fwd, batch, cfg.tau1, weights=w)
                elif cfg.loss == "ips-cn-bpr":
                    w = ips_cn_weights(train_ds.item_pop, batch.pos_items, cfg.ips_clip_max)
                    value, grads = bpr_loss(fwd, batch, weights=w)
                else:  # bc
                    theta = np.arccos(_positive_cosines(fwd, batch.users, batch.pos_items))
                    xi = np.arccos(bias_cosines(pe, train_ds.user_pop[batch.users],
                                                train_ds.item_pop[batch.pos_items]))
                    margins = margin(xi, theta, cfg.margin_strength)
                    value, grads = bc_loss(fwd, batch, margins, cfg.tau1)
                    if not pe_frozen:
                        ex_value, ex_grads = extractor_loss(
                            pe, batch, train_ds.user_pop, train_ds.item_pop, cfg.tau2)
                        epoch_ex_loss += ex_value

                if adj is not None:
                    grads = _backprop_propagation(grads, adj, kind.layers)
                if cfg.reg > 0:
                    reg_val, reg_grads = l2_penalty(
                        table, batch.users,
                        np.concatenate([batch.pos_items,
                                        batch.neg_items[np.arange(batch.neg_items.shape[1])[None, :]
                                                        < batch.neg_counts[:, None]]]),
                        cfg.reg)
                    grads = add_grads(grads, reg_grads)
                    value += reg_val

                step_grads = {"user": (grads.user_ids, grads.user_grads),
                              "item": (grads.item_ids, grads.item_grads)}
                if ex_grads is not None:
                    if cfg.reg > 0 and cfg.reg_extractor:
                        pe_table = EmbeddingTable(pe.user_vecs, pe.item_vecs)
                        _, pe_reg = l2_penalty(pe_table, ex_grads.user_ids, ex_grads.item_ids, cfg.reg)
                        ex_grads = add_grads(ex_grads, pe_reg)
                    step_grads["pop_user"] = (ex_grads.user_ids, ex_grads.user_grads)
                    step_grads["pop_item"] = (ex_grads.item_ids, ex_grads.item_grads)

                if not np.isfinite(value):
                    raise FloatingPointError("non-finite loss")
                adam_step(params, step_grads, adam, cfg.lr)
            except FloatingPointError:
                diverged = True
                break
            epoch_loss += value

        if diverged:
            stop_reason = "diverged"
            break

        rec = Recommender(kind, table, adj)
        if val_metric_fn is not None:
            metric = float(val_metric_fn(epoch, rec))
            ndcg = None
        else:
            rep = evaluate(rec, split.validation, train_ds, k=cfg.eval_k)
            metric = rep.overall.recall if rep.overall else 0.0
            ndcg = rep.overall.ndcg if rep.overall else None

        report.train_loss.append(epoch_loss)
        report.val_recall.append(metric)
        report.val_ndcg.append(ndcg)
        report.extractor_loss.append(epoch_ex_loss if cfg.loss == "bc" and not pe_frozen else None)
        if epoch_hook is not None:
            epoch_hook(epoch, table)

        if stopper.update(epoch, metric):
            best = (table.copy(), pe.copy() if pe is not None else None)
        if stopper.should_stop:
            stop_reason = "patience"
            break

    report.best_epoch = stopper.best_epoch
    report.stop_reason = stop_reason
    report.wall_time = time.perf_counter() - t0
    table, pe_best = best
    return table, pe_best if pe is not None else None, report


def train_extractor(split: DataSplit, config: TrainConfig,
                    ) -> tuple[PopularityEmbeddings, TrainReport]:
    """Train the popularity bias extractor alone (phase one of two_phase).

    Early-stops on the extractor's validation loss over fixed, pre-sampled
    validation negatives; falls back to the training loss when the
    validation member is empty.
    """
    config.validate()
    cfg = config.resolved(EncoderKind("mf"))
    train_ds = split.train
    if len(train_ds) == 0:
        raise ConfigError("training split is empty")

    rng = np.random.default_rng([cfg.seed, 0xB1A5])
    pe = init_popularity_embeddings(train_ds, cfg.d, rng, cfg.init_std)
    pair_codes = _pair_codes(train_ds)
    adam = AdamState()
    params = {"pop_user": pe.user_vecs, "pop_item": pe.item_vecs}
    n_neg = cfg.num_negatives or 128

    val = split.validation
    val_batch: Optional[LossBatch] = None
    if len(val) > 0:
        vneg = _sample_matrix(pair_codes, train_ds.user_pop, val.users,
                              n_neg, train_ds.num_items, rng)
        val_batch = LossBatch(val.users, val.items, vneg,
                              np.full(len(val), n_neg, dtype=np.int64))

    report = TrainReport()
    stopper = EarlyStopper(cfg.patience)
    best = pe.copy()
    stop_reason = "max_epochs"
    n = len(train_ds)

    for epoch in range(1, cfg.max_epochs + 1):
        perm = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            rows = perm[start:start + cfg.batch_size]
            users = train_ds.users[rows]
            pos = train_ds.items[rows]
            neg = _sample_matrix(pair_codes, train_ds.user_pop, users,
                                 n_neg, train_ds.num_items, rng)
            batch = LossBatch(users, pos, neg, np.full(len(users), n_neg, dtype=np.int64))
            value, grads = extractor_loss(pe, batch, train_ds.user_pop, train_ds.item_pop, cfg.tau2)
            if cfg.reg > 0 and cfg.reg_extractor:
                pe_table = EmbeddingTable(pe.user_vecs, pe.item_vecs)
                reg_val, reg_grads = l2_penalty(pe_table, grads.user_ids, grads.item_ids, cfg.reg)
                grads = add_grads(grads, reg_grads)
                value += reg_val
            adam_step(params, {"pop_user": (grads.user_ids, grads.user_grads),
                               "pop_item": (grads.item_ids, grads.item_grads)}, adam, cfg.lr)
            epoch_loss += value

        if val_batch is not None:
            val_loss, _ = extractor_loss(pe, val_batch, train_ds.user_pop,
                                         train_ds.item_pop, cfg.tau2)
        else:
            val_loss = epoch_loss
        report.train_loss.append(epoch_loss)
        report.extractor_loss.append(val_loss)

        if stopper.update(epoch, -val_loss):
            best = pe.copy()
        if stopper.should_stop:
            stop_reason = "patience"
            break

    report.best_epoch = stopper.best_epoch
    report.stop_reason = stop_reason
    return best, report
