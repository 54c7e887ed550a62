"""Synthetic long-tail interaction generator with a tunable exposure bias.

Ground-truth preferences come from random latent factors; the observed log
draws items with probability proportional to preference times a Zipf
popularity weight raised to the bias strength. A separate ground-truth test
set is drawn from preference alone, so debiasing behavior can be measured
against an unbiased reference.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .data import Dataset
from .errors import ConfigError


@dataclass(frozen=True)
class SynthConfig:
    num_users: int = 200
    num_items: int = 300
    latent_dim: int = 8
    zipf_exponent: float = 1.0
    bias_strength: float = 1.0
    pref_strength: float = 1.0   # 0 makes exposure preference-independent
    interactions_per_user: int = 30
    truth_per_user: int = 10
    seed: int = 0

    def validate(self) -> None:
        if self.num_users < 2 or self.num_items < 2:
            raise ConfigError("need at least 2 users and 2 items")
        if self.latent_dim < 1:
            raise ConfigError("latent_dim must be >= 1")
        if self.zipf_exponent < 0 or self.bias_strength < 0 or self.pref_strength < 0:
            raise ConfigError("exponents and strengths must be >= 0")
        if not 0 < self.interactions_per_user < self.num_items:
            raise ConfigError("interactions_per_user must be in (0, num_items)")
        if self.truth_per_user < 1:
            raise ConfigError("truth_per_user must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def generate(cfg: SynthConfig) -> tuple[Dataset, Dataset]:
    """Return (observed, truth) datasets over a shared id space.

    Observed: per user, `interactions_per_user` distinct items drawn without
    replacement with weight preference^pref_strength * zipf^bias_strength.
    Truth: per user, up to `truth_per_user` distinct items drawn by
    preference alone from the observed item universe, excluding the user's
    own observed items.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    z = rng.normal(size=(cfg.num_users, cfg.latent_dim))
    w = rng.normal(size=(cfg.num_items, cfg.latent_dim))
    pref = np.exp(cfg.pref_strength * (z @ w.T) / np.sqrt(cfg.latent_dim))

    ranks = rng.permutation(cfg.num_items) + 1
    zipf = ranks.astype(np.float64) ** (-cfg.zipf_exponent)
    weight = pref * zipf[None, :] ** cfg.bias_strength

    obs_users: list[int] = []
    obs_items: list[int] = []
    per_user_obs: list[np.ndarray] = []
    for u in range(cfg.num_users):
        p = weight[u] / weight[u].sum()
        picks = rng.choice(cfg.num_items, size=cfg.interactions_per_user, replace=False, p=p)
        picks = np.sort(picks)
        per_user_obs.append(picks)
        obs_users.extend([u] * len(picks))
        obs_items.extend(picks.tolist())

    support = np.unique(np.array(obs_items, dtype=np.int64))
    support_set = set(support.tolist())
    remap = {int(old): new for new, old in enumerate(support.tolist())}

    tr_users: list[int] = []
    tr_items: list[int] = []
    for u in range(cfg.num_users):
        own = set(per_user_obs[u].tolist())
        pool = np.array([i for i in support.tolist() if i not in own], dtype=np.int64)
        if len(pool) == 0:
            continue
        p = pref[u, pool]
        p = p / p.sum()
        take = min(cfg.truth_per_user, len(pool))
        picks = np.sort(rng.choice(pool, size=take, replace=False, p=p))
        tr_users.extend([u] * take)
        tr_items.extend(picks.tolist())

    user_ids = [f"u{k}" for k in range(cfg.num_users)]
    item_ids = [f"i{int(old)}" for old in support.tolist()]
    num_items = len(support)

    def build(users, items) -> Dataset:
        return Dataset(
            np.array(users, dtype=np.int64),
            np.array([remap[int(i)] for i in items], dtype=np.int64),
            None, cfg.num_users, num_items, user_ids, item_ids,
        )

    assert all(i in support_set for i in obs_items)
    return build(obs_users, obs_items), build(tr_users, tr_items)
