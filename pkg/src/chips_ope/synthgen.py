"""Cluster-structured synthetic bandit worlds with exact ground-truth values."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Literal

import numpy as np

from .core import BanditDataset, DataValidationError, PolicyTable, RandomStream


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=axis, keepdims=True)


@dataclass(frozen=True)
class SynthConfig:
    """Generation parameters for the synthetic cluster-bandit world.

    ``e_len`` and ``b_len`` size the paired evaluation/logging pools used by
    the bootstrap-ECDF protocol; plain sweeps draw ``n_samples`` directly.
    """

    c_exp: float = 10.0
    c_rad: float = 1.0
    d_x: int = 2
    x_num: int = 1000
    a_num: int = 10
    c_num: int = 10
    n_samples: int = 50_000
    emp_c_num: int = 100
    e_len: int = 1_000_000
    b_len: int = 1_000_000
    sigma: float = 0.2
    beta: float = -1.0
    n_deficient: int = 0

    def __post_init__(self) -> None:
        for f in fields(self):
            if f.name in ("sigma", "beta", "n_deficient", "n_samples"):
                continue
            value = getattr(self, f.name)
            if value is None or value < 1:
                raise ValueError(f"{f.name} must be >= 1, got {value}")
        if self.n_samples < 0:
            raise ValueError("n_samples must be nonnegative")
        if not 0 <= self.sigma <= 1:
            raise ValueError(f"sigma must lie in [0, 1], got {self.sigma}")
        if not -1 <= self.beta <= 1:
            raise ValueError(f"beta must lie in [-1, 1], got {self.beta}")
        if self.n_deficient < 0 or self.n_deficient >= self.a_num:
            raise ValueError("n_deficient must satisfy 0 <= n_deficient < a_num")


@dataclass(frozen=True, eq=False)
class SyntheticWorld:
    """A fully specified finite bandit world.

    ``reward_mean[k, j]`` is the Bernoulli success probability of action j
    in context k; the exact policy value is a finite double sum over it.
    """

    contexts: np.ndarray
    cluster_of: np.ndarray
    p_x: np.ndarray
    pi_eval: PolicyTable
    pi_log: PolicyTable
    reward_mean: np.ndarray
    _row_index: dict = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if abs(self.p_x.sum() - 1.0) > 1e-9 or (self.p_x < 0).any():
            raise DataValidationError("p_x is not a probability vector")
        if (self.reward_mean < 0).any() or (self.reward_mean > 1).any():
            raise DataValidationError("reward means must lie in [0, 1]")
        index = {row.tobytes(): i for i, row in enumerate(self.contexts)}
        object.__setattr__(self, "_row_index", index)

    @property
    def n_contexts(self) -> int:
        return int(self.contexts.shape[0])

    @property
    def n_actions(self) -> int:
        return self.pi_eval.n_actions

    def context_indices(self, contexts: np.ndarray) -> np.ndarray:
        """Universe indices of context rows sampled from this world."""
        contexts = np.atleast_2d(np.asarray(contexts, dtype=np.float64))
        return np.fromiter((self._row_index[row.tobytes()] for row in contexts),
                           dtype=np.int64, count=contexts.shape[0])


def sample_in_ball(n: int, center: np.ndarray, radius: float, rng: np.random.Generator) -> np.ndarray:
    """Uniform points in the Euclidean ball around ``center``.

    Gaussian directions scaled by u**(1/d) give the exact uniform law on
    the ball interior.
    """
    center = np.atleast_1d(np.asarray(center, dtype=np.float64))
    d = center.shape[0]
    z = rng.standard_normal((n, d))
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    u = rng.uniform(size=(n, 1))
    return center + radius * u ** (1.0 / d) * z / norms


def generate_cluster_centers(m: int, c_exp: float, d_x: int, rng: np.random.Generator) -> np.ndarray:
    """m cluster centers drawn uniformly inside the ball B(0, c_exp)."""
    if m < 1 or d_x < 1 or c_exp <= 0:
        raise ValueError("need m >= 1, d_x >= 1 and c_exp > 0")
    return sample_in_ball(m, np.zeros(d_x), c_exp, rng)


def generate_context_space(cfg: SynthConfig, rng: np.random.Generator):
    """Contexts grouped around generated centers, plus the context law p_x.

    Cluster sizes are a multinomial draw from softmax of uniform scores;
    each context lies within ``c_rad`` of its generating center; p_x is the
    softmax of i.i.d. standard normal scores.
    """
    centers = generate_cluster_centers(cfg.c_num, cfg.c_exp, cfg.d_x, rng)
    scores = rng.uniform(size=cfg.c_num)
    sizes = rng.multinomial(cfg.x_num, softmax(scores))
    parts, labels = [], []
    for i in range(cfg.c_num):
        if sizes[i] == 0:
            continue
        parts.append(sample_in_ball(int(sizes[i]), centers[i], cfg.c_rad, rng))
        labels.append(np.full(int(sizes[i]), i, dtype=np.int64))
    contexts = np.concatenate(parts, axis=0)
    cluster_of = np.concatenate(labels)
    p_x = softmax(rng.standard_normal(cfg.x_num))
    return contexts, cluster_of, p_x


def generate_policies(cfg: SynthConfig, cluster_of: np.ndarray, rng: np.random.Generator):
    """Evaluation and logging policy tables over the context universe.

    The logit of action j for a context in cluster i is ``y[i, j] +
    sigma * z[k, j]`` with per-cluster scores y and per-context noise z; the
    logging table reuses the same logits scaled by beta. The noise is drawn
    per (context, action) because a per-context scalar would cancel in the
    softmax and leave sigma inert.
    """
    y = rng.standard_normal((cfg.c_num, cfg.a_num))
    z = rng.standard_normal((cfg.x_num, cfg.a_num))
    logits = y[cluster_of] + cfg.sigma * z
    pi_eval = PolicyTable(softmax(logits, axis=1))
    pi_log = PolicyTable(softmax(cfg.beta * logits, axis=1))
    return pi_eval, pi_log


def apply_deficiency(pi_log: PolicyTable, n_def: int, rng: np.random.Generator) -> PolicyTable:
    """Zero a uniformly random subset of ``n_def`` actions in every row.

    The same action subset is removed from every context and rows are
    renormalized; a row left without probability mass is an error.
    """
    if n_def == 0:
        return pi_log
    if n_def >= pi_log.n_actions:
        raise ValueError("cannot zero out the whole action space")
    removed = rng.choice(pi_log.n_actions, size=n_def, replace=False)
    probs = pi_log.probs.copy()
    probs[:, removed] = 0.0
    sums = probs.sum(axis=1)
    if (sums <= 0).any():
        raise DataValidationError("deficiency masking left a context with no feasible action")
    return PolicyTable(probs / sums[:, None])


def build_reward_means(cfg: SynthConfig, contexts: np.ndarray, cluster_of: np.ndarray,
                       pi_eval: PolicyTable) -> np.ndarray:
    """Bernoulli mean matrix q[k, j] = pi(a_j|x_k) * |x_k|_1 / (c_exp * d_x).

    Rewards are deliberately coupled to the evaluation policy (a
    misspecified-reward design); entries are clamped to [0, 1].
    """
    scale = np.abs(contexts).sum(axis=1) / (cfg.c_exp * cfg.d_x)
    return np.clip(pi_eval.probs * scale[:, None], 0.0, 1.0)


def generate_world(cfg: SynthConfig, stream: RandomStream) -> SyntheticWorld:
    """Full world as a pure function of (config, stream)."""
    rng = stream.generator()
    contexts, cluster_of, p_x = generate_context_space(cfg, rng)
    pi_eval, pi_log = generate_policies(cfg, cluster_of, rng)
    if cfg.n_deficient:
        pi_log = apply_deficiency(pi_log, cfg.n_deficient, rng)
    reward_mean = build_reward_means(cfg, contexts, cluster_of, pi_eval)
    return SyntheticWorld(contexts=contexts, cluster_of=cluster_of, p_x=p_x,
                          pi_eval=pi_eval, pi_log=pi_log, reward_mean=reward_mean)


def sample_logged_data(world: SyntheticWorld, n: int, policy: Literal["log", "eval"],
                       stream: RandomStream) -> BanditDataset:
    """Draw n i.i.d. logged tuples from the world under the chosen policy.

    Propensity rows always come from the logging table; evaluation-policy
    samples exist only to form on-policy ground truth, so their rows are
    not re-validated against the sampled actions.
    """
    if n < 0:
        raise ValueError("n must be nonnegative")
    rng = stream.generator()
    table = world.pi_log if policy == "log" else world.pi_eval
    ids = rng.choice(world.n_contexts, size=n, p=world.p_x)
    # inverse-CDF draw per row; vectorized over samples
    cdf = np.cumsum(table.probs[ids], axis=1)
    u = rng.uniform(size=(n, 1))
    actions = (u > cdf).sum(axis=1)
    np.clip(actions, 0, world.n_actions - 1, out=actions)
    means = world.reward_mean[ids, actions]
    rewards = (rng.uniform(size=n) < means).astype(np.float64)
    return BanditDataset(
        contexts=world.contexts[ids],
        actions=actions,
        rewards=rewards,
        n_actions=world.n_actions,
        propensities=world.pi_log.probs[ids],
        cluster_ids=world.cluster_of[ids],
        n_clusters=int(world.cluster_of.max()) + 1,
        validate=(policy == "log"),
    )


def true_policy_value(world: SyntheticWorld) -> float:
    """Exact value sum(x) p_x(x) sum(a) pi(a|x) q(x, a); no sampling."""
    return float(np.einsum("x,xa,xa->", world.p_x, world.pi_eval.probs, world.reward_mean))
