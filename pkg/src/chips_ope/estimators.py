"""Policy-value estimators for logged bandit feedback.

Every estimator maps ``(dataset, evaluation policy, options)`` to an
:class:`~chips_ope.core.Estimate`. The evaluation policy may be passed as an
``(n_samples, n_actions)`` matrix of probability rows aligned with the
dataset, or as any object exposing ``action_probabilities(contexts)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np
from sklearn.ensemble import RandomForestRegressor
from sklearn.linear_model import Ridge

from .clustering import ClusterModel
from .core import BanditDataset, CapabilityError, DataValidationError, Estimate, RandomStream

ESTIMATOR_NAMES = (
    "ips", "snips", "dm", "dr", "sndr", "dros", "switch-dr", "mr", "mips",
    "chips-ml", "chips-map",
)


def resolve_policy(pi_eval, dataset: BanditDataset) -> np.ndarray:
    """Evaluation-policy rows aligned with the dataset samples."""
    if hasattr(pi_eval, "action_probabilities"):
        probs = pi_eval.action_probabilities(dataset.contexts)
    else:
        probs = np.asarray(pi_eval, dtype=np.float64)
    probs = np.atleast_2d(probs)
    if probs.shape != (dataset.n_samples, dataset.n_actions):
        raise DataValidationError(
            f"evaluation policy rows have shape {probs.shape}, "
            f"expected ({dataset.n_samples}, {dataset.n_actions})")
    return probs


def importance_weights(dataset: BanditDataset, eval_probs: np.ndarray) -> np.ndarray:
    """Per-sample ratios pi(a_i|x_i) / pi_0(a_i|x_i)."""
    logged = dataset.logged_propensity
    if logged is None:
        raise CapabilityError("dataset carries no logging propensities")
    if (logged <= 0).any():
        raise DataValidationError("a logged action has zero logging propensity")
    return eval_probs[np.arange(dataset.n_samples), dataset.actions] / logged


def estimate_ips(dataset: BanditDataset, pi_eval) -> Estimate:
    """Inverse propensity scoring: mean of w(a_i, x_i) * r_i."""
    eval_probs = resolve_policy(pi_eval, dataset)
    terms = importance_weights(dataset, eval_probs) * dataset.rewards
    return Estimate(float(terms.mean()), "ips", terms)


def estimate_snips(dataset: BanditDataset, pi_eval) -> Estimate:
    """Self-normalized IPS: sum(w r) / sum(w).

    Invariant to scaling all propensities by a positive constant; the
    normalization makes per-sample terms meaningless, so none are kept.
    """
    eval_probs = resolve_policy(pi_eval, dataset)
    w = importance_weights(dataset, eval_probs)
    total = w.sum()
    if total <= 0:
        raise DataValidationError("self-normalization impossible: all weights are zero")
    return Estimate(float((w * dataset.rewards).sum() / total), "snips")


@dataclass(eq=False)
class RewardModel:
    """Fitted regressor q_hat(a, x) with post-hoc clamping to [0, reward_max]."""

    family: str
    model: object
    n_actions: int
    reward_max: float
    params: dict

    def _features(self, contexts: np.ndarray, actions: np.ndarray) -> np.ndarray:
        onehot = np.zeros((contexts.shape[0], self.n_actions))
        onehot[np.arange(contexts.shape[0]), actions] = 1.0
        return np.hstack([contexts, onehot])

    def predict(self, contexts: np.ndarray, actions: np.ndarray) -> np.ndarray:
        contexts = np.atleast_2d(np.asarray(contexts, dtype=np.float64))
        actions = np.asarray(actions, dtype=np.int64)
        raw = self.model.predict(self._features(contexts, actions))
        return np.clip(raw, 0.0, self.reward_max)

    def predict_matrix(self, contexts: np.ndarray) -> np.ndarray:
        """q_hat for every action: shape (n_samples, n_actions)."""
        contexts = np.atleast_2d(np.asarray(contexts, dtype=np.float64))
        n = contexts.shape[0]
        out = np.empty((n, self.n_actions))
        for a in range(self.n_actions):
            out[:, a] = self.predict(contexts, np.full(n, a, dtype=np.int64))
        return out


def fit_reward_model(dataset: BanditDataset, family: str = "forest",
                     stream: RandomStream | None = None, **params) -> RewardModel:
    """Fit q_hat on (context, one-hot action) features.

    The default family is a depth-limited ensemble of regression trees
    without bootstrap resampling, which keeps predictions deterministic
    under a fixed stream and exact on degenerate (constant or single-cell)
    data. ``family="ridge"`` gives a cheap linear alternative.
    """
    if dataset.n_samples < 1:
        raise DataValidationError("cannot fit a reward model on an empty dataset")
    seed = int((stream or RandomStream(0)).generator().integers(2**31 - 1))
    if family == "forest":
        model = RandomForestRegressor(
            n_estimators=params.get("n_estimators", 100),
            max_depth=params.get("max_depth", 12),
            max_features=params.get("max_features", "sqrt"),
            bootstrap=False,
            random_state=seed,
            n_jobs=1,
        )
    elif family == "ridge":
        model = Ridge(alpha=params.get("ridge_alpha", 1.0), random_state=seed)
    else:
        raise ValueError(f"unknown reward model family {family!r}")
    rm = RewardModel(family, model, dataset.n_actions, dataset.reward_max, dict(params))
    model.fit(rm._features(dataset.contexts, dataset.actions), dataset.rewards)
    return rm


def _dm_terms(dataset: BanditDataset, eval_probs: np.ndarray, reward_model: RewardModel) -> np.ndarray:
    qmat = reward_model.predict_matrix(dataset.contexts)
    return (eval_probs * qmat).sum(axis=1)


def estimate_dm(dataset: BanditDataset, pi_eval, reward_model: RewardModel) -> Estimate:
    """Direct method: mean over samples of sum_a pi(a|x_i) q_hat(a, x_i)."""
    eval_probs = resolve_policy(pi_eval, dataset)
    terms = _dm_terms(dataset, eval_probs, reward_model)
    return Estimate(float(terms.mean()), "dm", terms)


def estimate_dr(dataset: BanditDataset, pi_eval, reward_model: RewardModel) -> Estimate:
    """Doubly robust: DM plus the importance-weighted residual correction."""
    eval_probs = resolve_policy(pi_eval, dataset)
    w = importance_weights(dataset, eval_probs)
    q_logged = reward_model.predict(dataset.contexts, dataset.actions)
    terms = _dm_terms(dataset, eval_probs, reward_model) + w * (dataset.rewards - q_logged)
    return Estimate(float(terms.mean()), "dr", terms)


def estimate_sndr(dataset: BanditDataset, pi_eval, reward_model: RewardModel) -> Estimate:
    """DR with a self-normalized correction term."""
    eval_probs = resolve_policy(pi_eval, dataset)
    w = importance_weights(dataset, eval_probs)
    total = w.sum()
    if total <= 0:
        raise DataValidationError("self-normalization impossible: all weights are zero")
    q_logged = reward_model.predict(dataset.contexts, dataset.actions)
    dm_part = float(_dm_terms(dataset, eval_probs, reward_model).mean())
    correction = float((w * (dataset.rewards - q_logged)).sum() / total)
    return Estimate(dm_part + correction, "sndr")


def shrunk_weights(w: np.ndarray, lambda_: float) -> np.ndarray:
    """Pessimistic shrinkage lambda * w / (w^2 + lambda); capped at sqrt(lambda)/2."""
    if lambda_ < 0:
        raise ValueError("lambda must be nonnegative")
    if lambda_ == 0:
        return np.zeros_like(w)
    if np.isinf(lambda_):
        return w.copy()
    return lambda_ * w / (w * w + lambda_)


def estimate_dros(dataset: BanditDataset, pi_eval, reward_model: RewardModel,
                  lambda_: float = 1.0) -> Estimate:
    """DR with shrunk weights: lambda=0 recovers DM, lambda -> inf recovers DR."""
    eval_probs = resolve_policy(pi_eval, dataset)
    w = shrunk_weights(importance_weights(dataset, eval_probs), lambda_)
    q_logged = reward_model.predict(dataset.contexts, dataset.actions)
    terms = _dm_terms(dataset, eval_probs, reward_model) + w * (dataset.rewards - q_logged)
    return Estimate(float(terms.mean()), "dros", terms)


def estimate_switch_dr(dataset: BanditDataset, pi_eval, reward_model: RewardModel,
                       tau: float) -> Estimate:
    """DR with the correction gated to samples whose weight is at most tau."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    eval_probs = resolve_policy(pi_eval, dataset)
    w = importance_weights(dataset, eval_probs)
    gate = (w <= tau).astype(np.float64)
    q_logged = reward_model.predict(dataset.contexts, dataset.actions)
    terms = _dm_terms(dataset, eval_probs, reward_model) + w * gate * (dataset.rewards - q_logged)
    return Estimate(float(terms.mean()), "switch-dr", terms)


def estimate_mr(dataset: BanditDataset, pi_eval, n_bins: int = 20) -> Estimate:
    """Marginal-ratio estimator: mean of f(r_i) * r_i.

    For binary rewards the least-squares minimizer over unrestricted f is
    the mean weight among samples sharing the reward value; general rewards
    use a binned regressor of the weights on the rewards (equal-width bins,
    empty bins inherit the nearest populated bin).
    """
    eval_probs = resolve_policy(pi_eval, dataset)
    w = importance_weights(dataset, eval_probs)
    r = dataset.rewards
    binary = np.isin(r, (0.0, 1.0)).all()
    if binary:
        f = np.empty_like(r)
        for level in (0.0, 1.0):
            mask = r == level
            if mask.any():
                f[mask] = w[mask].mean()
    else:
        lo, hi = float(r.min()), float(r.max())
        if hi == lo:
            f = np.full_like(r, w.mean())
        else:
            edges = np.linspace(lo, hi, n_bins + 1)
            idx = np.clip(np.searchsorted(edges, r, side="right") - 1, 0, n_bins - 1)
            sums = np.bincount(idx, weights=w, minlength=n_bins)
            counts = np.bincount(idx, minlength=n_bins)
            populated = np.where(counts > 0)[0]
            means = np.empty(n_bins)
            means[populated] = sums[populated] / counts[populated]
            empty = np.where(counts == 0)[0]
            if empty.size:
                nearest = populated[np.argmin(np.abs(empty[:, None] - populated[None, :]), axis=1)]
                means[empty] = means[nearest]
            f = means[idx]
    terms = f * r
    return Estimate(float(terms.mean()), "mr", terms)


def embedding_marginals(probs: np.ndarray, embeddings: np.ndarray) -> np.ndarray:
    """p(e|x, policy) by exact summation over actions sharing a category."""
    n_emb = int(embeddings.max()) + 1
    indicator = np.zeros((probs.shape[1], n_emb))
    indicator[np.arange(probs.shape[1]), embeddings] = 1.0
    return probs @ indicator


def estimate_mips(dataset: BanditDataset, pi_eval,
                  action_embeddings: Optional[np.ndarray] = None) -> Estimate:
    """Marginalized IPS over a deterministic categorical action embedding."""
    embeddings = action_embeddings if action_embeddings is not None else dataset.action_embeddings
    if embeddings is None:
        raise CapabilityError("MIPS requires an action -> embedding map")
    embeddings = np.asarray(embeddings, dtype=np.int64)
    if embeddings.shape != (dataset.n_actions,) or (embeddings < 0).any():
        raise CapabilityError("the embedding map must cover every action")
    if dataset.propensities is None:
        raise CapabilityError("MIPS requires full logging-propensity rows")
    eval_probs = resolve_policy(pi_eval, dataset)
    e_logged = embeddings[dataset.actions]
    rows = np.arange(dataset.n_samples)
    p_eval = embedding_marginals(eval_probs, embeddings)[rows, e_logged]
    p_log = embedding_marginals(dataset.propensities, embeddings)[rows, e_logged]
    if (p_log <= 0).any():
        raise DataValidationError("a logged embedding category has zero logging probability")
    terms = (p_eval / p_log) * dataset.rewards
    return Estimate(float(terms.mean()), "mips", terms)


# ---------------------------------------------------------------------------
# cluster-huddled estimation


def _cluster_ids(dataset: BanditDataset, cluster_model: Optional[ClusterModel],
                 cluster_ids: Optional[np.ndarray]) -> tuple[np.ndarray, int]:
    if cluster_ids is not None:
        ids = np.asarray(cluster_ids, dtype=np.int64)
    elif cluster_model is not None:
        ids = cluster_model.assign(dataset.contexts)
    elif dataset.cluster_ids is not None:
        ids = dataset.cluster_ids
    else:
        raise CapabilityError("cluster-huddled estimation needs cluster ids or a cluster model")
    if ids.shape != (dataset.n_samples,):
        raise DataValidationError("cluster ids do not align with the dataset")
    n_clusters = int(ids.max()) + 1 if ids.size else 1
    return ids, n_clusters


def chips_action_probs(cluster_ids: np.ndarray, policy_rows: np.ndarray,
                       n_clusters: Optional[int] = None) -> tuple[np.ndarray, np.ndarray]:
    """Average policy rows within each cluster: p_hat(a|c, policy).

    Returns ``(table, counts)`` where ``table[c]`` is the mean probability
    row over the samples in cluster c (NaN for clusters with no samples)
    and ``counts[c]`` is the sample count. Rows of populated clusters sum
    to one because they average probability rows.
    """
    cluster_ids = np.asarray(cluster_ids, dtype=np.int64)
    policy_rows = np.atleast_2d(np.asarray(policy_rows, dtype=np.float64))
    k = n_clusters if n_clusters is not None else (int(cluster_ids.max()) + 1 if cluster_ids.size else 1)
    sums = np.zeros((k, policy_rows.shape[1]))
    np.add.at(sums, cluster_ids, policy_rows)
    counts = np.bincount(cluster_ids, minlength=k).astype(np.float64)
    table = np.full_like(sums, np.nan)
    hit = counts > 0
    table[hit] = sums[hit] / counts[hit, None]
    return table, counts


def chips_reward_ml(cluster_ids: np.ndarray, actions: np.ndarray, rewards: np.ndarray,
                    n_clusters: Optional[int] = None,
                    n_actions: Optional[int] = None) -> tuple[np.ndarray, np.ndarray]:
    """Per (cluster, action) cell: sample mean of observed rewards.

    Cells with no samples are marked empty with NaN.
    """
    cluster_ids = np.asarray(cluster_ids, dtype=np.int64)
    actions = np.asarray(actions, dtype=np.int64)
    rewards = np.asarray(rewards, dtype=np.float64)
    k = n_clusters if n_clusters is not None else (int(cluster_ids.max()) + 1 if cluster_ids.size else 1)
    a = n_actions if n_actions is not None else (int(actions.max()) + 1 if actions.size else 1)
    flat = cluster_ids * a + actions
    sums = np.bincount(flat, weights=rewards, minlength=k * a).reshape(k, a)
    counts = np.bincount(flat, minlength=k * a).reshape(k, a).astype(np.float64)
    means = np.full((k, a), np.nan)
    hit = counts > 0
    means[hit] = sums[hit] / counts[hit]
    return means, counts


def chips_reward_map(cluster_ids: np.ndarray, actions: np.ndarray, rewards: np.ndarray,
                     alpha: float, beta_hat: float,
                     n_clusters: Optional[int] = None,
                     n_actions: Optional[int] = None) -> np.ndarray:
    """Posterior-mode cell rewards under a Beta(alpha, beta_hat) prior.

    Each (cluster, action) cell with M samples and reward sum S gets
    ``(alpha - 1 + S) / (alpha + beta_hat + M - 2)``; empty cells fall back
    to the prior mode. Restricted to binary rewards (Bernoulli cells).
    """
    if alpha <= 1 or beta_hat <= 1:
        raise ValueError("the posterior mode needs alpha > 1 and beta_hat > 1")
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.size and not np.isin(rewards, (0.0, 1.0)).all():
        raise DataValidationError("posterior-mode reward estimation requires binary rewards")
    cluster_ids = np.asarray(cluster_ids, dtype=np.int64)
    actions = np.asarray(actions, dtype=np.int64)
    k = n_clusters if n_clusters is not None else (int(cluster_ids.max()) + 1 if cluster_ids.size else 1)
    a = n_actions if n_actions is not None else (int(actions.max()) + 1 if actions.size else 1)
    flat = cluster_ids * a + actions
    sums = np.bincount(flat, weights=rewards, minlength=k * a).reshape(k, a)
    counts = np.bincount(flat, minlength=k * a).reshape(k, a).astype(np.float64)
    return (alpha - 1.0 + sums) / (alpha + beta_hat + counts - 2.0)


@dataclass
class ChipsOptions:
    """Options for cluster-huddled estimation.

    ``alpha == beta_hat`` marks the symmetric prior used by default; MAP
    mode requires binary rewards. Cluster assignments come from
    ``cluster_ids``, then ``cluster_model``, then the dataset itself.
    """

    mode: str = "ml"
    alpha: float = 20.0
    beta_hat: Optional[float] = None
    cluster_model: Optional[ClusterModel] = None
    cluster_ids: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if self.mode not in ("ml", "map"):
            raise ValueError(f"mode must be 'ml' or 'map', got {self.mode!r}")
        if self.beta_hat is None:
            self.beta_hat = self.alpha


def estimate_chips(dataset: BanditDataset, pi_eval, options: ChipsOptions) -> Estimate:
    """Cluster-huddled inverse propensity scoring.

    Weights are ratios of within-cluster averaged policy rows,
    ``w(a, c) = p_hat(a|c, pi) / p_hat(a|c, pi_0)``; each sample contributes
    ``w(a_i, c_i)`` times its cell's estimated reward (the raw within-cell
    mean in ML mode, the posterior mode in MAP mode). In ML mode the cell
    substitution is algebraically a no-op, so the value equals the plain
    weighted mean of raw rewards.
    """
    if dataset.propensities is None:
        raise CapabilityError("cluster-huddled estimation requires full logging-propensity rows")
    eval_probs = resolve_policy(pi_eval, dataset)
    ids, k = _cluster_ids(dataset, options.cluster_model, options.cluster_ids)
    p_eval, _ = chips_action_probs(ids, eval_probs, k)
    p_log, _ = chips_action_probs(ids, dataset.propensities, k)
    w_cell = p_eval[ids, dataset.actions] / p_log[ids, dataset.actions]
    if options.mode == "ml":
        cells, _ = chips_reward_ml(ids, dataset.actions, dataset.rewards, k, dataset.n_actions)
        name = "chips-ml"
    else:
        cells = chips_reward_map(ids, dataset.actions, dataset.rewards,
                                 options.alpha, options.beta_hat, k, dataset.n_actions)
        name = "chips-map"
    terms = w_cell * cells[ids, dataset.actions]
    return Estimate(float(terms.mean()), name, terms)


# ---------------------------------------------------------------------------
# registry


def needs_reward_model(name: str) -> bool:
    return name in ("dm", "dr", "sndr", "dros", "switch-dr")


def needs_clusters(name: str) -> bool:
    return name.startswith("chips")


def needs_embeddings(name: str) -> bool:
    return name == "mips"


def run_estimator(name: str, dataset: BanditDataset, pi_eval, *,
                  reward_model: Optional[RewardModel] = None,
                  cluster_model: Optional[ClusterModel] = None,
                  cluster_ids: Optional[np.ndarray] = None,
                  action_embeddings: Optional[np.ndarray] = None,
                  options: Optional[Mapping] = None) -> Estimate:
    """Dispatch an estimator by registry name with a JSON-style option block."""
    opts = dict(options or {})
    if name not in ESTIMATOR_NAMES:
        raise KeyError(f"unknown estimator {name!r}; known: {', '.join(ESTIMATOR_NAMES)}")
    if needs_reward_model(name) and reward_model is None:
        raise ValueError(f"estimator {name!r} needs a fitted reward model")
    if name == "ips":
        return estimate_ips(dataset, pi_eval)
    if name == "snips":
        return estimate_snips(dataset, pi_eval)
    if name == "dm":
        return estimate_dm(dataset, pi_eval, reward_model)
    if name == "dr":
        return estimate_dr(dataset, pi_eval, reward_model)
    if name == "sndr":
        return estimate_sndr(dataset, pi_eval, reward_model)
    if name == "dros":
        return estimate_dros(dataset, pi_eval, reward_model, lambda_=float(opts.get("lambda", 1.0)))
    if name == "switch-dr":
        tau = opts.get("tau")
        if tau is None:
            eval_probs = resolve_policy(pi_eval, dataset)
            tau = float(np.percentile(importance_weights(dataset, eval_probs), 95))
            tau = max(tau, np.finfo(float).tiny)
        return estimate_switch_dr(dataset, pi_eval, reward_model, tau=float(tau))
    if name == "mr":
        return estimate_mr(dataset, pi_eval, n_bins=int(opts.get("n_bins", 20)))
    if name == "mips":
        return estimate_mips(dataset, pi_eval, action_embeddings=action_embeddings)
    mode = "ml" if name == "chips-ml" else "map"
    chips_opts = ChipsOptions(
        mode=mode,
        alpha=float(opts.get("alpha", 20.0)),
        beta_hat=float(opts["beta_hat"]) if "beta_hat" in opts else None,
        cluster_model=cluster_model,
        cluster_ids=cluster_ids,
    )
    return estimate_chips(dataset, pi_eval, chips_opts)
