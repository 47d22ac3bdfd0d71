"""Exact computations on small discrete bandit instances.

Everything here enumerates finite worlds, so estimator means, variances and
the closed-form bias/variance identities can be checked without sampling.
Cluster-level weights are always the population marginals
``p(a|c, policy) = sum_x p(x|c) policy(a|x)``, matching the infinite-data
regime the identities are stated for.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import DataValidationError, RandomStream

ENUMERATION_CAP = 10_000


class EnumerationLimitError(RuntimeError):
    """Instance too large for exact enumeration."""


@dataclass(frozen=True, eq=False)
class DiscreteInstance:
    """A fully specified small bandit world enabling exact enumeration.

    Fields: context law ``p_x``, cluster map ``cluster_of``, evaluation and
    logging policy tables ``pi``/``pi0``, and Bernoulli reward means ``q``.
    ``action_embeddings`` optionally attaches a deterministic category per
    action for joint cluster/embedding checks. Derived quantities are
    recomputed on demand, never stored.
    """

    p_x: np.ndarray
    cluster_of: np.ndarray
    pi: np.ndarray
    pi0: np.ndarray
    q: np.ndarray
    action_embeddings: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        set_ = object.__setattr__
        set_(self, "p_x", np.asarray(self.p_x, dtype=np.float64))
        set_(self, "cluster_of", np.asarray(self.cluster_of, dtype=np.int64))
        for name in ("pi", "pi0", "q"):
            set_(self, name, np.atleast_2d(np.asarray(getattr(self, name), dtype=np.float64)))
        if self.action_embeddings is not None:
            set_(self, "action_embeddings", np.asarray(self.action_embeddings, dtype=np.int64))
        m, a = self.pi.shape
        if m * a > ENUMERATION_CAP:
            raise EnumerationLimitError(
                f"{m} contexts x {a} actions exceeds the {ENUMERATION_CAP}-atom enumeration cap")
        if self.p_x.shape != (m,) or self.cluster_of.shape != (m,):
            raise DataValidationError("p_x and cluster_of must have one entry per context")
        if self.pi0.shape != (m, a) or self.q.shape != (m, a):
            raise DataValidationError("pi, pi0 and q must share one shape")
        if abs(self.p_x.sum() - 1.0) > 1e-9 or (self.p_x < 0).any():
            raise DataValidationError("p_x is not a probability vector")
        for name in ("pi", "pi0"):
            rows = getattr(self, name)
            if (rows < 0).any() or np.abs(rows.sum(axis=1) - 1.0).max() > 1e-9:
                raise DataValidationError(f"{name} rows must be distributions")
        if (self.q < 0).any() or (self.q > 1).any():
            raise DataValidationError("q entries must lie in [0, 1] (Bernoulli means)")

    @property
    def n_contexts(self) -> int:
        return int(self.pi.shape[0])

    @property
    def n_actions(self) -> int:
        return int(self.pi.shape[1])

    @property
    def n_clusters(self) -> int:
        return int(self.cluster_of.max()) + 1

    # -- derived distributions -------------------------------------------

    def p_c(self) -> np.ndarray:
        return np.bincount(self.cluster_of, weights=self.p_x, minlength=self.n_clusters)

    def p_x_given_c(self) -> np.ndarray:
        """p(x | c(x)) for every context, zero where the cluster has no mass."""
        pc = self.p_c()[self.cluster_of]
        out = np.zeros_like(self.p_x)
        np.divide(self.p_x, pc, out=out, where=pc > 0)
        return out

    def cluster_marginal(self, policy: str) -> np.ndarray:
        """p(a|c, policy): within-cluster p(x|c)-weighted average of rows."""
        rows = self.pi if policy == "eval" else self.pi0
        weighted = rows * self.p_x_given_c()[:, None]
        out = np.zeros((self.n_clusters, self.n_actions))
        np.add.at(out, self.cluster_of, weighted)
        return out

    def cluster_reward(self) -> np.ndarray:
        """p(x|c)-weighted mean reward per (cluster, action) cell."""
        weighted = self.q * self.p_x_given_c()[:, None]
        out = np.zeros((self.n_clusters, self.n_actions))
        np.add.at(out, self.cluster_of, weighted)
        return out

    def rewards_cluster_constant(self, atol: float = 1e-12) -> bool:
        """Whether q depends on the context only through its cluster."""
        return bool(np.abs(self.q - self.cluster_reward()[self.cluster_of]).max() <= atol)

    def embedding_marginal(self, policy: str) -> np.ndarray:
        """p(e|x, policy) for the deterministic action embedding."""
        if self.action_embeddings is None:
            raise DataValidationError("instance carries no action embeddings")
        rows = self.pi if policy == "eval" else self.pi0
        n_emb = int(self.action_embeddings.max()) + 1
        out = np.zeros((self.n_contexts, n_emb))
        np.add.at(out.T, self.action_embeddings, rows.T)
        return out

    # -- serialization -----------------------------------------------------

    def to_json(self) -> str:
        doc = {
            "p_x": self.p_x.tolist(),
            "cluster_of": self.cluster_of.tolist(),
            "pi": self.pi.tolist(),
            "pi0": self.pi0.tolist(),
            "q": self.q.tolist(),
        }
        if self.action_embeddings is not None:
            doc["action_embeddings"] = self.action_embeddings.tolist()
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "DiscreteInstance":
        doc = json.loads(text)
        return cls(
            p_x=doc["p_x"], cluster_of=doc["cluster_of"], pi=doc["pi"],
            pi0=doc["pi0"], q=doc["q"],
            action_embeddings=doc.get("action_embeddings"),
        )


def true_value(inst: DiscreteInstance) -> float:
    """Exact policy value sum(x) p_x sum(a) pi(a|x) q(x, a)."""
    return float(np.einsum("x,xa,xa->", inst.p_x, inst.pi, inst.q))


def cluster_form_value(inst: DiscreteInstance) -> float:
    """Policy value in cluster form: sum(c) p(c) sum(a) p(a|c, pi) q(a, c).

    Equals :func:`true_value` exactly when rewards are cluster-constant.
    """
    return float((inst.p_c()[:, None] * inst.cluster_marginal("eval") * inst.cluster_reward()).sum())


def per_sample_weights(inst: DiscreteInstance, estimator: str) -> np.ndarray:
    """Population weight W[x, a] each estimator applies to a logged (x, a).

    Zero where the logging probability of the atom is zero (those atoms are
    never observed, so the value is irrelevant to any expectation).
    """
    if estimator == "ips":
        w = np.zeros_like(inst.pi)
        np.divide(inst.pi, inst.pi0, out=w, where=inst.pi0 > 0)
        return w
    if estimator in ("chips", "chips-ml"):
        num = inst.cluster_marginal("eval")[inst.cluster_of]
        den = inst.cluster_marginal("log")[inst.cluster_of]
        w = np.zeros_like(num)
        np.divide(num, den, out=w, where=den > 0)
        return w
    if estimator == "mips":
        emb = inst.action_embeddings
        if emb is None:
            raise DataValidationError("mips weights need action embeddings")
        num = inst.embedding_marginal("eval")[:, emb]
        den = inst.embedding_marginal("log")[:, emb]
        w = np.zeros_like(num)
        np.divide(num, den, out=w, where=den > 0)
        return w
    raise ValueError(f"unsupported estimator {estimator!r} (requires a fitted model)")


def exact_moments(inst: DiscreteInstance, estimator: str, n: int = 1) -> tuple[float, float]:
    """Exact mean and variance of the n-sample estimator under the logging policy.

    For ``n == 1`` every (x, a, r in {0, 1}) outcome is enumerated with its
    exact probability; i.i.d. averaging then scales the variance by ``1/n``.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    w = per_sample_weights(inst, estimator)
    atom = inst.p_x[:, None] * inst.pi0
    mean1 = float((atom * w * inst.q).sum())
    second1 = float((atom * w * w * inst.q).sum())  # r^2 = r for Bernoulli rewards
    return mean1, (second1 - mean1 ** 2) / n


def deficient_actions_per_cluster(inst: DiscreteInstance) -> np.ndarray:
    """Boolean (K, A): actions with zero cluster-level logging probability."""
    return inst.cluster_marginal("log") == 0


def exact_bias_deficient(inst: DiscreteInstance, estimator: str) -> float:
    """Closed-form absolute bias under deficient logging support.

    Requires cluster-constant rewards; both estimators underestimate, so
    the absolute value equals the deficient probability mass they miss:
    the per-context mass ``sum_x p(x) sum_{a: pi0(a|x)=0} pi(a|x) q`` for
    IPS, the cluster-level analogue over ``p(a|c, pi0) = 0`` for the
    cluster-huddled estimator.
    """
    if not inst.rewards_cluster_constant():
        raise DataValidationError(
            "closed-form deficiency bias needs rewards constant within each cluster")
    if estimator == "ips":
        mask = inst.pi0 == 0
        return float((inst.p_x[:, None] * inst.pi * inst.q * mask).sum())
    if estimator in ("chips", "chips-ml"):
        mask = deficient_actions_per_cluster(inst)
        table = inst.p_c()[:, None] * inst.cluster_marginal("eval") * inst.cluster_reward()
        return float(table[mask].sum())
    raise ValueError(f"unsupported estimator {estimator!r}")


def bias_difference_deficient(inst: DiscreteInstance) -> float:
    """Closed form for |bias(IPS)| - |bias(cluster estimator)|.

    Sums, over actions deficient for some contexts but not for their whole
    cluster, the per-context deficient probability mass weighted by the
    cluster reward.
    """
    if not inst.rewards_cluster_constant():
        raise DataValidationError("the bias difference needs cluster-constant rewards")
    cluster_mask = deficient_actions_per_cluster(inst)[inst.cluster_of]
    context_mask = (inst.pi0 == 0) & ~cluster_mask
    q_bar = inst.cluster_reward()[inst.cluster_of]
    return float((inst.p_x[:, None] * inst.pi * q_bar * context_mask).sum())


@dataclass(frozen=True)
class DeltaBounds:
    """Per (cluster, action) homogeneity envelopes and the induced bias bound."""

    lower_eval: np.ndarray
    upper_eval: np.ndarray
    lower_log: np.ndarray
    upper_log: np.ndarray
    spread: np.ndarray
    bias_bound: float


def _policy_ratio_envelope(inst: DiscreteInstance, policy: str) -> tuple[np.ndarray, np.ndarray]:
    rows = inst.pi if policy == "eval" else inst.pi0
    marginal = inst.cluster_marginal(policy)
    lower = np.full((inst.n_clusters, inst.n_actions), np.inf)
    upper = np.full((inst.n_clusters, inst.n_actions), -np.inf)
    for c in range(inst.n_clusters):
        probs = rows[inst.cluster_of == c]
        zero_marginal = marginal[c] == 0
        safe = np.where(zero_marginal, 1.0, marginal[c])
        ratio = probs / safe[None, :]
        # a zero marginal with zero numerators is vacuous: the (c, a) pair
        # carries no mass, so its envelope is pinned at 1
        ratio[:, zero_marginal] = 1.0
        unbounded = zero_marginal & (probs.max(axis=0) > 0)
        lower[c] = ratio.min(axis=0)
        upper[c] = ratio.max(axis=0)
        upper[c, unbounded] = np.inf
    return lower, upper


def delta_bounds(inst: DiscreteInstance) -> DeltaBounds:
    """Homogeneity envelopes of pi(a|x) / p(a|c, policy) and the bias bound.

    ``spread[c, a]`` is the largest upper envelope across both policies
    minus the smallest lower envelope; the bound is the expectation of
    ``q * spread`` under ``p(c) p(x|c) p(a|c, pi)``. A (c, a) pair whose
    cluster marginal vanishes while some member context still plays the
    action is reported unbounded (infinite upper envelope).
    """
    lo_e, up_e = _policy_ratio_envelope(inst, "eval")
    lo_l, up_l = _policy_ratio_envelope(inst, "log")
    spread = np.maximum(up_e, up_l) - np.minimum(lo_e, lo_l)
    q_bar = inst.cluster_reward()
    table = inst.p_c()[:, None] * inst.cluster_marginal("eval") * q_bar * spread
    finite = np.isfinite(table)
    bound = float(np.abs(table[finite].sum())) if finite.all() else float("inf")
    return DeltaBounds(lo_e, up_e, lo_l, up_l, spread, bound)


def _require_common_support(inst: DiscreteInstance) -> None:
    if ((inst.pi > 0) & (inst.pi0 == 0)).any():
        raise DataValidationError(
            "common support fails: some action has evaluation mass but zero logging mass")


def variance_gap(inst: DiscreteInstance) -> float:
    """Closed-form n * (Var[IPS] - Var[cluster estimator]).

    Computed as the expectation, under ``p(c) p(a|c, pi0)``, of the
    variance of the per-context weights conditional on (a, c) times the
    second reward moment. Requires common support and cluster-constant
    rewards; the result is nonnegative by construction.
    """
    _require_common_support(inst)
    if not inst.rewards_cluster_constant():
        raise DataValidationError("the variance identity needs cluster-constant rewards")
    p_xc = inst.p_x_given_c()
    marg_log = inst.cluster_marginal("log")
    q_bar = inst.cluster_reward()
    w = per_sample_weights(inst, "ips")
    total = 0.0
    for c in range(inst.n_clusters):
        members = np.where(inst.cluster_of == c)[0]
        cond = p_xc[members, None] * inst.pi0[members]  # unnormalized pi0(x|a,c)
        denom = marg_log[c]
        with np.errstate(invalid="ignore", divide="ignore"):
            cond = np.where(denom[None, :] > 0, cond / denom[None, :], 0.0)
        mean_w = (cond * w[members]).sum(axis=0)
        mean_w2 = (cond * w[members] ** 2).sum(axis=0)
        var_w = mean_w2 - mean_w ** 2
        total += inst.p_c()[c] * float((marg_log[c] * var_w * q_bar[c]).sum())
    return total


def mse_identity_residual(inst: DiscreteInstance, n: int = 1) -> float:
    """Residual of: MSE(IPS) - MSE(cluster est.) = Var gap - bias(cluster)^2.

    The identity holds exactly when IPS is unbiased (common support); the
    residual then reduces to accumulated rounding, and in general it equals
    the squared IPS bias.
    """
    v = true_value(inst)
    mean_i, var_i = exact_moments(inst, "ips", n)
    mean_c, var_c = exact_moments(inst, "chips", n)
    mse_i = (mean_i - v) ** 2 + var_i
    mse_c = (mean_c - v) ** 2 + var_c
    return (mse_i - mse_c) - (var_i - var_c - (mean_c - v) ** 2)


def variance_ordering(inst: DiscreteInstance) -> tuple[float, float, float]:
    """Single-sample variances of (IPS, MIPS, cluster estimator)."""
    return (exact_moments(inst, "ips")[1],
            exact_moments(inst, "mips")[1],
            exact_moments(inst, "chips")[1])


def embedding_bias_difference(inst: DiscreteInstance) -> float:
    """Closed form of |bias(MIPS)| - |bias(cluster estimator)|.

    First term: evaluation mass on embedding categories with zero logging
    probability, weighted by the (context, embedding) reward. Second term:
    the cluster-level deficiency mass. Requires rewards measurable with
    respect to (cluster, embedding).
    """
    if inst.action_embeddings is None:
        raise DataValidationError("needs action embeddings")
    emb = inst.action_embeddings
    q_xe_full = inst.q  # constant across actions sharing a category, checked below
    for e in range(int(emb.max()) + 1):
        cols = np.where(emb == e)[0]
        if cols.size > 1 and np.abs(inst.q[:, cols] - inst.q[:, cols[:1]]).max() > 1e-12:
            raise DataValidationError("rewards must not depend on the action given its category")
    marg_eval = inst.embedding_marginal("eval")
    marg_log = inst.embedding_marginal("log")
    q_xe = np.zeros_like(marg_eval)
    for e in range(int(emb.max()) + 1):
        q_xe[:, e] = q_xe_full[:, np.where(emb == e)[0][0]]
    mips_term = float((inst.p_x[:, None] * marg_eval * q_xe * (marg_log == 0)).sum())
    chips_term = exact_bias_deficient(inst, "chips")
    return mips_term - chips_term


def mr_shift_bias_residual(inst: DiscreteInstance, epsilon: float) -> float:
    """Residual of the constant-shift weight-regression bias identity.

    If the regressed weights equal the true weights plus a constant shift,
    the resulting estimator's bias equals the IPS bias plus the shift times
    the expected logged reward. Returns the enumerated difference between
    the two sides.
    """
    v = true_value(inst)
    w = per_sample_weights(inst, "ips") + epsilon
    atom = inst.p_x[:, None] * inst.pi0
    shifted_mean = float((atom * w * inst.q).sum())
    logged_reward = float((atom * inst.q).sum())
    ips_bias = exact_moments(inst, "ips")[0] - v
    return (shifted_mean - v) - (ips_bias + epsilon * logged_reward)


# ---------------------------------------------------------------------------
# random instance generators (test fixtures and the verify command)


def _positive_rows(rng: np.random.Generator, n: int, a: int, floor: float = 0.2) -> np.ndarray:
    """Dirichlet rows blended with uniform mass to keep weights moderate."""
    rows = rng.dirichlet(np.full(a, 1.5), size=n)
    return (1 - floor) * rows + floor / a


def _spread_clusters(rng: np.random.Generator, n_contexts: int, n_clusters: int) -> np.ndarray:
    ids = np.concatenate([np.arange(n_clusters),
                          rng.integers(n_clusters, size=n_contexts - n_clusters)])
    return ids[rng.permutation(n_contexts)]


def random_instance(stream: RandomStream, n_contexts: int = 8, n_actions: int = 5,
                    n_clusters: int = 3, homogeneous_rewards: bool = False) -> DiscreteInstance:
    """Random full-support instance; optionally cluster-constant rewards."""
    if n_clusters > n_contexts:
        raise ValueError("need at least one context per cluster")
    rng = stream.generator()
    cluster_of = _spread_clusters(rng, n_contexts, n_clusters)
    if homogeneous_rewards:
        q = rng.uniform(size=(n_clusters, n_actions))[cluster_of]
    else:
        q = rng.uniform(size=(n_contexts, n_actions))
    return DiscreteInstance(
        p_x=rng.dirichlet(np.full(n_contexts, 2.0)),
        cluster_of=cluster_of,
        pi=_positive_rows(rng, n_contexts, n_actions),
        pi0=_positive_rows(rng, n_contexts, n_actions),
        q=q,
    )


def random_deficient_instance(stream: RandomStream, n_contexts: int = 9, n_actions: int = 6,
                              n_clusters: int = 3) -> DiscreteInstance:
    """Homogeneous-reward instance with cluster-level and per-context zeros.

    One action per cluster is removed from every member context (so the
    cluster-level logging marginal vanishes) and one further action is
    removed from a strict subset of the members (a per-context deficiency
    the cluster as a whole still covers).
    """
    rng = stream.generator()
    base = random_instance(stream.substream(1), n_contexts, n_actions, n_clusters,
                           homogeneous_rewards=True)
    pi0 = base.pi0.copy()
    for c in range(n_clusters):
        members = np.where(base.cluster_of == c)[0]
        kill = rng.choice(n_actions, size=2, replace=False)
        pi0[members, kill[0]] = 0.0
        if members.size > 1:
            some = members[: max(1, members.size // 2)]
            pi0[some, kill[1]] = 0.0
    pi0 /= pi0.sum(axis=1, keepdims=True)
    return DiscreteInstance(base.p_x, base.cluster_of, base.pi, pi0, base.q)


def random_common_support_instance(stream: RandomStream, n_contexts: int = 8,
                                   n_actions: int = 5, n_clusters: int = 3,
                                   with_zeros: bool = False,
                                   homogeneous_rewards: bool = False) -> DiscreteInstance:
    """Instance where the logging policy covers the evaluation policy.

    With ``with_zeros`` some (x, a) atoms get zero probability under both
    policies, so logging deficiency exists without breaking common support.
    """
    rng = stream.generator()
    base = random_instance(stream.substream(1), n_contexts, n_actions, n_clusters,
                           homogeneous_rewards=homogeneous_rewards)
    if not with_zeros:
        return base
    pi = base.pi.copy()
    pi0 = base.pi0.copy()
    for x in range(n_contexts):
        if rng.uniform() < 0.5:
            a = rng.integers(n_actions)
            pi[x, a] = 0.0
            pi0[x, a] = 0.0
    pi /= pi.sum(axis=1, keepdims=True)
    pi0 /= pi0.sum(axis=1, keepdims=True)
    return DiscreteInstance(base.p_x, base.cluster_of, pi, pi0, base.q)


def random_joint_instance(stream: RandomStream, n_contexts: int = 8, n_clusters: int = 3,
                          n_embeddings: int = 3, actions_per_embedding: int = 2,
                          embedding_deficient: bool = False) -> DiscreteInstance:
    """Joint cluster/embedding instance for the variance-ordering checks.

    Both policies share the within-category action shares and differ only
    in the per-context category marginals, so the per-sample IPS and MIPS
    weights coincide and the cluster-pooled weight equals the conditional
    expectation of the per-sample weight. Rewards depend on the pair
    (cluster, category) only, satisfying both homogeneity conditions.
    """
    rng = stream.generator()
    n_actions = n_embeddings * actions_per_embedding
    emb = np.repeat(np.arange(n_embeddings), actions_per_embedding)
    cluster_of = _spread_clusters(rng, n_contexts, n_clusters)
    shares = rng.dirichlet(np.full(actions_per_embedding, 2.0), size=n_embeddings)
    cat_eval = _positive_rows(rng, n_contexts, n_embeddings)
    cat_log = _positive_rows(rng, n_contexts, n_embeddings)
    if embedding_deficient:
        for x in range(n_contexts):
            if rng.uniform() < 0.6:
                cat_log[x, rng.integers(n_embeddings)] = 0.0
        cat_log /= cat_log.sum(axis=1, keepdims=True)
    pi = np.empty((n_contexts, n_actions))
    pi0 = np.empty((n_contexts, n_actions))
    for a in range(n_actions):
        e = emb[a]
        slot = a - e * actions_per_embedding
        pi[:, a] = cat_eval[:, e] * shares[e, slot]
        pi0[:, a] = cat_log[:, e] * shares[e, slot]
    q = rng.uniform(size=(n_clusters, n_embeddings))
    return DiscreteInstance(
        p_x=rng.dirichlet(np.full(n_contexts, 2.0)),
        cluster_of=cluster_of,
        pi=pi,
        pi0=pi0,
        q=q[cluster_of][:, emb],
        action_embeddings=emb,
    )
