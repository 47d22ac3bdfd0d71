"""Shared domain types: logged bandit data, tabular policies, estimates, seeded streams."""

from __future__ import annotations

import csv
from dataclasses import InitVar, dataclass, field
from typing import Optional

import numpy as np

ROW_SUM_TOL = 1e-9

_U64 = (1 << 64) - 1


class DataValidationError(ValueError):
    """Logged data violates a structural invariant."""


class CapabilityError(RuntimeError):
    """An estimator needs information the dataset does not carry."""


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _U64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _U64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _U64
    return x ^ (x >> 31)


@dataclass(frozen=True)
class RandomStream:
    """Seeded source of reproducible, independent random generators.

    Equal ``(seed, stream_id)`` pairs reproduce identical draws; distinct
    stream ids give statistically independent streams. ``generator()``
    returns a fresh generator each call, so call sites do not interfere.
    """

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        sid = self.stream_id & _U64
        key = (sid & 0xFFFFFFFF, sid >> 32)
        return np.random.default_rng(np.random.SeedSequence(entropy=self.seed & _U64, spawn_key=key))

    def substream(self, index: int) -> "RandomStream":
        """Derive a stream with a deterministically mixed id."""
        mixed = _splitmix64((self.stream_id & _U64) ^ _splitmix64(index & _U64))
        return RandomStream(self.seed, mixed)


@dataclass(frozen=True, eq=False)
class BanditDataset:
    """Logged bandit feedback with full logging-propensity rows.

    Parameters
    ----------
    contexts: array of shape (n_samples, context_dim)
        Context vectors observed at logging time.
    actions: array of shape (n_samples,)
        Logged action indices in ``[0, n_actions)``.
    rewards: array of shape (n_samples,)
        Observed rewards in ``[0, reward_max]``.
    n_actions: int
        Size of the finite action space.
    propensities: array of shape (n_samples, n_actions), optional
        Full logging-policy rows ``pi_0(.|x_i)``. Estimators that pool
        probabilities over actions (CHIPS, MIPS) require these rows; when
        only the logged action's propensity is known this field is None
        and those estimators reject the dataset.
    logged_propensity: array of shape (n_samples,), optional
        ``pi_0(a_i|x_i)``. Derived from ``propensities`` when omitted.
    reward_max: float
        Upper bound of the reward range.
    cluster_ids: array of shape (n_samples,), optional
        Precomputed context-cluster assignments in ``[0, n_clusters)``.
    action_embeddings: array of shape (n_actions,), optional
        Deterministic categorical embedding per action; ``-1`` marks an
        action whose category is unknown.
    """

    contexts: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    n_actions: int
    propensities: Optional[np.ndarray] = None
    logged_propensity: Optional[np.ndarray] = None
    reward_max: float = 1.0
    cluster_ids: Optional[np.ndarray] = None
    n_clusters: Optional[int] = None
    action_embeddings: Optional[np.ndarray] = None
    n_embeddings: Optional[int] = None
    validate: InitVar[bool] = True

    def __post_init__(self, validate: bool) -> None:
        set_ = object.__setattr__
        set_(self, "contexts", np.atleast_2d(np.asarray(self.contexts, dtype=np.float64)))
        set_(self, "actions", np.asarray(self.actions, dtype=np.int64))
        set_(self, "rewards", np.asarray(self.rewards, dtype=np.float64))
        n = self.actions.shape[0]
        if self.contexts.shape[0] != n and n == 0:
            set_(self, "contexts", self.contexts.reshape(0, max(1, self.contexts.shape[-1])))
        if self.propensities is not None:
            set_(self, "propensities", np.asarray(self.propensities, dtype=np.float64))
        if self.logged_propensity is None and self.propensities is not None and n > 0:
            set_(self, "logged_propensity", self.propensities[np.arange(n), self.actions])
        elif self.logged_propensity is None and self.propensities is not None:
            set_(self, "logged_propensity", np.zeros(0))
        if self.logged_propensity is not None:
            set_(self, "logged_propensity", np.asarray(self.logged_propensity, dtype=np.float64))
        if self.cluster_ids is not None:
            set_(self, "cluster_ids", np.asarray(self.cluster_ids, dtype=np.int64))
        if self.action_embeddings is not None:
            set_(self, "action_embeddings", np.asarray(self.action_embeddings, dtype=np.int64))

        self._check_shapes()
        if validate:
            violations = validate_dataset(self)
            if violations:
                raise DataValidationError("; ".join(violations))
        for name in ("contexts", "actions", "rewards", "propensities", "logged_propensity",
                     "cluster_ids", "action_embeddings"):
            arr = getattr(self, name)
            if arr is not None:
                arr.setflags(write=False)

    def _check_shapes(self) -> None:
        n = self.n_samples
        if self.rewards.shape != (n,):
            raise DataValidationError(f"rewards shape {self.rewards.shape} != ({n},)")
        if self.contexts.shape[0] != n:
            raise DataValidationError(f"contexts have {self.contexts.shape[0]} rows, expected {n}")
        if self.propensities is not None and self.propensities.shape != (n, self.n_actions):
            raise DataValidationError(
                f"propensities shape {self.propensities.shape} != ({n}, {self.n_actions})")
        if self.logged_propensity is not None and self.logged_propensity.shape != (n,):
            raise DataValidationError("logged_propensity length mismatch")
        if self.propensities is None and self.logged_propensity is None and n > 0:
            raise DataValidationError("either propensities or logged_propensity is required")
        if self.cluster_ids is not None and self.cluster_ids.shape != (n,):
            raise DataValidationError("cluster_ids length mismatch")
        if self.action_embeddings is not None and self.action_embeddings.shape != (self.n_actions,):
            raise DataValidationError("action_embeddings must have one entry per action")

    @property
    def n_samples(self) -> int:
        return int(self.actions.shape[0])

    @property
    def context_dim(self) -> int:
        return int(self.contexts.shape[1])

    @property
    def has_full_propensities(self) -> bool:
        return self.propensities is not None

    def subset(self, indices: np.ndarray) -> "BanditDataset":
        """Row subset (used by bootstrap resampling); validation is skipped."""
        indices = np.asarray(indices)
        return BanditDataset(
            contexts=self.contexts[indices],
            actions=self.actions[indices],
            rewards=self.rewards[indices],
            n_actions=self.n_actions,
            propensities=None if self.propensities is None else self.propensities[indices],
            logged_propensity=None if self.logged_propensity is None else self.logged_propensity[indices],
            reward_max=self.reward_max,
            cluster_ids=None if self.cluster_ids is None else self.cluster_ids[indices],
            n_clusters=self.n_clusters,
            action_embeddings=self.action_embeddings,
            n_embeddings=self.n_embeddings,
            validate=False,
        )


def validate_dataset(d: BanditDataset) -> list[str]:
    """Return all invariant violations, each naming the invariant and sample index.

    Total function: an empty list means every dataset invariant holds.
    """
    out: list[str] = []
    n = d.n_samples
    if n > 0:
        bad = np.where((d.actions < 0) | (d.actions >= d.n_actions))[0]
        for i in bad[:10]:
            out.append(f"action-range: sample {i} has action {d.actions[i]} outside [0, {d.n_actions})")
    if d.propensities is not None and n > 0:
        sums = d.propensities.sum(axis=1)
        bad = np.where(np.abs(sums - 1.0) > ROW_SUM_TOL)[0]
        for i in bad[:10]:
            out.append(f"propensity-row-sum: sample {i} sums to {sums[i]:.9f} (expected 1 within {ROW_SUM_TOL})")
        bad = np.where((d.propensities < 0).any(axis=1))[0]
        for i in bad[:10]:
            out.append(f"propensity-nonnegative: sample {i} has a negative entry")
    if d.logged_propensity is not None and n > 0:
        bad = np.where(d.logged_propensity <= 0)[0]
        for i in bad[:10]:
            out.append(f"logged-propensity-positive: sample {i} has pi_0(a_i|x_i) = {d.logged_propensity[i]}")
    if n > 0:
        bad = np.where((d.rewards < 0) | (d.rewards > d.reward_max))[0]
        for i in bad[:10]:
            out.append(f"reward-range: sample {i} has reward {d.rewards[i]} outside [0, {d.reward_max}]")
    if d.cluster_ids is not None and n > 0:
        k = d.n_clusters if d.n_clusters is not None else int(d.cluster_ids.max()) + 1
        bad = np.where((d.cluster_ids < 0) | (d.cluster_ids >= k))[0]
        for i in bad[:10]:
            out.append(f"cluster-range: sample {i} has cluster id {d.cluster_ids[i]} outside [0, {k})")
    if d.action_embeddings is not None and d.n_embeddings is not None:
        known = d.action_embeddings[d.action_embeddings >= 0]
        if known.size and known.max() >= d.n_embeddings:
            out.append(f"embedding-range: category {known.max()} outside [0, {d.n_embeddings})")
    return out


@dataclass(frozen=True, eq=False)
class PolicyTable:
    """Full conditional distribution pi(a|x) over a finite context universe."""

    probs: np.ndarray

    def __post_init__(self) -> None:
        probs = np.atleast_2d(np.asarray(self.probs, dtype=np.float64))
        object.__setattr__(self, "probs", probs)
        if probs.size:
            if (probs < 0).any():
                raise DataValidationError("policy table has a negative entry")
            sums = probs.sum(axis=1)
            bad = np.where(np.abs(sums - 1.0) > ROW_SUM_TOL)[0]
            if bad.size:
                raise DataValidationError(
                    f"policy-row-sum: row {bad[0]} sums to {sums[bad[0]]:.9f}")
        probs.setflags(write=False)

    @property
    def n_contexts(self) -> int:
        return int(self.probs.shape[0])

    @property
    def n_actions(self) -> int:
        return int(self.probs.shape[1])

    def row(self, index: int) -> np.ndarray:
        return self.probs[index]


@dataclass(frozen=True, eq=False)
class TablePolicy:
    """Policy evaluator backed by a finite context universe.

    Maps a raw context vector to its policy row via exact row matching
    against the stored universe, implementing the context -> probability-row
    interface expected by the estimators.
    """

    contexts: np.ndarray
    table: PolicyTable
    _index: dict = field(init=False, repr=False)

    def __post_init__(self) -> None:
        contexts = np.atleast_2d(np.asarray(self.contexts, dtype=np.float64))
        object.__setattr__(self, "contexts", contexts)
        if contexts.shape[0] != self.table.n_contexts:
            raise DataValidationError("policy table and context universe disagree on size")
        index = {row.tobytes(): i for i, row in enumerate(contexts)}
        object.__setattr__(self, "_index", index)

    def context_indices(self, contexts: np.ndarray) -> np.ndarray:
        contexts = np.atleast_2d(np.asarray(contexts, dtype=np.float64))
        try:
            return np.fromiter((self._index[row.tobytes()] for row in contexts),
                               dtype=np.int64, count=contexts.shape[0])
        except KeyError:
            raise KeyError("context not found in the policy's finite universe") from None

    def action_probabilities(self, contexts: np.ndarray) -> np.ndarray:
        return self.table.probs[self.context_indices(contexts)]


@dataclass(frozen=True, eq=False)
class Estimate:
    """A single policy-value estimate.

    ``per_sample_terms`` holds the summands before averaging for
    plain-average estimators; self-normalized estimators omit it.
    """

    value: float
    estimator_name: str
    per_sample_terms: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if self.per_sample_terms is not None:
            terms = np.asarray(self.per_sample_terms, dtype=np.float64)
            object.__setattr__(self, "per_sample_terms", terms)
            if terms.size and abs(float(terms.mean()) - self.value) > 1e-12:
                raise DataValidationError(
                    "estimate value disagrees with the mean of its per-sample terms")


@dataclass(frozen=True)
class CsvSchema:
    """Column mapping for the logged-data CSV format.

    The canonical header is
    ``x_0,...,x_{d-1},action,reward,p0_0,...,p0_{A-1}[,cluster][,embedding]``;
    a single ``p0`` column may replace the full propensity block, in which
    case the loaded dataset carries only the logged action's propensity.
    """

    context_prefix: str = "x"
    action: str = "action"
    reward: str = "reward"
    propensity_prefix: str = "p0"
    cluster: str = "cluster"
    embedding: str = "embedding"
    reward_max: float = 1.0
    n_clusters: Optional[int] = None


def _indexed_columns(header: list[str], prefix: str) -> list[int]:
    """Positions of prefix_0..prefix_{k-1}; raises if the sequence has gaps."""
    tagged = {}
    for pos, name in enumerate(header):
        if name.startswith(prefix + "_"):
            suffix = name[len(prefix) + 1:]
            if not suffix.isdigit():
                raise DataValidationError(f"malformed header column {name!r}")
            tagged[int(suffix)] = pos
    if tagged and sorted(tagged) != list(range(len(tagged))):
        raise DataValidationError(f"header columns {prefix}_* are not contiguous from 0")
    return [tagged[i] for i in sorted(tagged)]


def load_bandit_csv(path, schema: Optional[CsvSchema] = None) -> BanditDataset:
    """Load logged bandit data from the header-driven CSV format.

    Raises ``DataValidationError`` with a line number on malformed rows,
    out-of-range rewards, or non-positive logged-action propensities.
    """
    schema = schema or CsvSchema()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataValidationError("empty file: missing header") from None
        header = [h.strip() for h in header]

        x_cols = _indexed_columns(header, schema.context_prefix)
        if not x_cols:
            raise DataValidationError(f"no context columns {schema.context_prefix}_* in header")
        p_cols = _indexed_columns(header, schema.propensity_prefix)
        single_p = schema.propensity_prefix in header if not p_cols else False
        if not p_cols and not single_p:
            raise DataValidationError("header declares no propensity columns")
        for name in (schema.action, schema.reward):
            if name not in header:
                raise DataValidationError(f"header is missing the {name!r} column")
        known = set(x_cols) | set(p_cols)
        known |= {header.index(schema.action), header.index(schema.reward)}
        if single_p:
            known.add(header.index(schema.propensity_prefix))
        cluster_col = header.index(schema.cluster) if schema.cluster in header else None
        embed_col = header.index(schema.embedding) if schema.embedding in header else None
        for col in (cluster_col, embed_col):
            if col is not None:
                known.add(col)
        unknown = [header[i] for i in range(len(header)) if i not in known]
        if unknown:
            raise DataValidationError(f"unknown header columns: {unknown}")

        a_col = header.index(schema.action)
        r_col = header.index(schema.reward)
        n_actions = len(p_cols) if p_cols else None

        contexts, actions, rewards, prop_rows, logged_p = [], [], [], [], []
        clusters, embed_pairs = [], []
        for line_no, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != len(header):
                raise DataValidationError(
                    f"line {line_no}: expected {len(header)} fields, found {len(row)}")
            try:
                x = [float(row[c]) for c in x_cols]
                a = int(row[a_col])
                r = float(row[r_col])
                if p_cols:
                    p = [float(row[c]) for c in p_cols]
                else:
                    p = None
                    lp = float(row[header.index(schema.propensity_prefix)])
                if cluster_col is not None:
                    clusters.append(int(row[cluster_col]))
                if embed_col is not None:
                    embed_pairs.append((a, int(row[embed_col])))
            except ValueError as exc:
                raise DataValidationError(f"line {line_no}: {exc}") from None
            if r < 0 or r > schema.reward_max:
                raise DataValidationError(
                    f"line {line_no}: reward {r} outside [0, {schema.reward_max}]")
            if p is not None:
                if n_actions is not None and not 0 <= a < n_actions:
                    raise DataValidationError(f"line {line_no}: action {a} outside [0, {n_actions})")
                if p[a] <= 0:
                    raise DataValidationError(
                        f"line {line_no}: logged action {a} has propensity {p[a]} <= 0")
                prop_rows.append(p)
            else:
                if lp <= 0:
                    raise DataValidationError(
                        f"line {line_no}: logged action {a} has propensity {lp} <= 0")
                logged_p.append(lp)
            contexts.append(x)
            actions.append(a)
            rewards.append(r)

    n = len(actions)
    if n_actions is None:
        n_actions = (max(actions) + 1) if actions else 1
    embeddings = None
    n_embeddings = None
    if embed_col is not None:
        embeddings = np.full(n_actions, -1, dtype=np.int64)
        for a, e in embed_pairs:
            if embeddings[a] not in (-1, e):
                raise DataValidationError(
                    f"action {a} maps to two embedding categories ({embeddings[a]} and {e})")
            embeddings[a] = e
        if (embeddings >= 0).any():
            n_embeddings = int(embeddings.max()) + 1
    return BanditDataset(
        contexts=np.asarray(contexts, dtype=np.float64).reshape(n, len(x_cols)),
        actions=np.asarray(actions, dtype=np.int64),
        rewards=np.asarray(rewards, dtype=np.float64),
        n_actions=n_actions,
        propensities=np.asarray(prop_rows, dtype=np.float64).reshape(n, n_actions) if prop_rows or p_cols else None,
        logged_propensity=np.asarray(logged_p, dtype=np.float64) if logged_p or not p_cols else None,
        reward_max=schema.reward_max,
        cluster_ids=np.asarray(clusters, dtype=np.int64) if cluster_col is not None else None,
        n_clusters=schema.n_clusters,
        action_embeddings=embeddings,
        n_embeddings=n_embeddings,
    )


def write_bandit_csv(path, d: BanditDataset, schema: Optional[CsvSchema] = None) -> None:
    """Write a dataset in the canonical CSV format (full float precision)."""
    schema = schema or CsvSchema()
    header = [f"{schema.context_prefix}_{i}" for i in range(d.context_dim)]
    header += [schema.action, schema.reward]
    if d.propensities is not None:
        header += [f"{schema.propensity_prefix}_{i}" for i in range(d.n_actions)]
    else:
        header += [schema.propensity_prefix]
    if d.cluster_ids is not None:
        header.append(schema.cluster)
    if d.action_embeddings is not None:
        header.append(schema.embedding)

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(d.n_samples):
            row = [repr(float(v)) for v in d.contexts[i]]
            row += [str(int(d.actions[i])), repr(float(d.rewards[i]))]
            if d.propensities is not None:
                row += [repr(float(v)) for v in d.propensities[i]]
            else:
                row += [repr(float(d.logged_propensity[i]))]
            if d.cluster_ids is not None:
                row.append(str(int(d.cluster_ids[i])))
            if d.action_embeddings is not None:
                row.append(str(int(d.action_embeddings[d.actions[i]])))
            writer.writerow(row)
