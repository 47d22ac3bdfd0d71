"""Monte Carlo experiment engine: seeded sweeps, bootstrap ECDF curves,
prior-strength selection, classification-to-bandit conversion, timing runs."""

from __future__ import annotations

import csv
import importlib.resources
import json
import time
from dataclasses import dataclass, field, fields, replace
from typing import Optional, Sequence

import numpy as np
from joblib import Parallel, delayed
from sklearn.linear_model import LogisticRegression

from .clustering import ClusterModel, fit_minibatch_kmeans
from .core import BanditDataset, DataValidationError, RandomStream
from .estimators import (
    needs_clusters,
    needs_reward_model,
    resolve_policy,
    run_estimator,
    fit_reward_model,
)
from .synthgen import SynthConfig, generate_world, sample_logged_data, true_policy_value

_CONFIG_FIELDS = {f.name for f in fields(SynthConfig)}


@dataclass
class SweepSpec:
    """A replicated sweep over one generation or estimation parameter.

    ``parameter`` must name a :class:`SynthConfig` field or an estimator
    option key; in the latter case the grid value is injected into every
    estimator's option block.
    """

    base: SynthConfig
    parameter: str
    grid: Sequence
    estimators: Sequence[tuple[str, dict]]
    replications: int = 100
    seed: int = 0
    n_jobs: int = 1
    reward_model_family: str = "forest"

    def __post_init__(self) -> None:
        if self.replications < 1:
            raise ValueError("replications must be at least 1")
        known_options = {"alpha", "beta_hat", "lambda", "tau", "n_bins", "n_clusters"}
        if self.parameter not in _CONFIG_FIELDS and self.parameter not in known_options:
            raise ValueError(f"parameter {self.parameter!r} is neither a generation "
                             f"field nor a known estimator option")
        names = [name for name, _ in self.estimators]
        if len(set(names)) != len(names):
            raise ValueError("estimator names must be unique within a sweep")


@dataclass
class SweepCell:
    """Aggregate results for one (parameter value, estimator) pair.

    The error decomposition uses per-seed errors against each seed's own
    exact ground truth, so ``mse == squared_bias + variance`` holds exactly
    even though every replication regenerates the world.
    """

    parameter: str
    value: object
    estimator: str
    mse: float
    squared_bias: float
    variance: float
    mean_estimate: float
    std_across_seeds: float
    rel_mse_vs_ips: float
    n_seeds: int
    estimates: np.ndarray
    true_values: np.ndarray


@dataclass
class EstimateReport:
    cells: list[SweepCell] = field(default_factory=list)

    def cell(self, value, estimator: str) -> SweepCell:
        for c in self.cells:
            if c.value == value and c.estimator == estimator:
                return c
        raise KeyError((value, estimator))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["param", "value", "estimator", "mse", "bias2",
                             "variance", "rel_mse_ips", "n_seeds"])
            for c in self.cells:
                writer.writerow([c.parameter, c.value, c.estimator, repr(c.mse),
                                 repr(c.squared_bias), repr(c.variance),
                                 repr(c.rel_mse_vs_ips), c.n_seeds])


def _prepare_estimators(spec: SweepSpec, value) -> list[tuple[str, dict]]:
    est = [(name, dict(opts)) for name, opts in spec.estimators]
    if spec.parameter not in _CONFIG_FIELDS:
        for _, opts in est:
            opts[spec.parameter] = value
    if not any(name == "ips" for name, _ in est):
        est.append(("ips", {}))
    return est


def _one_replication(cfg: SynthConfig, estimators, stream: RandomStream,
                     reward_model_family: str):
    world = generate_world(cfg, stream.substream(0))
    truth = true_policy_value(world)
    data = sample_logged_data(world, cfg.n_samples, "log", stream.substream(1))
    eval_probs = world.pi_eval.probs[world.context_indices(data.contexts)]

    # one clustering per requested cluster count (the sweep may vary it as
    # an estimator option, overriding the config default)
    ids_by_k: dict[int, np.ndarray] = {}
    for name, opts in estimators:
        if needs_clusters(name):
            k = min(int(opts.get("n_clusters", cfg.emp_c_num)), data.n_samples)
            if k not in ids_by_k:
                model = fit_minibatch_kmeans(data.contexts, k, stream=stream.substream(2))
                ids_by_k[k] = model.assign(data.contexts)
    reward_model = None
    if any(needs_reward_model(name) for name, _ in estimators):
        reward_model = fit_reward_model(data, family=reward_model_family,
                                        stream=stream.substream(3))

    values = {}
    for name, opts in estimators:
        cluster_ids = None
        if needs_clusters(name):
            cluster_ids = ids_by_k[min(int(opts.get("n_clusters", cfg.emp_c_num)),
                                       data.n_samples)]
        try:
            est = run_estimator(name, data, eval_probs, reward_model=reward_model,
                                cluster_ids=cluster_ids, options=opts)
            values[name] = est.value
        except Exception:
            values[name] = float("nan")  # a broken cell must not void the sweep
    return truth, values


def run_sweep(spec: SweepSpec) -> EstimateReport:
    """Replicated evaluation against exact ground truth over a parameter grid.

    Every (grid value, seed) pair regenerates the world, refits the
    clusterer (and the reward model where needed) and evaluates all
    estimators against the exact policy value. Deterministic for a fixed
    spec, including under parallel execution.
    """
    root = RandomStream(spec.seed)
    report = EstimateReport()
    for gi, value in enumerate(spec.grid):
        if spec.parameter in _CONFIG_FIELDS:
            cfg = replace(spec.base, **{spec.parameter: value})
        else:
            cfg = spec.base
        estimators = _prepare_estimators(spec, value)
        # replication streams are shared across grid values: when only an
        # estimation-side parameter varies, seed s sees the same world at
        # every grid point, so per-seed comparisons are paired
        jobs = (delayed(_one_replication)(cfg, estimators, root.substream(s),
                                          spec.reward_model_family)
                for s in range(spec.replications))
        results = Parallel(n_jobs=spec.n_jobs)(jobs)

        truths = np.array([t for t, _ in results])
        names = [n for n, _ in estimators]
        per_est = {n: np.array([vals[n] for _, vals in results]) for n in names}
        mse_ips = _nan_mse(per_est["ips"], truths)
        for name in names:
            estimates = per_est[name]
            ok = np.isfinite(estimates)
            errors = estimates[ok] - truths[ok]
            mse = float(np.mean(errors ** 2)) if ok.any() else float("nan")
            bias = float(np.mean(errors)) if ok.any() else float("nan")
            var = float(np.mean((errors - bias) ** 2)) if ok.any() else float("nan")
            report.cells.append(SweepCell(
                parameter=spec.parameter, value=value, estimator=name,
                mse=mse, squared_bias=bias ** 2, variance=var,
                mean_estimate=float(np.mean(estimates[ok])) if ok.any() else float("nan"),
                std_across_seeds=float(np.sqrt(var)) if ok.any() else float("nan"),
                rel_mse_vs_ips=mse / mse_ips if mse_ips > 0 else float("nan"),
                n_seeds=int(ok.sum()),
                estimates=estimates, true_values=truths,
            ))
    return report


def _nan_mse(values: np.ndarray, truths: np.ndarray) -> float:
    ok = np.isfinite(values)
    if not ok.any():
        return float("nan")
    return float(np.mean((values[ok] - truths[ok]) ** 2))


# ---------------------------------------------------------------------------
# bootstrap ECDF protocol


@dataclass
class ECDFCurve:
    """Empirical CDF of the squared-error ratio against IPS.

    ``z`` is sorted (infinite ratios last) and ``f[i] = (i + 1) / T``; the
    curve is a right-continuous step function with terminal value 1.
    """

    estimator: str
    z: np.ndarray
    f: np.ndarray

    def evaluate(self, x: float) -> float:
        return float(np.searchsorted(self.z, x, side="right")) / len(self.z)


def ecdf_protocol(d_log: BanditDataset, d_eval: BanditDataset, pi_eval,
                  estimators: Sequence[tuple[str, dict]], n: int, T: int = 100,
                  stream: RandomStream | None = None,
                  reward_model_family: str = "forest") -> dict[str, ECDFCurve]:
    """Bootstrap comparison of estimators by squared error relative to IPS.

    The target value is the mean reward of the on-policy pool ``d_eval``.
    Each of the T rounds resamples ``n`` logged records with replacement,
    refits per-resample models (clusterer, reward model), evaluates every
    estimator, and records the ratio of its squared error to the squared
    error of IPS on the same resample. A resample where the IPS error is
    exactly zero contributes an infinite ratio, which lands at the right
    end of the curve.
    """
    if d_eval.n_samples == 0:
        raise DataValidationError("the on-policy pool defining the target value is empty")
    stream = stream or RandomStream(0)
    target = float(d_eval.rewards.mean())
    eval_probs_full = resolve_policy(pi_eval, d_log)

    est_list = [(name, dict(opts)) for name, opts in estimators]
    if not any(name == "ips" for name, _ in est_list):
        est_list.append(("ips", {}))

    ratios: dict[str, list[float]] = {name: [] for name, _ in est_list}
    for t in range(T):
        rng = stream.substream(t).generator()
        idx = rng.integers(0, d_log.n_samples, size=n)
        sample = d_log.subset(idx)
        eval_probs = eval_probs_full[idx]

        reward_model = None
        if any(needs_reward_model(name) for name, _ in est_list):
            reward_model = fit_reward_model(sample, family=reward_model_family,
                                            stream=stream.substream(t).substream(1))
        per_cluster_ids: dict[int, np.ndarray] = {}

        errors = {}
        for name, opts in est_list:
            cluster_ids = None
            if needs_clusters(name):
                k = int(opts.get("n_clusters", sample.n_clusters or 10))
                if k not in per_cluster_ids:
                    model = fit_minibatch_kmeans(sample.contexts, min(k, sample.n_samples),
                                                 stream=stream.substream(t).substream(2))
                    per_cluster_ids[k] = model.assign(sample.contexts)
                cluster_ids = per_cluster_ids[k]
            try:
                est = run_estimator(name, sample, eval_probs, reward_model=reward_model,
                                    cluster_ids=cluster_ids, options=opts)
                errors[name] = (target - est.value) ** 2
            except Exception:
                errors[name] = float("nan")
        denom = errors["ips"]
        for name, _ in est_list:
            if denom == 0:
                ratios[name].append(float("inf"))
            else:
                ratios[name].append(errors[name] / denom)

    curves = {}
    for name, zs in ratios.items():
        z = np.sort(np.asarray(zs))
        curves[name] = ECDFCurve(name, z, np.arange(1, len(z) + 1) / len(z))
    return curves


def write_ecdf_csv(path, curves: dict[str, ECDFCurve]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["estimator", "z", "F"])
        for name, curve in curves.items():
            for z, f in zip(curve.z, curve.f):
                writer.writerow([name, repr(float(z)), repr(float(f))])


# ---------------------------------------------------------------------------
# prior-strength selection


@dataclass
class AlphaReference:
    """Lookup table from expected (cluster, action) cell occupancy to alpha.

    ``upper_edges`` are bucket upper bounds (the last is infinite); the
    bucket whose range contains the expected points-per-cell supplies the
    prior strength.
    """

    upper_edges: Sequence[float]
    alphas: Sequence[float]

    def __post_init__(self) -> None:
        if len(self.upper_edges) != len(self.alphas) or not self.alphas:
            raise ValueError("edges and alphas must align and be nonempty")
        if any(a <= 1 for a in self.alphas):
            raise ValueError("every alpha must exceed 1 (posterior mode requirement)")

    def lookup(self, points_per_cell: float) -> float:
        for edge, alpha in zip(self.upper_edges, self.alphas):
            if points_per_cell <= edge:
                return float(alpha)
        return float(self.alphas[-1])

    def to_json(self) -> str:
        return json.dumps({"upper_edges": list(self.upper_edges), "alphas": list(self.alphas)})

    @classmethod
    def from_json(cls, text: str) -> "AlphaReference":
        doc = json.loads(text)
        return cls(doc["upper_edges"], doc["alphas"])


def default_alpha_reference() -> AlphaReference:
    text = importlib.resources.files("chips_ope").joinpath("data/alpha_reference.json").read_text()
    return AlphaReference.from_json(text)


def expected_points_per_cell(d_train: BanditDataset, pi_eval, cluster_model: ClusterModel,
                             stream: RandomStream | None = None) -> float:
    """Average synthetic evaluation draws per occupied (cluster, action) cell."""
    if d_train.n_samples == 0:
        raise DataValidationError("cannot size cells from an empty dataset")
    rng = (stream or RandomStream(0)).generator()
    eval_probs = resolve_policy(pi_eval, d_train)
    ids = cluster_model.assign(d_train.contexts)
    cdf = np.cumsum(eval_probs, axis=1)
    draws = (rng.uniform(size=(d_train.n_samples, 1)) > cdf).sum(axis=1)
    np.clip(draws, 0, d_train.n_actions - 1, out=draws)
    cells = np.unique(ids * d_train.n_actions + draws).size
    return d_train.n_samples / cells


def select_alpha(d_train: BanditDataset, pi_eval, cluster_model: ClusterModel,
                 reference: Optional[AlphaReference] = None,
                 stream: RandomStream | None = None) -> float:
    """Prior strength for MAP cell rewards, read from the reference table.

    Partitions the training contexts with the fitted cluster model, draws
    one synthetic evaluation action per context, estimates the average
    occupancy of the (cluster, action) cells, and looks the value up in
    the reference.
    """
    reference = reference or default_alpha_reference()
    return reference.lookup(expected_points_per_cell(d_train, pi_eval, cluster_model, stream))


def calibrate_alpha_reference(stream: RandomStream,
                              alpha_grid: Sequence[float] = (1.5, 2.0, 5.0, 10.0, 20.0, 35.0, 50.0),
                              cell_targets: Sequence[float] = (1.0, 4.0, 16.0, 64.0, 256.0),
                              replications: int = 20,
                              n_clusters: int = 10,
                              n_actions: int = 10) -> tuple[AlphaReference, dict]:
    """Rebuild the reference by sweeping prior strengths per cell occupancy.

    For each target occupancy a matching synthetic configuration is
    replicated and the squared error of the MAP-mode estimator is measured
    on an alpha grid; the winner per bucket forms the table. Returns the
    raw per-bucket losses alongside the table so the calibration can be
    audited.
    """
    raw: dict = {"alpha_grid": list(alpha_grid), "targets": list(cell_targets), "losses": []}
    winners = []
    for target in cell_targets:
        n = max(200, int(round(target * n_clusters * n_actions)))
        cfg = SynthConfig(x_num=max(2 * n_clusters, 100), a_num=n_actions, c_num=n_clusters,
                          n_samples=n, emp_c_num=n_clusters)
        losses = np.zeros(len(alpha_grid))
        for s in range(replications):
            rep = stream.substream(int(round(target * 1000)) + 7919 * s)
            world = generate_world(cfg, rep.substream(0))
            truth = true_policy_value(world)
            data = sample_logged_data(world, cfg.n_samples, "log", rep.substream(1))
            eval_probs = world.pi_eval.probs[world.context_indices(data.contexts)]
            model = fit_minibatch_kmeans(data.contexts, n_clusters, stream=rep.substream(2))
            ids = model.assign(data.contexts)
            for ai, alpha in enumerate(alpha_grid):
                est = run_estimator("chips-map", data, eval_probs, cluster_ids=ids,
                                    options={"alpha": alpha})
                losses[ai] += (est.value - truth) ** 2
        losses /= replications
        raw["losses"].append(losses.tolist())
        winners.append(float(alpha_grid[int(np.argmin(losses))]))
    edges = [float(np.sqrt(a * b)) for a, b in zip(cell_targets[:-1], cell_targets[1:])]
    edges.append(float("inf"))
    return AlphaReference(edges, winners), raw


# ---------------------------------------------------------------------------
# classification-to-bandit conversion


@dataclass(eq=False)
class LinearSoftmaxPolicy:
    """Policy evaluator built on a linear scorer.

    ``temperature`` flattens the softmax over decision scores (infinite
    temperature gives the uniform policy); ``epsilon`` switches to the
    epsilon-greedy sharpening of the same scorer.
    """

    scorer: LogisticRegression
    n_actions: int
    temperature: Optional[float] = None
    epsilon: Optional[float] = None

    def action_probabilities(self, contexts: np.ndarray) -> np.ndarray:
        contexts = np.atleast_2d(np.asarray(contexts, dtype=np.float64))
        n = contexts.shape[0]
        scores = np.zeros((n, self.n_actions))
        raw = self.scorer.decision_function(contexts)
        if raw.ndim == 1:  # binary scorer: symmetric two-class scores
            raw = np.stack([-raw, raw], axis=1)
        scores[:, np.asarray(self.scorer.classes_, dtype=np.int64)] = raw
        if self.epsilon is not None:
            probs = np.full((n, self.n_actions), self.epsilon / self.n_actions)
            probs[np.arange(n), scores.argmax(axis=1)] += 1.0 - self.epsilon
            return probs
        if self.temperature is None or np.isinf(self.temperature):
            return np.full((n, self.n_actions), 1.0 / self.n_actions)
        logits = scores / self.temperature
        logits -= logits.max(axis=1, keepdims=True)
        exp = np.exp(logits)
        return exp / exp.sum(axis=1, keepdims=True)


def classification_to_bandit(features: np.ndarray, labels: np.ndarray,
                             stream: RandomStream,
                             logging_temperature: float = 5.0,
                             eval_epsilon: float = 0.1,
                             scorer_fraction: float = 0.3):
    """Turn a multi-class dataset into logged bandit feedback.

    Actions are the classes and the reward is exact-match correctness. A
    linear scorer is trained on a held-out split; the remaining rows are
    logged under its temperature-flattened softmax, with full propensity
    rows recorded. The returned evaluator is the epsilon-greedy sharpened
    version of the same scorer.
    """
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = int(labels.max()) + 1
    counts = np.bincount(labels, minlength=n_classes)
    if (counts == 0).any():
        raise DataValidationError(f"class {int(np.argmin(counts))} has no examples")
    if n_classes < 2:
        raise DataValidationError("need at least two classes")
    rng = stream.generator()
    order = rng.permutation(features.shape[0])
    n_scorer = max(n_classes, int(round(scorer_fraction * features.shape[0])))
    scorer_idx, bandit_idx = order[:n_scorer], order[n_scorer:]
    if bandit_idx.size == 0:
        raise DataValidationError("no rows left for the bandit split")
    if np.unique(labels[scorer_idx]).size < n_classes:
        # tiny datasets: train the scorer on everything rather than fail
        scorer_idx = order

    scorer = LogisticRegression(max_iter=1000)
    scorer.fit(features[scorer_idx], labels[scorer_idx])

    logging_policy = LinearSoftmaxPolicy(scorer, n_classes, temperature=logging_temperature)
    eval_policy = LinearSoftmaxPolicy(scorer, n_classes, epsilon=eval_epsilon)

    x = features[bandit_idx]
    y = labels[bandit_idx]
    probs = logging_policy.action_probabilities(x)
    cdf = np.cumsum(probs, axis=1)
    actions = (rng.uniform(size=(x.shape[0], 1)) > cdf).sum(axis=1)
    np.clip(actions, 0, n_classes - 1, out=actions)
    rewards = (actions == y).astype(np.float64)
    dataset = BanditDataset(contexts=x, actions=actions, rewards=rewards,
                            n_actions=n_classes, propensities=probs)
    return dataset, eval_policy


# ---------------------------------------------------------------------------
# wall-clock benchmark


def benchmark_estimators(ns: Sequence[int], estimators: Sequence[tuple[str, dict]],
                         base: SynthConfig, stream: RandomStream,
                         reward_model_family: str = "forest") -> list[tuple[str, int, float]]:
    """Wall-clock seconds per estimator and sample size, fits included.

    Each timing covers everything the estimator needs on fresh data:
    clustering for the cluster-huddled variants, reward-model training for
    the model-based ones.
    """
    rows = []
    for i, n in enumerate(ns):
        cfg = replace(base, n_samples=int(n))
        rep = stream.substream(i)
        world = generate_world(cfg, rep.substream(0))
        data = sample_logged_data(world, cfg.n_samples, "log", rep.substream(1))
        eval_probs = world.pi_eval.probs[world.context_indices(data.contexts)]
        for name, opts in estimators:
            t0 = time.perf_counter()
            reward_model = None
            cluster_ids = None
            if needs_reward_model(name):
                reward_model = fit_reward_model(data, family=reward_model_family,
                                                stream=rep.substream(2))
            if needs_clusters(name):
                model = fit_minibatch_kmeans(data.contexts,
                                             min(cfg.emp_c_num, data.n_samples),
                                             stream=rep.substream(3))
                cluster_ids = model.assign(data.contexts)
            run_estimator(name, data, eval_probs, reward_model=reward_model,
                          cluster_ids=cluster_ids, options=opts)
            rows.append((name, int(n), time.perf_counter() - t0))
    return rows


def write_timing_csv(path, rows: Sequence[tuple[str, int, float]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["estimator", "n", "seconds"])
        for name, n, seconds in rows:
            writer.writerow([name, n, repr(float(seconds))])
