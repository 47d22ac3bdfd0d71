"""Command-line entry point.

Subcommands: ``synth``, ``estimate``, ``sweep``, ``ecdf``, ``verify``,
``alpha-select``, ``bench``; each reads a JSON config (``--config``) whose
keys are schema-checked with unknown keys rejected. Exit codes: 0 success,
1 failed verification checks, 2 config error, 3 data-capability error,
4 resource-cap error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import harness, oracle
from .clustering import fit_minibatch_kmeans
from .core import (
    BanditDataset,
    CapabilityError,
    DataValidationError,
    RandomStream,
    load_bandit_csv,
    write_bandit_csv,
)
from .estimators import (
    ESTIMATOR_NAMES,
    fit_reward_model,
    needs_clusters,
    needs_reward_model,
    run_estimator,
)
from .core import PolicyTable
from .oracle import DiscreteInstance, EnumerationLimitError
from .synthgen import SynthConfig, SyntheticWorld, generate_world, sample_logged_data, true_policy_value

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_CAPABILITY = 3
EXIT_RESOURCE = 4

_ESTIMATOR_OPTION_KEYS = {"name", "alpha", "beta_hat", "lambda", "tau", "n_bins", "n_clusters"}


class ConfigError(ValueError):
    pass


def _check_keys(doc: dict, allowed: set[str], where: str) -> None:
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {', '.join(unknown)}")


def _required(doc: dict, key: str, where: str):
    if key not in doc:
        raise ConfigError(f"{where} is missing required key {key!r}")
    return doc[key]


def _synth_config(doc: dict) -> SynthConfig:
    allowed = {f.name for f in fields(SynthConfig)}
    _check_keys(doc, allowed, "config")
    try:
        return SynthConfig(**doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def _estimator_list(doc) -> list[tuple[str, dict]]:
    if not isinstance(doc, list) or not doc:
        raise ConfigError("'estimators' must be a nonempty list of option blocks")
    out = []
    for block in doc:
        if isinstance(block, str):
            block = {"name": block}
        _check_keys(block, _ESTIMATOR_OPTION_KEYS, "estimator block")
        name = _required(block, "name", "estimator block")
        if name not in ESTIMATOR_NAMES:
            raise ConfigError(f"unknown estimator {name!r}; known: {', '.join(ESTIMATOR_NAMES)}")
        out.append((name, {k: v for k, v in block.items() if k != "name"}))
    return out


def _world_to_json(world: SyntheticWorld) -> dict:
    return {
        "contexts": world.contexts.tolist(),
        "cluster_of": world.cluster_of.tolist(),
        "p_x": world.p_x.tolist(),
        "pi_eval": world.pi_eval.probs.tolist(),
        "pi_log": world.pi_log.probs.tolist(),
        "reward_mean": world.reward_mean.tolist(),
    }


def _world_from_json(doc: dict) -> SyntheticWorld:
    return SyntheticWorld(
        contexts=np.asarray(doc["contexts"], dtype=np.float64),
        cluster_of=np.asarray(doc["cluster_of"], dtype=np.int64),
        p_x=np.asarray(doc["p_x"], dtype=np.float64),
        pi_eval=PolicyTable(np.asarray(doc["pi_eval"], dtype=np.float64)),
        pi_log=PolicyTable(np.asarray(doc["pi_log"], dtype=np.float64)),
        reward_mean=np.asarray(doc["reward_mean"], dtype=np.float64),
    )


def cmd_synth(doc: dict, seed: int, out_dir: Path) -> int:
    _check_keys(doc, {"config", "dataset", "world", "policy", "seed"}, "synth config")
    cfg = _synth_config(_required(doc, "config", "synth config"))
    policy = doc.get("policy", "log")
    if policy not in ("log", "eval"):
        raise ConfigError("'policy' must be 'log' or 'eval'")
    stream = RandomStream(seed)
    world = generate_world(cfg, stream.substream(0))
    dataset = sample_logged_data(world, cfg.n_samples, policy, stream.substream(1))
    dataset_path = out_dir / doc.get("dataset", "dataset.csv")
    world_path = out_dir / doc.get("world", "world.json")
    write_bandit_csv(dataset_path, dataset)
    world_path.write_text(json.dumps(_world_to_json(world)))
    print(f"wrote {dataset_path} ({dataset.n_samples} rows) and {world_path} "
          f"({world.n_contexts} contexts); true value {true_policy_value(world):.10f}")
    return EXIT_OK


def _eval_probs_for(doc: dict, dataset: BanditDataset, base: Path):
    if "world" in doc:
        world = _world_from_json(json.loads((base / doc["world"]).read_text()))
        return world.pi_eval.probs[world.context_indices(dataset.contexts)]
    if "eval_probs" in doc:
        probs = np.loadtxt(base / doc["eval_probs"], delimiter=",", ndmin=2)
        return probs
    raise ConfigError("need 'world' or 'eval_probs' to define the evaluation policy")


def cmd_estimate(doc: dict, seed: int, out_dir: Path) -> int:
    _check_keys(doc, {"dataset", "world", "eval_probs", "estimators", "reward_model",
                      "out", "seed"}, "estimate config")
    dataset = load_bandit_csv(out_dir / _required(doc, "dataset", "estimate config"))
    eval_probs = _eval_probs_for(doc, dataset, out_dir)
    estimators = _estimator_list(_required(doc, "estimators", "estimate config"))
    stream = RandomStream(seed)

    reward_model = None
    if any(needs_reward_model(name) for name, _ in estimators):
        rm_doc = doc.get("reward_model", {})
        _check_keys(rm_doc, {"family", "n_estimators", "max_depth"}, "reward_model")
        reward_model = fit_reward_model(dataset, family=rm_doc.get("family", "forest"),
                                        stream=stream.substream(1),
                                        **{k: v for k, v in rm_doc.items() if k != "family"})
    results = {}
    for name, opts in estimators:
        cluster_ids = None
        if needs_clusters(name):
            if "n_clusters" in opts:
                model = fit_minibatch_kmeans(dataset.contexts,
                                             min(int(opts["n_clusters"]), dataset.n_samples),
                                             stream=stream.substream(2))
                cluster_ids = model.assign(dataset.contexts)
            elif dataset.cluster_ids is None:
                raise ConfigError(f"{name} needs 'n_clusters' or a cluster column in the dataset")
        est = run_estimator(name, dataset, eval_probs, reward_model=reward_model,
                            cluster_ids=cluster_ids, options=opts)
        results[name] = est.value
    out_path = out_dir / doc.get("out", "estimates.json")
    out_path.write_text(json.dumps(results, indent=2))
    for name, value in results.items():
        print(f"{name}: {value:.10f}")
    return EXIT_OK


def cmd_sweep(doc: dict, seed: int, out_dir: Path) -> int:
    _check_keys(doc, {"config", "parameter", "grid", "estimators", "replications",
                      "n_jobs", "out", "seed"}, "sweep config")
    spec = harness.SweepSpec(
        base=_synth_config(_required(doc, "config", "sweep config")),
        parameter=_required(doc, "parameter", "sweep config"),
        grid=_required(doc, "grid", "sweep config"),
        estimators=_estimator_list(_required(doc, "estimators", "sweep config")),
        replications=int(doc.get("replications", 100)),
        seed=seed,
        n_jobs=int(doc.get("n_jobs", 1)),
    )
    report = harness.run_sweep(spec)
    out_path = out_dir / doc.get("out", "sweep.csv")
    report.to_csv(out_path)
    failed = sum(1 for c in report.cells if c.n_seeds == 0)
    print(f"wrote {out_path} ({len(report.cells)} cells, {failed} fully failed)")
    return EXIT_OK if failed < len(report.cells) else EXIT_CHECK_FAILED


def cmd_ecdf(doc: dict, seed: int, out_dir: Path) -> int:
    _check_keys(doc, {"config", "n", "T", "estimators", "log_pool", "eval_pool",
                      "out", "seed"}, "ecdf config")
    cfg = _synth_config(_required(doc, "config", "ecdf config"))
    stream = RandomStream(seed)
    world = generate_world(cfg, stream.substream(0))
    d_log = sample_logged_data(world, int(doc.get("log_pool", cfg.b_len)), "log",
                               stream.substream(1))
    d_eval = sample_logged_data(world, int(doc.get("eval_pool", cfg.e_len)), "eval",
                                stream.substream(2))
    eval_probs = world.pi_eval.probs[world.context_indices(d_log.contexts)]
    curves = harness.ecdf_protocol(
        d_log, d_eval, eval_probs,
        estimators=_estimator_list(_required(doc, "estimators", "ecdf config")),
        n=int(_required(doc, "n", "ecdf config")),
        T=int(doc.get("T", 100)),
        stream=stream.substream(3),
    )
    out_path = out_dir / doc.get("out", "ecdf.csv")
    harness.write_ecdf_csv(out_path, curves)
    print(f"wrote {out_path} ({len(curves)} curves, T={len(next(iter(curves.values())).z)})")
    return EXIT_OK


def _verify_checks(inst: DiscreteInstance, tol: float) -> list[tuple[str, str, float]]:
    """(name, status, residual) triples; status in PASS/FAIL/SKIP."""
    checks: list[tuple[str, str, float]] = []
    v = oracle.true_value(inst)

    mean_ips, _ = oracle.exact_moments(inst, "ips")
    full_support = not ((inst.pi > 0) & (inst.pi0 == 0)).any()
    if full_support:
        checks.append(("ips-unbiased-full-support", "", abs(mean_ips - v)))
    else:
        checks.append(("ips-unbiased-full-support", "SKIP common support fails", 0.0))

    homogeneous = inst.rewards_cluster_constant()
    mean_ch, _ = oracle.exact_moments(inst, "chips")
    cluster_support = not ((inst.cluster_marginal("eval") > 0)
                           & (inst.cluster_marginal("log") == 0)).any()
    if homogeneous and cluster_support:
        checks.append(("cluster-estimator-unbiased", "", abs(mean_ch - v)))
    else:
        checks.append(("cluster-estimator-unbiased", "SKIP needs cluster support and homogeneity", 0.0))

    if homogeneous:
        gap_ips = v - mean_ips
        gap_ch = v - mean_ch
        checks.append(("deficiency-bias-closed-form-ips",
                       "", abs(oracle.exact_bias_deficient(inst, "ips") - gap_ips)))
        checks.append(("deficiency-bias-closed-form-cluster",
                       "", abs(oracle.exact_bias_deficient(inst, "chips") - gap_ch)))
        checks.append(("bias-difference-closed-form",
                       "", abs(oracle.bias_difference_deficient(inst) - (gap_ips - gap_ch))))
    else:
        for name in ("deficiency-bias-closed-form-ips", "deficiency-bias-closed-form-cluster",
                     "bias-difference-closed-form"):
            checks.append((name, "SKIP rewards vary within a cluster", 0.0))

    bounds = oracle.delta_bounds(inst)
    bias_ch = abs(mean_ch - v)
    if np.isfinite(bounds.bias_bound):
        checks.append(("homogeneity-bias-bound", "", max(0.0, bias_ch - bounds.bias_bound)))
    else:
        checks.append(("homogeneity-bias-bound", "SKIP unbounded envelope", 0.0))

    if homogeneous and full_support:
        _, var_ips = oracle.exact_moments(inst, "ips")
        _, var_ch = oracle.exact_moments(inst, "chips")
        gap = oracle.variance_gap(inst)
        checks.append(("variance-reduction-identity", "", abs(gap - (var_ips - var_ch))))
        checks.append(("variance-reduction-nonnegative", "", max(0.0, -gap)))
    else:
        checks.append(("variance-reduction-identity", "SKIP needs support and homogeneity", 0.0))
        checks.append(("variance-reduction-nonnegative", "SKIP needs support and homogeneity", 0.0))

    if full_support:
        checks.append(("mse-difference-identity", "", abs(oracle.mse_identity_residual(inst))))
    else:
        checks.append(("mse-difference-identity", "SKIP IPS is biased here", 0.0))

    if inst.action_embeddings is not None:
        var_i, var_m, var_c = oracle.variance_ordering(inst)
        worst = max(var_m - var_i, var_c - var_m, -var_c)
        checks.append(("variance-ordering-joint", "", max(0.0, worst)))
        mean_m, _ = oracle.exact_moments(inst, "mips")
        lhs = abs(v - mean_m) - abs(v - mean_ch)
        try:
            rhs = oracle.embedding_bias_difference(inst)
            checks.append(("embedding-bias-difference", "", abs(lhs - rhs)))
        except DataValidationError as exc:
            checks.append(("embedding-bias-difference", f"SKIP {exc}", 0.0))

    out = []
    for name, status, residual in checks:
        if status.startswith("SKIP"):
            out.append((name, status, residual))
        else:
            out.append((name, "PASS" if residual <= tol else "FAIL", residual))
    return out


def cmd_verify(doc: dict, seed: int, out_dir: Path) -> int:
    _check_keys(doc, {"instance", "random", "tolerance", "seed"}, "verify config")
    tol = float(doc.get("tolerance", 1e-10))
    instances: list[tuple[str, DiscreteInstance]] = []
    if "instance" in doc:
        inst = DiscreteInstance.from_json((out_dir / doc["instance"]).read_text())
        instances.append((str(doc["instance"]), inst))
    if "random" in doc:
        k = int(doc["random"])
        stream = RandomStream(seed)
        for i in range(k):
            kind = i % 3
            if kind == 0:
                inst = oracle.random_instance(stream.substream(i), homogeneous_rewards=True)
            elif kind == 1:
                inst = oracle.random_deficient_instance(stream.substream(i))
            else:
                inst = oracle.random_joint_instance(stream.substream(i))
            instances.append((f"random-{i}", inst))
    if not instances:
        raise ConfigError("verify needs 'instance' or 'random'")

    any_failed = False
    for label, inst in instances:
        for name, status, residual in _verify_checks(inst, tol):
            if status == "SKIP" or status.startswith("SKIP"):
                print(f"[SKIP] {label} {name}: {status[5:].strip() or 'not applicable'}")
            else:
                print(f"[{status}] {label} {name}: residual {residual:.3e}")
                if status == "FAIL":
                    any_failed = True
    return EXIT_CHECK_FAILED if any_failed else EXIT_OK


def cmd_alpha_select(doc: dict, seed: int, out_dir: Path) -> int:
    _check_keys(doc, {"dataset", "world", "eval_probs", "n_clusters", "reference",
                      "calibrate", "replications", "out", "seed"}, "alpha-select config")
    stream = RandomStream(seed)
    if doc.get("calibrate"):
        reference, raw = harness.calibrate_alpha_reference(
            stream, replications=int(doc.get("replications", 20)))
        out_path = out_dir / doc.get("out", "alpha_reference.json")
        out_path.write_text(reference.to_json())
        print(f"wrote {out_path}; raw losses: {json.dumps(raw)}")
        return EXIT_OK
    dataset = load_bandit_csv(out_dir / _required(doc, "dataset", "alpha-select config"))
    eval_probs = _eval_probs_for(doc, dataset, out_dir)
    model = fit_minibatch_kmeans(dataset.contexts,
                                 min(int(_required(doc, "n_clusters", "alpha-select config")),
                                     dataset.n_samples),
                                 stream=stream.substream(0))
    reference = None
    if "reference" in doc:
        reference = harness.AlphaReference.from_json((out_dir / doc["reference"]).read_text())
    alpha = harness.select_alpha(dataset, eval_probs, model, reference=reference,
                                 stream=stream.substream(1))
    out_path = out_dir / doc.get("out", "alpha.json")
    out_path.write_text(json.dumps({"alpha": alpha}))
    print(f"alpha: {alpha}")
    return EXIT_OK


def cmd_bench(doc: dict, seed: int, out_dir: Path) -> int:
    _check_keys(doc, {"config", "ns", "estimators", "out", "seed"}, "bench config")
    cfg = _synth_config(doc.get("config", {}))
    rows = harness.benchmark_estimators(
        ns=[int(n) for n in _required(doc, "ns", "bench config")],
        estimators=_estimator_list(_required(doc, "estimators", "bench config")),
        base=cfg,
        stream=RandomStream(seed),
    )
    out_path = out_dir / doc.get("out", "timing.csv")
    harness.write_timing_csv(out_path, rows)
    for name, n, seconds in rows:
        print(f"{name} n={n}: {seconds:.4f}s")
    return EXIT_OK


_COMMANDS = {
    "synth": cmd_synth,
    "estimate": cmd_estimate,
    "sweep": cmd_sweep,
    "ecdf": cmd_ecdf,
    "verify": cmd_verify,
    "alpha-select": cmd_alpha_select,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="chips-ope", description=__doc__)
    parser.add_argument("command", choices=sorted(_COMMANDS))
    parser.add_argument("--config", required=True, help="path to the JSON config")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--out", default=".", help="directory for inputs/outputs")
    args = parser.parse_args(argv)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        doc = json.loads(Path(args.config).read_text())
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        seed = args.seed if args.seed is not None else int(doc.get("seed", 0))
        return _COMMANDS[args.command](doc, seed, out_dir)
    except (ConfigError, json.JSONDecodeError, FileNotFoundError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except EnumerationLimitError as exc:
        print(f"resource cap: {exc}", file=sys.stderr)
        return EXIT_RESOURCE
    except CapabilityError as exc:
        print(f"data capability error: {exc}", file=sys.stderr)
        return EXIT_CAPABILITY
    except DataValidationError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
