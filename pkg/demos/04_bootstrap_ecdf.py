"""Bootstrap ECDF comparison of estimators against the IPS yardstick.

Each bootstrap round resamples the logged pool, re-estimates, and records
the squared error relative to IPS on the same resample; the distribution
of those ratios is what the curves show (lower-left is better).
"""

from chips_ope import RandomStream, SynthConfig, generate_world, sample_logged_data
from chips_ope.harness import ecdf_protocol

cfg = SynthConfig(x_num=400, a_num=6, c_num=5, emp_c_num=20, e_len=20_000, b_len=20_000)
stream = RandomStream(31)
world = generate_world(cfg, stream.substream(0))
d_log = sample_logged_data(world, cfg.b_len, "log", stream.substream(1))
d_eval = sample_logged_data(world, cfg.e_len, "eval", stream.substream(2))
eval_probs = world.pi_eval.probs[world.context_indices(d_log.contexts)]

curves = ecdf_protocol(
    d_log, d_eval, eval_probs,
    estimators=[("chips-ml", {"n_clusters": 20}), ("snips", {}), ("mr", {})],
    n=5_000, T=100, stream=stream.substream(3),
)

quantiles = (0.25, 0.5, 0.75, 1.0)
print(f"{'estimator':>10s} " + " ".join(f"z@{q:.2f}" for q in quantiles))
for name, curve in curves.items():
    row = [curve.z[int(q * len(curve.z)) - 1] for q in quantiles]
    print(f"{name:>10s} " + " ".join(f"{z:6.3f}" for z in row))
print("\nvalues below 1 mean the estimator beat IPS on that share of resamples")
