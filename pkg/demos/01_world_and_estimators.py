"""Generate a synthetic cluster-bandit world and run every estimator on it.

The world is finite, so the policy value is an exact double sum and every
estimate can be compared against the truth rather than a noisy baseline.
"""

import numpy as np

from chips_ope import RandomStream, SynthConfig, generate_world, sample_logged_data, true_policy_value
from chips_ope.clustering import fit_minibatch_kmeans
from chips_ope.estimators import ESTIMATOR_NAMES, fit_reward_model, run_estimator

cfg = SynthConfig(x_num=500, a_num=8, c_num=6, n_samples=20_000, emp_c_num=30)
stream = RandomStream(seed=7)

world = generate_world(cfg, stream.substream(0))
truth = true_policy_value(world)
print(f"true policy value: {truth:.6f}")

data = sample_logged_data(world, cfg.n_samples, "log", stream.substream(1))
eval_probs = world.pi_eval.probs[world.context_indices(data.contexts)]
print(f"logged {data.n_samples} samples, mean logged reward {data.rewards.mean():.6f}")

# shared resources: a reward model for the model-based estimators and a
# context clustering for the cluster-huddled ones
reward_model = fit_reward_model(data, stream=stream.substream(2), n_estimators=25)
cluster_model = fit_minibatch_kmeans(data.contexts, cfg.emp_c_num, stream=stream.substream(3))
cluster_ids = cluster_model.assign(data.contexts)

print(f"\n{'estimator':>10s} {'estimate':>10s} {'abs error':>10s}")
for name in ESTIMATOR_NAMES:
    est = run_estimator(name, data, eval_probs, reward_model=reward_model,
                        cluster_ids=cluster_ids,
                        action_embeddings=np.arange(cfg.a_num))
    print(f"{name:>10s} {est.value:10.6f} {abs(est.value - truth):10.6f}")
