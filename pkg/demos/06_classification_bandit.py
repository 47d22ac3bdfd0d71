"""Turn a classification dataset into logged bandit feedback and evaluate.

Labels become actions, correctness becomes the reward, a temperature-
flattened linear scorer plays the logging policy, and its epsilon-greedy
sharpening is the evaluation target.
"""

import numpy as np
from sklearn.datasets import make_moons

from chips_ope import RandomStream
from chips_ope.estimators import estimate_ips, estimate_snips
from chips_ope.harness import classification_to_bandit

features, labels = make_moons(n_samples=2_000, noise=0.2, random_state=3)
data, eval_policy = classification_to_bandit(features, labels, RandomStream(51),
                                             logging_temperature=5.0, eval_epsilon=0.1)
eval_probs = eval_policy.action_probabilities(data.contexts)

# correctness rewards are deterministic given the label, so the on-policy
# value of the evaluation policy is exactly computable on the logged rows
index = {row.tobytes(): lab for row, lab in zip(features.astype(np.float64), labels)}
bandit_labels = np.array([index[row.tobytes()] for row in data.contexts])
truth = eval_probs[np.arange(data.n_samples), bandit_labels].mean()

print(f"bandit rows: {data.n_samples}, actions: {data.n_actions}")
print(f"exact value of the evaluation policy: {truth:.4f}")
print(f"ips estimate:   {estimate_ips(data, eval_probs).value:.4f}")
print(f"snips estimate: {estimate_snips(data, eval_probs).value:.4f}")
print(f"mean logged reward (logging policy value): {data.rewards.mean():.4f}")
