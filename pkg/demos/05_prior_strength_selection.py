"""Pick the MAP prior strength from the expected cell occupancy.

The shipped reference table maps the expected number of samples per
(cluster, action) cell to a prior strength; sparser cells get weaker
priors. The table can be regenerated locally with
``chips-ope alpha-select --config '{"calibrate": true}'``.
"""

from chips_ope import RandomStream, SynthConfig, generate_world, sample_logged_data
from chips_ope.clustering import fit_minibatch_kmeans
from chips_ope.harness import default_alpha_reference, expected_points_per_cell, select_alpha

cfg = SynthConfig(x_num=400, a_num=10, c_num=5, n_samples=30_000)
stream = RandomStream(41)
world = generate_world(cfg, stream.substream(0))
data = sample_logged_data(world, cfg.n_samples, "log", stream.substream(1))
eval_probs = world.pi_eval.probs[world.context_indices(data.contexts)]

print("reference table:")
ref = default_alpha_reference()
for edge, alpha in zip(ref.upper_edges, ref.alphas):
    print(f"  cells up to {edge:>6} points -> alpha {alpha}")

for k in (5, 20, 80):
    model = fit_minibatch_kmeans(data.contexts, k, stream=stream.substream(k))
    occupancy = expected_points_per_cell(data, eval_probs, model, stream.substream(100 + k))
    alpha = select_alpha(data, eval_probs, model, stream=stream.substream(100 + k))
    print(f"{k:>3d} clusters: about {occupancy:7.1f} points per cell -> alpha {alpha}")
