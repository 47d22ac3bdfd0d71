"""Sweep the number of empirical clusters and decompose the error.

A small replication count keeps this demo quick; the acceptance suite runs
the full hundred-seed version of this experiment.
"""

from chips_ope import SynthConfig
from chips_ope.harness import SweepSpec, run_sweep

spec = SweepSpec(
    base=SynthConfig(x_num=500, a_num=8, c_num=6, n_samples=10_000),
    parameter="emp_c_num",
    grid=[1, 6, 30, 150],
    estimators=[("chips-ml", {}), ("chips-map", {"alpha": 20}), ("snips", {})],
    replications=10,
    seed=21,
)
report = run_sweep(spec)

print(f"{'clusters':>8s} {'estimator':>10s} {'mse':>12s} {'bias^2':>12s} "
      f"{'variance':>12s} {'vs ips':>8s}")
for cell in report.cells:
    print(f"{cell.value:>8} {cell.estimator:>10s} {cell.mse:12.3e} "
          f"{cell.squared_bias:12.3e} {cell.variance:12.3e} {cell.rel_mse_vs_ips:8.2f}")
