"""
IFL against FL and FSL on a communication budget
================================================

Train each protocol briefly on a small synthetic task and read off the
cumulative uplink megabytes needed to reach an accuracy threshold.
"""

import tempfile
from pathlib import Path

from ifl.experiment import ExperimentConfig, compare_runs, run_experiment

root = Path(tempfile.mkdtemp())
dirs = []
for protocol in ("ifl", "fsl", "fl1", "fl2"):
    config = ExperimentConfig(protocol=protocol, rounds=20, mc_runs=1, synthetic=True,
                              train_limit=4000, test_limit=1000, eval_every=5,
                              out=str(root / protocol))
    summary = run_experiment(config)
    acc, _ = summary["final_accuracy"]
    mb, _ = summary["cumulative_uplink_mb"]
    print(f"{protocol:<4} accuracy {acc:.3f} after {mb:8.2f} MB uplink")
    dirs.append(root / protocol)

table, reach = compare_runs(dirs, thresholds=(0.4, 0.5))
for protocol, by_threshold in reach.items():
    shown = ", ".join(f">= {t}: " + ("unreached" if mb is None else f"{mb:.2f} MB")
                      for t, mb in by_threshold.items())
    print(f"{protocol:<4} {shown}")
print("artifacts in", root)
