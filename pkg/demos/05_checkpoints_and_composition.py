"""
Checkpoints and the composition matrix
======================================

Save each client's blocks in the MFW1 format after a short IFL run, load
them back, and evaluate every base/modular pairing on the test set.
"""

import tempfile
from pathlib import Path

import numpy as np

from ifl.checkpoint import block_to_bytes, load_block
from ifl.experiment import ExperimentConfig, compose_eval, load_data, run_experiment

out = Path(tempfile.mkdtemp())
config = ExperimentConfig(protocol="ifl", rounds=10, mc_runs=1, synthetic=True,
                          train_limit=4000, test_limit=1000, out=str(out))
run_experiment(config)

ckpt = out / "checkpoints" / "run0" / "round10"
for path in sorted(ckpt.iterdir()):
    print(f"{path.name:<22} {path.stat().st_size:>9,} bytes")

_, test = load_data(config)
matrix = compose_eval(ckpt, test, out_dir=out / "post")
np.set_printoptions(precision=3, suppress=True)
print("rows: base block of client k, columns: modular block of client i")
print(matrix)
print("sd.csv:")
print((out / "post" / "sd.csv").read_text())

# The byte layout starts with the magic and the layer count.
head = block_to_bytes(load_block(ckpt / "client4_modular.mfw"))[:8]
print("header bytes:", head)
