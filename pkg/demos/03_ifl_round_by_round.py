"""
One IFL round, phase by phase
=============================

Walk through a single round by calling the phase functions directly: local
base-block steps, the fusion upload, the server's ordered broadcast, and the
modular steps every client takes on every other client's activations.
"""

import numpy as np

from ifl.data import synthetic_dataset
from ifl.experiment import ExperimentConfig, setup_run
from ifl.protocols import ifl_base_phase, ifl_fusion_upload, ifl_modular_phase, server_concat

train = synthetic_dataset(2000, np.random.default_rng(0))
config = ExperimentConfig(synthetic=True, local_steps=10)
run = setup_run(config, run_index=0, train=train)
tc = config.training()

for c in run.clients:
    print(f"client {c.client_id}: {c.n_samples} samples, "
          f"class counts {np.bincount(train.labels[c.indices], minlength=10).tolist()}")

# Base phase: tau steps each, the modular block is only read.
for c in run.clients:
    losses = ifl_base_phase(c, tc)
    print(f"client {c.client_id} base loss {losses[0]:.3f} -> {losses[-1]:.3f}")

# Each client uploads one batch of fusion activations with its labels.
uploads = [ifl_fusion_upload(c) for c in run.clients]
broadcast = server_concat(uploads, n_clients=len(run.clients))
print("upload shapes:", [u.z.shape for u in uploads])
print("uplink bytes:", sum(u.nbytes() for u in uploads), " broadcast bytes:", broadcast.nbytes())

# Modular phase: one step per broadcast entry, in client-id order.
for c in run.clients:
    losses = ifl_modular_phase(c, broadcast, tc)
    print(f"client {c.client_id} modular losses", np.round(losses, 3).tolist())
