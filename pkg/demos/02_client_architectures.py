"""
Four heterogeneous clients and the fusion contract
==================================================

Each client splits its model into a base block and a modular block. The
architectures differ, but every base block ends in a 432-wide fusion layer,
so any modular block can sit on top of any base block.
"""

import numpy as np

from ifl.models import (FusionContract, ModelSpec, base_output_dim, build_model, param_count,
                        table2_specs, validate_contract)
from ifl.nn import LayerSpec
from ifl.protocols import compose_predict

specs = table2_specs()
for spec in specs:
    kinds = " ".join(l.kind for l in spec.base_layers)
    print(f"client {spec.client_id}: base [{kinds}] -> {base_output_dim(spec)}")
    print(f"          params: base {param_count(spec, 'base'):,}, "
          f"modular {param_count(spec, 'modular'):,}")

print("contract violations:", validate_contract(specs, FusionContract()))

# A client that narrows its fusion layer to 400 breaks the contract.
c3 = specs[2]
narrow = ModelSpec(3, (LayerSpec("flatten"), LayerSpec("dense", (784, 400)), LayerSpec("relu")),
                   c3.modular_layers)
print("with a 400-wide client 3:", validate_contract([specs[0], narrow], FusionContract()))

# Untrained models still compose in every pairing.
rng = np.random.default_rng(0)
models = [build_model(s, rng) for s in specs]
x = rng.random((3, 1, 28, 28), dtype=np.float32)
for k, base in enumerate(models, start=1):
    row = [compose_predict(base.base, m.modular, x).tolist() for m in models]
    print(f"base {k}:", row)
