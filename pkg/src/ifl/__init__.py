"""Interoperable federated learning: heterogeneous client models joined at a
fixed-width fusion layer, with FedAvg and federated split learning baselines."""

from .data import Dataset, BatchSampler, dirichlet_partition, synthetic_dataset
from .metrics import CommLedger, composition_matrix, composition_sd, test_accuracy
from .models import ClientModel, FusionContract, ModelSpec, build_model, table2_specs, validate_contract
from .nn import Block, LayerSpec, OptimizerConfig, init_params, sgd_step, softmax_cross_entropy
from .protocols import (ClientState, FslState, FusionBatch, Server, ServerBroadcast,
                        TrainingConfig, compose_predict, fl_round, fsl_round, ifl_round)

__version__ = "0.1.0"
