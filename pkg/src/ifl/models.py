"""Client architectures split into a base block and a modular block.

The two halves meet at the fusion layer, whose flattened output width is
fixed across all clients by a :class:`FusionContract`. Any modular block can
therefore be stacked on any base block.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .nn import Block, LayerSpec, ShapeError, init_params

NUM_CLASSES = 10


class ContractError(ValueError):
    """A model does not satisfy the shared fusion-dimension contract."""


@dataclass(frozen=True)
class FusionContract:
    fusion_dim: int = 432
    batch_size: int = 32
    input_shape: tuple[int, ...] = (1, 28, 28)


@dataclass(frozen=True)
class ModelSpec:
    client_id: int
    base_layers: tuple[LayerSpec, ...]
    modular_layers: tuple[LayerSpec, ...]

    def to_dict(self) -> dict:
        return {
            "client_id": self.client_id,
            "base": [l.to_dict() for l in self.base_layers],
            "modular": [l.to_dict() for l in self.modular_layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(
            int(d["client_id"]),
            tuple(LayerSpec.from_dict(l) for l in d["base"]),
            tuple(LayerSpec.from_dict(l) for l in d["modular"]),
        )


@dataclass
class ClientModel:
    client_id: int
    base: Block
    modular: Block

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.modular.forward(self.base.forward(x))

    def backward(self, grad: np.ndarray):
        """Backprop through modular then base; returns (base grads, modular grads)."""
        g, modular_grads = self.modular.backward(grad)
        _, base_grads = self.base.backward(g)
        return self.base.flat_grads(base_grads), self.modular.flat_grads(modular_grads)

    def param_count(self) -> int:
        return self.base.param_count() + self.modular.param_count()


def _shape_through(layers, shape):
    shape = tuple(shape)
    for i, spec in enumerate(layers):
        try:
            shape = spec.build().output_shape(shape)
        except ShapeError as err:
            raise ShapeError(f"layer {i} ({spec.kind}): {err}") from None
    return shape


def base_output_dim(spec: ModelSpec, input_shape=(1, 28, 28)) -> int:
    """Flattened per-sample width of the base block output."""
    return int(np.prod(_shape_through(spec.base_layers, input_shape)))


def param_count(spec: ModelSpec, part: str = "both") -> int:
    """Number of scalar parameters of ``part`` ("base", "modular" or "both")."""
    layers = {
        "base": spec.base_layers,
        "modular": spec.modular_layers,
        "both": spec.base_layers + spec.modular_layers,
    }[part]
    return sum(p.size for l in layers for p in l.build().params)


def validate_contract(specs, contract: FusionContract) -> list[tuple[int, int]]:
    """Return ``(client_id, actual_dim)`` for every spec breaking the contract.

    Checks the base output width, that the modular block accepts
    ``fusion_dim`` inputs, and that it emits ``NUM_CLASSES`` logits. An empty
    list means every base/modular pairing composes.
    """
    violations = []
    for spec in specs:
        try:
            dim = base_output_dim(spec, contract.input_shape)
        except ShapeError:
            violations.append((spec.client_id, -1))
            continue
        if dim != contract.fusion_dim:
            violations.append((spec.client_id, dim))
            continue
        try:
            out = _shape_through(spec.modular_layers, (contract.fusion_dim,))
        except ShapeError:
            first = spec.modular_layers[0] if spec.modular_layers else None
            width = first.args[0] if first is not None and first.kind == "dense" else -1
            violations.append((spec.client_id, width))
            continue
        if out != (NUM_CLASSES,):
            violations.append((spec.client_id, int(np.prod(out))))
    return violations


def load_specs(path=None) -> tuple[list[ModelSpec], FusionContract]:
    """Load a JSON spec file (the four-client default when ``path`` is None)."""
    if path is None:
        text = resources.files("ifl").joinpath("assets/table2.json").read_text()
    else:
        text = Path(path).read_text()
    raw = json.loads(text)
    contract = FusionContract(
        fusion_dim=int(raw.get("fusion_dim", 432)),
        input_shape=tuple(raw.get("input_shape", (1, 28, 28))),
    )
    return [ModelSpec.from_dict(c) for c in raw["clients"]], contract


def table2_specs() -> list[ModelSpec]:
    """The four heterogeneous client architectures used in the experiments."""
    return load_specs()[0]


def build_block(layers, rng: np.random.Generator) -> Block:
    return Block([init_params(spec, rng) for spec in layers])


def build_model(spec: ModelSpec, rng: np.random.Generator,
                contract: FusionContract | None = None) -> ClientModel:
    contract = contract or FusionContract()
    bad = validate_contract([spec], contract)
    if bad:
        cid, dim = bad[0]
        raise ContractError(
            f"client {cid}: fusion width {dim} does not match contract {contract.fusion_dim}"
        )
    return ClientModel(
        spec.client_id,
        build_block(spec.base_layers, rng),
        build_block(spec.modular_layers, rng),
    )
