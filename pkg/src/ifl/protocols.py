"""Round-level training protocols: IFL, FedAvg (FL) and federated split learning.

Every protocol is synchronous. Per-client work inside a phase touches only
that client's state, so it can be mapped over a thread pool without changing
any result; cross-client data moves only through immutable
:class:`FusionBatch` / :class:`ServerBroadcast` values or, for the baselines,
through parameter lists returned to the server.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .data import BatchSampler, Dataset
from .metrics import (DEFAULT_ENCODING, CommLedger, WireEncoding, payload_bytes)
from .models import ClientModel, ContractError
from .nn import Block, OptimizerConfig, ShapeError, sgd_step, softmax_cross_entropy

UPDATE_RULES = ("sequential", "summed")


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class TrainingConfig:
    n_clients: int = 4
    local_steps: int = 10
    rounds: int = 200
    batch_size: int = 32
    lr_base: float = 0.01
    lr_modular: float = 0.01
    lr_fl: float = 0.01
    alpha: float = 0.5
    seed: int = 0
    # "sequential" applies one SGD step per mini-batch; "summed" accumulates
    # the gradients at the phase-start parameters and applies them once.
    update_rule: str = "sequential"

    def __post_init__(self):
        for name in ("n_clients", "rounds", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.local_steps < 0:
            raise ValueError("local_steps must be non-negative")
        for name in ("lr_base", "lr_modular", "lr_fl", "alpha"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.update_rule not in UPDATE_RULES:
            raise ValueError(f"update_rule must be one of {UPDATE_RULES}")


@dataclass
class ClientState:
    client_id: int
    model: ClientModel
    dataset: Dataset
    indices: np.ndarray
    sampler: BatchSampler

    @property
    def n_samples(self) -> int:
        return len(self.indices)

    def next_batch(self):
        return self.sampler.next_batch(self.dataset)


@dataclass(frozen=True)
class FusionBatch:
    client_id: int
    z: np.ndarray
    y: np.ndarray

    def nbytes(self, encoding: WireEncoding = DEFAULT_ENCODING) -> int:
        return payload_bytes(self.z, labels=self.y, encoding=encoding)


@dataclass(frozen=True)
class ServerBroadcast:
    Z: tuple[np.ndarray, ...]
    Y: tuple[np.ndarray, ...]
    client_ids: tuple[int, ...]

    def nbytes(self, encoding: WireEncoding = DEFAULT_ENCODING) -> int:
        return payload_bytes(*self.Z, labels=np.concatenate(self.Y), encoding=encoding)


@dataclass
class Server:
    """Passive synchronisation point that owns the byte ledger."""

    protocol: str
    ledger: CommLedger = field(default_factory=CommLedger)
    encoding: WireEncoding = DEFAULT_ENCODING
    executor: object = None
    round: int = 0
    global_params: list | None = None  # FL only

    def map(self, fn, items):
        items = list(items)
        if self.executor is None:
            return [fn(item) for item in items]
        return list(self.executor.map(fn, items))


def _check_loss(loss: float, who: str):
    if not np.isfinite(loss):
        raise DivergenceError(f"non-finite loss {loss} at {who}")


def _apply(params, grads, lr, rule, acc):
    """Either step now (sequential) or accumulate into ``acc`` (summed)."""
    if rule == "sequential":
        sgd_step(params, grads, OptimizerConfig(lr))
    else:
        for a, g in zip(acc, grads):
            a += g


# ----------------------------------------------------------------------- IFL

def ifl_base_phase(client: ClientState, config: TrainingConfig) -> list[float]:
    """Run ``local_steps`` SGD steps on the base block only.

    Each step draws a fresh mini-batch, runs the full model, and updates the
    base parameters; the modular block is read but never written. Returns the
    per-step losses.
    """
    model = client.model
    base_params = model.base.params()
    acc = [np.zeros_like(p) for p in base_params]
    losses = []
    for s in range(config.local_steps):
        x, y = client.next_batch()
        loss, grad = softmax_cross_entropy(model.forward(x), y)
        _check_loss(loss, f"client {client.client_id} base step {s}")
        g, _ = model.modular.backward(grad)
        _, base_grads = model.base.backward(g)
        _apply(base_params, model.base.flat_grads(base_grads), config.lr_base,
               config.update_rule, acc)
        losses.append(loss)
    if config.update_rule == "summed" and config.local_steps:
        sgd_step(base_params, acc, OptimizerConfig(config.lr_base))
    return losses


def ifl_fusion_upload(client: ClientState) -> FusionBatch:
    """Draw a fresh batch and push it through the updated base block."""
    x, y = client.next_batch()
    z = client.model.base.forward(x)
    return FusionBatch(client.client_id, z.reshape(z.shape[0], -1).copy(), np.array(y))


def server_concat(batches, n_clients: int | None = None) -> ServerBroadcast:
    """Order uploads by client id into one broadcast; contents are untouched."""
    batches = sorted(batches, key=lambda b: b.client_id)
    ids = tuple(b.client_id for b in batches)
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate upload among clients {ids}")
    if n_clients is not None and len(ids) != n_clients:
        raise ValueError(f"expected {n_clients} uploads, got {len(ids)} from {ids}")
    return ServerBroadcast(tuple(b.z for b in batches), tuple(b.y for b in batches), ids)


def ifl_modular_phase(client: ClientState, broadcast: ServerBroadcast,
                      config: TrainingConfig) -> list[float]:
    """One modular-block SGD step per broadcast entry, in client-id order."""
    modular = client.model.modular
    params = modular.params()
    acc = [np.zeros_like(p) for p in params]
    losses = []
    for cid, z, y in zip(broadcast.client_ids, broadcast.Z, broadcast.Y):
        try:
            logits = modular.forward(z)
        except ShapeError as err:
            raise ContractError(
                f"client {client.client_id} cannot consume fusion output of client {cid}: {err}"
            ) from None
        loss, grad = softmax_cross_entropy(logits, y)
        _check_loss(loss, f"client {client.client_id} modular step on z_{cid}")
        _, grads = modular.backward(grad)
        _apply(params, modular.flat_grads(grads), config.lr_modular, config.update_rule, acc)
        losses.append(loss)
    if config.update_rule == "summed" and losses:
        sgd_step(params, acc, OptimizerConfig(config.lr_modular))
    return losses


def ifl_round(clients, server: Server, config: TrainingConfig) -> dict:
    """One full IFL round: base phase, upload, concat + broadcast, modular phase."""
    def local(client):
        losses = ifl_base_phase(client, config)
        return losses, ifl_fusion_upload(client)

    results = server.map(local, clients)
    uploads = [r[1] for r in results]
    broadcast = server_concat(uploads, len(clients))
    modular_losses = server.map(lambda c: ifl_modular_phase(c, broadcast, config), clients)

    server.round += 1
    up = sum(u.nbytes(server.encoding) for u in uploads)
    down = len(clients) * broadcast.nbytes(server.encoding)
    server.ledger.record(server.round, server.protocol, up, down)
    return {
        "round": server.round,
        "uplink_bytes": up,
        "downlink_bytes": down,
        "base_loss": float(np.mean([np.mean(r[0]) if r[0] else np.nan for r in results])),
        "modular_loss": float(np.mean([np.mean(l) for l in modular_losses])),
    }


# ------------------------------------------------------------------------ FL

def _same_architecture(blocks) -> bool:
    sig = [tuple((l.kind, tuple(p.shape for p in l.params)) for l in b.layers)
           for b in blocks]
    return all(s == sig[0] for s in sig)


def _full_params(model: ClientModel):
    return model.base.params() + model.modular.params()


def _cast_like(values, params):
    """Copies of ``values`` in the dtypes of the tensors they will replace."""
    return [np.array(v, dtype=p.dtype) for v, p in zip(values, params)]


def _set_full_params(model: ClientModel, values):
    values = _cast_like(values, _full_params(model))
    nb = len(model.base.params())
    model.base.set_params(values[:nb])
    model.modular.set_params(values[nb:])


def fedavg(param_sets, weights) -> list[np.ndarray]:
    """Weighted parameter average, computed and returned in float64.

    The server keeps the float64 aggregate; it is rounded to each model's own
    dtype only when loaded into a client.
    """
    weights = np.asarray(weights, dtype=np.float64)
    weights = weights / weights.sum()
    return [sum(w * t.astype(np.float64) for w, t in zip(weights, tensors))
            for tensors in zip(*param_sets)]


def fl_local_update(client: ClientState, global_params, config: TrainingConfig):
    """``local_steps`` SGD steps on the full model starting from ``global_params``."""
    model = client.model
    _set_full_params(model, global_params)
    params = _full_params(model)
    acc = [np.zeros_like(p) for p in params]
    losses = []
    for s in range(config.local_steps):
        x, y = client.next_batch()
        loss, grad = softmax_cross_entropy(model.forward(x), y)
        _check_loss(loss, f"client {client.client_id} FL step {s}")
        gb, gm = model.backward(grad)
        _apply(params, gb + gm, config.lr_fl, config.update_rule, acc)
        losses.append(loss)
    if config.update_rule == "summed" and losses:
        sgd_step(params, acc, OptimizerConfig(config.lr_fl))
    return [p.copy() for p in params], losses


def fl_round(clients, server: Server, config: TrainingConfig) -> dict:
    """FedAvg round: local SGD from the global model, sample-weighted average."""
    models = [c.model for c in clients]
    if not (_same_architecture([m.base for m in models])
            and _same_architecture([m.modular for m in models])):
        raise ContractError("FL requires every client to share one architecture")
    if server.global_params is None:
        server.global_params = [p.copy() for p in _full_params(clients[0].model)]
    results = server.map(lambda c: fl_local_update(c, server.global_params, config), clients)
    server.global_params = fedavg([r[0] for r in results], [c.n_samples for c in clients])
    for c in clients:
        _set_full_params(c.model, server.global_params)

    server.round += 1
    up = sum(payload_bytes(*r[0], encoding=server.encoding) for r in results)
    down = len(clients) * payload_bytes(*server.global_params, encoding=server.encoding)
    server.ledger.record(server.round, server.protocol, up, down)
    return {
        "round": server.round,
        "uplink_bytes": up,
        "downlink_bytes": down,
        "loss": float(np.mean([np.mean(r[1]) if r[1] else np.nan for r in results])),
    }


# ----------------------------------------------------------------------- FSL

@dataclass
class FslState:
    """Personal client parts up to the cut layer plus one shared server part."""

    client_parts: list[Block]
    server_part: Block
    cut_dim: int = 432
    input_shape: tuple[int, ...] = (1, 28, 28)

    def __post_init__(self):
        for k, part in enumerate(self.client_parts):
            width = int(np.prod(part.output_shape(self.input_shape)))
            if width != self.cut_dim:
                raise ContractError(f"client part {k}: cut width {width} != {self.cut_dim}")
        self.server_part.output_shape((self.cut_dim,))


def fsl_client_step(client: ClientState, client_part: Block, server_part: Block,
                    config: TrainingConfig):
    """One split-learning step for ``client`` against a private copy of the
    server part. Returns (updated server params, loss, uploaded h, cut grad)."""
    server_copy = copy.deepcopy(server_part)
    x, y = client.next_batch()
    h = client_part.forward(x)                     # uploaded with y
    loss, grad = softmax_cross_entropy(server_copy.forward(h), y)
    _check_loss(loss, f"client {client.client_id} FSL step")
    cut_grad, s_grads = server_copy.backward(grad)
    sgd_step(server_copy.params(), server_copy.flat_grads(s_grads),
             OptimizerConfig(config.lr_modular))
    _, c_grads = client_part.backward(cut_grad)    # cut_grad sent downlink
    sgd_step(client_part.params(), client_part.flat_grads(c_grads),
             OptimizerConfig(config.lr_base))
    return server_copy.params(), loss, (h, y), cut_grad


def fsl_round(state: FslState, clients, server: Server, config: TrainingConfig) -> dict:
    """One FSL round: a single split step per client, then the per-client
    server-part updates are averaged (weighted by shard size) into the shared
    server part."""
    pairs = list(zip(clients, state.client_parts))
    results = server.map(lambda cp: fsl_client_step(cp[0], cp[1], state.server_part, config),
                         pairs)
    avg = fedavg([r[0] for r in results], [c.n_samples for c in clients])
    state.server_part.set_params(_cast_like(avg, state.server_part.params()))

    server.round += 1
    up = sum(payload_bytes(r[2][0], labels=r[2][1], encoding=server.encoding) for r in results)
    down = sum(payload_bytes(r[3], encoding=server.encoding) for r in results)
    server.ledger.record(server.round, server.protocol, up, down)
    return {
        "round": server.round,
        "uplink_bytes": up,
        "downlink_bytes": down,
        "loss": float(np.mean([r[1] for r in results])),
    }


# ----------------------------------------------------------------- inference

def compose_predict(base: Block, modular: Block, x: np.ndarray) -> np.ndarray:
    """Class predictions of ``modular`` stacked on ``base``."""
    z = base.forward(x)
    try:
        logits = modular.forward(z.reshape(z.shape[0], -1))
    except ShapeError as err:
        raise ContractError(f"modular block cannot consume base output: {err}") from None
    return np.argmax(logits, axis=1)
