"""Communication accounting and evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PROTOCOLS = ("ifl", "fsl", "fl")


@dataclass(frozen=True)
class WireEncoding:
    """Bytes on the wire per transmitted value.

    Activations and parameters travel as float32; a label is one class index
    in a single byte. ``mb`` is the divisor used when reporting megabytes.
    """

    activation_bytes: int = 4
    label_bytes: int = 1
    mb: float = 1e6


DEFAULT_ENCODING = WireEncoding()


def payload_bytes(*arrays, labels=None, encoding: WireEncoding = DEFAULT_ENCODING) -> int:
    """Wire size of float arrays plus an optional label vector."""
    n = sum(int(np.size(a)) for a in arrays) * encoding.activation_bytes
    if labels is not None:
        n += int(np.size(labels)) * encoding.label_bytes
    return n


def _protocol_family(protocol: str) -> str:
    p = protocol.lower()
    if p.startswith("fl"):
        return "fl"
    if p in ("ifl", "fsl"):
        return p
    raise ValueError(f"unknown protocol {protocol!r}")


def uplink_bytes_per_round(protocol: str, config, param_count: int | None = None,
                           fusion_dim: int = 432,
                           encoding: WireEncoding = DEFAULT_ENCODING) -> int:
    """Closed-form client-to-server bytes in one round.

    IFL/FSL: every client uploads one ``B x fusion_dim`` activation batch plus
    ``B`` labels. FL: every client uploads its whole model.
    """
    n, b = config.n_clients, config.batch_size
    family = _protocol_family(protocol)
    if family == "fl":
        if param_count is None:
            raise ValueError("FL accounting needs the model parameter count")
        return n * param_count * encoding.activation_bytes
    return n * (b * fusion_dim * encoding.activation_bytes + b * encoding.label_bytes)


def downlink_bytes_per_round(protocol: str, config, param_count: int | None = None,
                             fusion_dim: int = 432,
                             encoding: WireEncoding = DEFAULT_ENCODING) -> int:
    """Closed-form server-to-client bytes in one round.

    IFL: the concatenated (Z, Y) goes to every client. FSL: each client gets
    the cut-layer gradient for its own batch. FL: the global model to each
    client.
    """
    n, b = config.n_clients, config.batch_size
    family = _protocol_family(protocol)
    if family == "fl":
        if param_count is None:
            raise ValueError("FL accounting needs the model parameter count")
        return n * param_count * encoding.activation_bytes
    if family == "fsl":
        return n * b * fusion_dim * encoding.activation_bytes
    return n * uplink_bytes_per_round("ifl", config, fusion_dim=fusion_dim, encoding=encoding)


@dataclass(frozen=True)
class RoundRecord:
    round: int
    protocol: str
    uplink_bytes: int
    downlink_bytes: int


@dataclass
class CommLedger:
    records: list[RoundRecord] = field(default_factory=list)

    def record(self, round: int, protocol: str, uplink_bytes: int, downlink_bytes: int):
        if self.records and round <= self.records[-1].round:
            raise ValueError(f"round {round} recorded out of order")
        rec = RoundRecord(round, protocol, int(uplink_bytes), int(downlink_bytes))
        self.records.append(rec)
        return rec

    def cumulative_uplink(self, through_round: int | None = None) -> int:
        return sum(r.uplink_bytes for r in self.records
                   if through_round is None or r.round <= through_round)

    def cumulative_downlink(self, through_round: int | None = None) -> int:
        return sum(r.downlink_bytes for r in self.records
                   if through_round is None or r.round <= through_round)

    def __len__(self):
        return len(self.records)


# ---------------------------------------------------------------- evaluation

def predict(forward, images: np.ndarray, chunk: int = 500) -> np.ndarray:
    """Argmax class for every image; ties resolve to the lowest index."""
    out = [np.argmax(forward(images[i:i + chunk]), axis=1)
           for i in range(0, len(images), chunk)]
    return np.concatenate(out) if out else np.empty(0, np.int64)


def test_accuracy(forward, dataset, chunk: int = 500) -> float:
    """Fraction of ``dataset`` that ``forward`` classifies correctly."""
    if len(dataset) == 0:
        raise ValueError("empty test set")
    return float(np.mean(predict(forward, dataset.images, chunk) == dataset.labels))


test_accuracy.__test__ = False  # not a pytest test despite the name


def _features(block, images, chunk):
    return np.concatenate([block.forward(images[i:i + chunk])
                           for i in range(0, len(images), chunk)])


def composition_matrix(models, dataset, chunk: int = 500) -> np.ndarray:
    """Accuracy of every (base k, modular i) pairing on ``dataset``.

    ``models`` is a sequence of objects with ``base`` and ``modular`` blocks.
    Entry ``[k, i]`` uses the base block of ``models[k]`` under the modular
    block of ``models[i]``; the diagonal is each model's local accuracy.
    """
    if len(dataset) == 0:
        raise ValueError("empty test set")
    feats = [_features(m.base, dataset.images, chunk) for m in models]
    n = len(models)
    acc = np.zeros((n, n))
    for k in range(n):
        for i in range(n):
            pred = predict(models[i].modular.forward, feats[k], chunk)
            acc[k, i] = np.mean(pred == dataset.labels)
    return acc


def composition_sd(matrix: np.ndarray, base_index: int) -> float:
    """Population SD of row ``base_index`` in percentage points."""
    matrix = np.asarray(matrix)
    if matrix.shape[0] < 2:
        raise ValueError("composition SD needs at least two clients")
    return float(np.std(matrix[base_index] * 100.0))


def mc_summary(values) -> tuple[float, float]:
    """Mean and population SD across Monte Carlo runs."""
    values = np.asarray(values, dtype=np.float64)
    # centring on one sample first makes identical runs give an SD of exactly 0
    return float(values.mean()), float((values - values[0]).std())
