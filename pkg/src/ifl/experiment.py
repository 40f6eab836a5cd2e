"""Experiment orchestration: seeding, protocol setup, Monte Carlo runs, CSV output."""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import checkpoint
from .data import BatchSampler, DataError, Dataset, dirichlet_partition, load_kmnist, synthetic_dataset
from .metrics import CommLedger, WireEncoding, composition_matrix, composition_sd, mc_summary, test_accuracy
from .models import ContractError, FusionContract, ModelSpec, build_block, build_model, load_specs
from .protocols import (ClientState, FslState, Server, TrainingConfig, fl_round, fsl_round,
                        ifl_round)

log = logging.getLogger(__name__)

PROTOCOL_CHOICES = ("ifl", "fl1", "fl2", "fsl")

# stream tags for seed derivation
PARTITION, INIT, SAMPLER, DATA, SERVER = range(5)

ROUNDS_FIELDS = ["run_id", "protocol", "round", "cumulative_uplink_mb",
                 "cumulative_downlink_mb", "mean_accuracy"]


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    protocol: str = "ifl"
    n_clients: int = 4
    local_steps: int = 10
    rounds: int = 200
    batch_size: int = 32
    alpha: float = 0.5
    lr_base: float = 0.01
    lr_modular: float = 0.01
    lr_fl: float = 0.01
    update_rule: str = "sequential"
    seed: int = 0
    mc_runs: int = 10
    data_dir: str | None = None
    synthetic: bool = False
    train_limit: int | None = 50000
    test_limit: int | None = None
    eval_every: int = 5
    checkpoint_every: int = 0
    threads: int = 1
    specs: str | None = None
    mb_unit: float = 1e6
    out: str = "runs/latest"

    def __post_init__(self):
        if self.protocol not in PROTOCOL_CHOICES:
            raise ConfigError(f"protocol: expected one of {PROTOCOL_CHOICES}, got {self.protocol!r}")
        for name in ("mc_runs", "eval_every", "threads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be >= 1")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every: must be >= 0")
        if not self.synthetic and not self.data_dir:
            raise ConfigError("data_dir: required unless synthetic is set")
        if not self.mb_unit > 0:
            raise ConfigError("mb_unit: must be positive")
        try:
            self.training()
        except ValueError as err:
            raise ConfigError(str(err)) from None

    def training(self) -> TrainingConfig:
        return TrainingConfig(
            n_clients=self.n_clients, local_steps=self.local_steps, rounds=self.rounds,
            batch_size=self.batch_size, lr_base=self.lr_base, lr_modular=self.lr_modular,
            lr_fl=self.lr_fl, alpha=self.alpha, seed=self.seed, update_rule=self.update_rule,
        )

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config field(s): {', '.join(sorted(unknown))}")
        return cls(**d)


def stream(master_seed: int, *key: int) -> np.random.Generator:
    """Independent generator for ``(master_seed, *key)``.

    Keys are (run_index, client_id, stream_tag); the mapping does not depend on
    the order in which streams are requested.
    """
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=key))


def load_data(config: ExperimentConfig) -> tuple[Dataset, Dataset]:
    if config.synthetic:
        n_train = config.train_limit or 50000
        n_test = config.test_limit or 10000
        train = synthetic_dataset(n_train, stream(config.seed, 0, 0, DATA))
        test = synthetic_dataset(n_test, stream(config.seed, 1, 0, DATA))
        return train, test
    train = load_kmnist(config.data_dir, "train").head(config.train_limit)
    test = load_kmnist(config.data_dir, "test").head(config.test_limit)
    return train, test


def client_specs(specs: list[ModelSpec], n_clients: int) -> list[ModelSpec]:
    """Assign architectures to clients, cycling when there are more clients than specs."""
    return [specs[k % len(specs)] for k in range(n_clients)]


@dataclass
class Run:
    """All mutable state of one seeded run of one protocol."""

    protocol: str
    clients: list[ClientState]
    server: Server
    fsl: FslState | None = None

    def step(self, config: TrainingConfig) -> dict:
        if self.protocol == "ifl":
            return ifl_round(self.clients, self.server, config)
        if self.protocol == "fsl":
            return fsl_round(self.fsl, self.clients, self.server, config)
        return fl_round(self.clients, self.server, config)

    def eval_models(self):
        """(base, modular) pairs evaluated as each client's local model."""
        if self.protocol == "fsl":
            return [_Pair(part, self.fsl.server_part) for part in self.fsl.client_parts]
        return [c.model for c in self.clients]


@dataclass
class _Pair:
    base: object
    modular: object

    def forward(self, x):
        return self.modular.forward(self.base.forward(x))


def setup_run(config: ExperimentConfig, run_index: int, train: Dataset,
              executor=None) -> Run:
    tc = config.training()
    specs, contract = load_specs(config.specs)
    contract = FusionContract(contract.fusion_dim, tc.batch_size, contract.input_shape)
    seed = config.seed
    shards = dirichlet_partition(train.labels, tc.n_clients, tc.alpha,
                                 stream(seed, run_index, 0, PARTITION),
                                 min_size=tc.batch_size)
    assigned = client_specs(specs, tc.n_clients)
    fl = config.protocol in ("fl1", "fl2")
    if fl:
        assigned = [specs[0 if config.protocol == "fl1" else 1]] * tc.n_clients
    clients = []
    for k, (spec, idx) in enumerate(zip(assigned, shards), start=1):
        # FL clients all start from one global initialisation
        init = stream(seed, run_index, 0, SERVER) if fl else stream(seed, run_index, k, INIT)
        model = build_model(spec, init, contract)
        sampler = BatchSampler(idx, tc.batch_size, stream(seed, run_index, k, SAMPLER))
        clients.append(ClientState(k, model, train, idx, sampler))
    encoding = WireEncoding(mb=config.mb_unit)
    server = Server(config.protocol, CommLedger(), encoding, executor)
    fsl = None
    if config.protocol == "fsl":
        server_part = build_block(specs[0].modular_layers, stream(seed, run_index, 0, SERVER))
        fsl = FslState([c.model.base for c in clients], server_part,
                       contract.fusion_dim, contract.input_shape)
    return Run(config.protocol, clients, server, fsl)


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def run_one(config: ExperimentConfig, run_index: int, train: Dataset, test: Dataset,
            out: Path, executor=None) -> dict:
    """Train one seeded run, evaluating and checkpointing on the configured cadence.

    Returns rows for rounds.csv, composition.csv and sd.csv.
    """
    tc = config.training()
    run = setup_run(config, run_index, train, executor)
    rows = {"rounds": [], "composition": [], "sd": []}
    mb = config.mb_unit
    for t in range(1, tc.rounds + 1):
        run.step(tc)
        if t % config.eval_every and t != tc.rounds:
            continue
        models = run.eval_models()
        ledger = run.server.ledger
        if config.protocol == "ifl":
            matrix = composition_matrix(models, test)
            accs = np.diag(matrix)
            for k in range(len(models)):
                for i in range(len(models)):
                    rows["composition"].append([run_index, t, k + 1, i + 1, _fmt(matrix[k, i])])
                if len(models) > 1:
                    rows["sd"].append([run_index, t, k + 1, _fmt(composition_sd(matrix, k))])
        elif config.protocol == "fsl":
            accs = [test_accuracy(m.forward, test) for m in models]
        else:
            # every FL client holds the same global model after aggregation
            acc = test_accuracy(models[0].forward, test)
            accs = [acc] * len(models)
        rows["rounds"].append(
            [run_index, config.protocol, t, _fmt(ledger.cumulative_uplink() / mb),
             _fmt(ledger.cumulative_downlink() / mb), _fmt(float(np.mean(accs)))]
            + [_fmt(a) for a in accs])
        log.info("%s run %d round %d: mean acc %.4f, uplink %.3f MB", config.protocol,
                 run_index, t, np.mean(accs), ledger.cumulative_uplink() / mb)
        if (config.checkpoint_every and t % config.checkpoint_every == 0) or t == tc.rounds:
            save_checkpoints(models, out / "checkpoints" / f"run{run_index}" / f"round{t}")
    return rows


def save_checkpoints(models, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for k, m in enumerate(models, start=1):
        checkpoint.save_block(m.base, directory / f"client{k}_base.mfw")
        checkpoint.save_block(m.modular, directory / f"client{k}_modular.mfw")


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def run_experiment(config: ExperimentConfig) -> dict:
    """Run ``mc_runs`` seeded runs and write rounds.csv (+ composition.csv and
    sd.csv for IFL) and config.resolved into ``config.out``."""
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(json.dumps(asdict(config), indent=2, sort_keys=True) + "\n")
    train, test = load_data(config)
    executor = ThreadPoolExecutor(config.threads) if config.threads > 1 else None
    try:
        all_rows = {"rounds": [], "composition": [], "sd": []}
        for r in range(config.mc_runs):
            rows = run_one(config, r, train, test, out, executor)
            for key in all_rows:
                all_rows[key].extend(rows[key])
    finally:
        if executor is not None:
            executor.shutdown()
    header = ROUNDS_FIELDS + [f"acc_client{k}" for k in range(1, config.n_clients + 1)]
    _write_csv(out / "rounds.csv", header, all_rows["rounds"])
    if config.protocol == "ifl":
        _write_csv(out / "composition.csv",
                   ["run_id", "round", "base_id", "modular_id", "accuracy"], all_rows["composition"])
        _write_csv(out / "sd.csv", ["run_id", "round", "base_id", "sd_pp"], all_rows["sd"])
    return summarize(all_rows["rounds"], config)


def summarize(rounds_rows, config: ExperimentConfig) -> dict:
    last = [r for r in rounds_rows if r[2] == config.rounds]
    acc = mc_summary([float(r[5]) for r in last])
    mb = mc_summary([float(r[3]) for r in last])
    return {"protocol": config.protocol, "runs": len(last), "final_accuracy": acc,
            "cumulative_uplink_mb": mb}


# --------------------------------------------------------------- comparison

def read_rounds(run_dir) -> list[dict]:
    path = Path(run_dir) / "rounds.csv"
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        missing = set(ROUNDS_FIELDS) - set(reader.fieldnames or [])
        if missing:
            raise DataError(f"{path}: missing column(s) {', '.join(sorted(missing))}")
        return list(reader)


def mean_curve(rows) -> list[dict]:
    """Average accuracy and cumulative MB over runs, per (protocol, round)."""
    groups = {}
    for r in rows:
        groups.setdefault((r["protocol"], int(r["round"])), []).append(r)
    curve = []
    for (protocol, rnd), grp in sorted(groups.items()):
        curve.append({
            "protocol": protocol,
            "round": rnd,
            "cumulative_uplink_mb": float(np.mean([float(g["cumulative_uplink_mb"]) for g in grp])),
            "mean_accuracy": float(np.mean([float(g["mean_accuracy"]) for g in grp])),
            "accuracy_sd": float(np.std([float(g["mean_accuracy"]) for g in grp])),
            "runs": len(grp),
        })
    return curve


def mb_to_reach(curve, threshold: float) -> float | None:
    """First cumulative uplink MB at which mean accuracy >= ``threshold``;
    None if the curve never gets there."""
    for point in sorted(curve, key=lambda p: p["round"]):
        if point["mean_accuracy"] >= threshold:
            return point["cumulative_uplink_mb"]
    return None


def compare_runs(run_dirs, thresholds=(0.9,)) -> tuple[list[dict], dict]:
    """Merge run directories into one accuracy-vs-MB table.

    Returns the merged table (sorted by protocol, then MB) and, per protocol,
    the MB needed to reach each threshold (None when unreached).
    """
    rows = [r for d in run_dirs for r in read_rounds(d)]
    table = mean_curve(rows)
    reach = {}
    for protocol in sorted({p["protocol"] for p in table}):
        curve = [p for p in table if p["protocol"] == protocol]
        reach[protocol] = {t: mb_to_reach(curve, t) for t in thresholds}
    table.sort(key=lambda p: (p["protocol"], p["cumulative_uplink_mb"], p["round"]))
    return table, reach


# ------------------------------------------------------- post-hoc composition

def load_client_checkpoints(directory) -> tuple[list[_Pair], list[str]]:
    directory = Path(directory)
    bases = sorted(directory.glob("client*_base.mfw"),
                   key=lambda p: int(p.name[len("client"):-len("_base.mfw")]))
    if not bases:
        raise DataError(f"no client*_base.mfw checkpoints in {directory}")
    pairs = []
    for b in bases:
        m = b.with_name(b.name.replace("_base.mfw", "_modular.mfw"))
        if not m.exists():
            raise DataError(f"{b.name} has no matching {m.name}")
        pairs.append(_Pair(checkpoint.load_block(b), checkpoint.load_block(m)))
    return pairs, [b.name[:-len("_base.mfw")] for b in bases]


def compose_eval(checkpoint_dir, test: Dataset, out_dir=None, run_id=0, round=0):
    """Evaluate every base/modular pairing of the checkpoints in ``checkpoint_dir``.

    Writes composition.csv and (for two or more clients) sd.csv into
    ``out_dir`` when given. Returns the accuracy matrix.
    """
    pairs, names = load_client_checkpoints(checkpoint_dir)
    input_shape = test.images.shape[1:]
    widths = [int(np.prod(p.base.output_shape(input_shape))) for p in pairs]
    bad = []
    for name, p in zip(names, pairs):
        first = p.modular.layers[0]
        accepts = getattr(first, "in_dim", None)
        if accepts is None or any(w != accepts for w in widths):
            bad.append(name)
    if len(set(widths)) != 1 or bad:
        offenders = sorted(set(bad) | {n for n, w in zip(names, widths) if w != widths[0]})
        raise ContractError(f"fusion contract violated by: {', '.join(offenders)} (widths {widths})")
    matrix = composition_matrix(pairs, test)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        n = len(pairs)
        _write_csv(out_dir / "composition.csv", ["run_id", "round", "base_id", "modular_id", "accuracy"],
                   [[run_id, round, k + 1, i + 1, _fmt(matrix[k, i])] for k in range(n) for i in range(n)])
        if n > 1:
            _write_csv(out_dir / "sd.csv", ["run_id", "round", "base_id", "sd_pp"],
                       [[run_id, round, k + 1, _fmt(composition_sd(matrix, k))] for k in range(n)])
    return matrix
