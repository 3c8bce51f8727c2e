"""Protocol simulation: FedCache, class-grained logit federation (FD) and standalone training.

A round is one local epoch per client. Within a round, each client walks its
training split in batches; the order in which different clients' batches reach
the server is given by a schedule (round-robin for synchronous runs, a seeded
random interleaving for asynchronous ones). The server processes batch events
one at a time in schedule order.
"""

from __future__ import annotations

import dataclasses
import logging
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import data as data_mod
from . import models
from .ann_index import HNSWParams
from .encoder import Encoder, EncoderSpec
from .errors import ConflictError, InvalidArgument, InvariantViolation
from .knowledge_cache import KnowledgeCache
from .metrics import MetricsReport, RoundRecord

log = logging.getLogger(__name__)

FLOAT_BYTES = 8
INT_BYTES = 4

UPLINK_KINDS = ("hash_upload", "knowledge_upload", "fd_class_upload")
DOWNLINK_KINDS = ("ensemble_down", "fd_class_down")


@dataclass(frozen=True)
class Message:
    """Wire message shape: how many reals and integer ids/labels/counts it carries."""

    kind: str
    floats: int
    ints: int

    def __post_init__(self):
        if self.kind not in UPLINK_KINDS + DOWNLINK_KINDS:
            raise InvalidArgument(f"unknown message kind {self.kind!r}")

    @property
    def byte_size(self) -> int:
        return FLOAT_BYTES * self.floats + INT_BYTES * self.ints

    @property
    def uplink(self) -> bool:
        return self.kind in UPLINK_KINDS


def hash_upload(hash_dim: int) -> Message:
    return Message("hash_upload", hash_dim, 3)  # client id, sample id, label


def knowledge_upload(C: int) -> Message:
    return Message("knowledge_upload", C, 2)


def ensemble_down(C: int, has_teacher: bool = True) -> Message:
    return Message("ensemble_down", C if has_teacher else 0, 2)


def fd_class_upload(C: int) -> Message:
    return Message("fd_class_upload", C * C, C)  # per-class mean logits + per-class counts


def fd_class_down(C: int) -> Message:
    return Message("fd_class_down", C * C, 0)


class CommLedger:
    """Cumulative bytes and message counts per kind, with per-round snapshots."""

    def __init__(self):
        self.bytes: dict[str, int] = {k: 0 for k in UPLINK_KINDS + DOWNLINK_KINDS}
        self.counts: dict[str, int] = {k: 0 for k in UPLINK_KINDS + DOWNLINK_KINDS}
        self.snapshots: list[tuple[int, int, int]] = []

    def record(self, msg: Message, count: int = 1) -> None:
        self.bytes[msg.kind] += msg.byte_size * count
        self.counts[msg.kind] += count

    @property
    def up(self) -> int:
        return sum(self.bytes[k] for k in UPLINK_KINDS)

    @property
    def down(self) -> int:
        return sum(self.bytes[k] for k in DOWNLINK_KINDS)

    @property
    def total(self) -> int:
        return self.up + self.down

    def snapshot(self, round_no: int) -> None:
        self.snapshots.append((round_no, self.up, self.down))


@dataclass
class ExperimentConfig:
    algorithm: str = "fedcache"
    K: int = 20
    R: int = 16
    beta: float = 1.5
    temperature: float = 1.0
    lr: float = 0.01
    batch_size: int = 8
    rounds: int = 30
    alpha: float = 1.0
    seed: int = 0
    models: str = "hetero"
    width_scale: int = 1
    exclude_same_client: bool = False
    skip_cold_teachers: bool = False
    schedule: str = "sync"
    async_seed: int = 0
    fd_gamma: float = 1.0
    shuffle: bool = True
    # data
    dataset: str = "synth"
    num_classes: int = 10
    per_class: int = 200
    dim: int = 64
    class_sep: float = 3.0
    idx_images: str = ""
    idx_labels: str = ""
    test_fraction: float = 0.2
    local_fraction: float = 0.0
    # hashing / retrieval
    hash_dim: int = 32
    encoder_depth: int = 3
    encode_standalone: bool = False
    hnsw_M: int = 16
    ef_construction: int = 200
    ef_search: int = 64
    acc_targets: tuple[float, ...] = ()

    def validate(self) -> "ExperimentConfig":
        if self.algorithm not in ("fedcache", "fd", "standalone"):
            raise InvalidArgument(f"algorithm must be fedcache, fd or standalone, got {self.algorithm!r}")
        if self.schedule not in ("sync", "async"):
            raise InvalidArgument(f"schedule must be sync or async, got {self.schedule!r}")
        if self.dataset not in ("synth", "idx"):
            raise InvalidArgument(f"dataset must be synth or idx, got {self.dataset!r}")
        positive = ("K", "R", "temperature", "lr", "batch_size", "rounds", "alpha", "width_scale",
                    "num_classes", "per_class", "dim", "hash_dim", "encoder_depth", "hnsw_M",
                    "ef_construction", "ef_search")
        for name in positive:
            if not getattr(self, name) > 0:
                raise InvalidArgument(f"{name} must be positive, got {getattr(self, name)!r}")
        if self.beta < 0 or self.fd_gamma < 0 or self.class_sep < 0:
            raise InvalidArgument("beta, fd_gamma and class_sep must be non-negative")
        if not 0 < self.test_fraction < 1:
            raise InvalidArgument("test_fraction must be in (0, 1)")
        if not 0 <= self.local_fraction <= 1:
            raise InvalidArgument("local_fraction must be in [0, 1]")
        if self.algorithm == "fd" and self.K < 2:
            raise InvalidArgument("FD needs at least 2 clients")
        if self.dataset == "idx" and not (self.idx_images and self.idx_labels):
            raise InvalidArgument("idx dataset needs idx_images and idx_labels")
        if self.models != "hetero" and self.models not in models.ARCHITECTURES:
            raise InvalidArgument(f"unknown model assignment {self.models!r}")
        if any(not 0 <= t <= 1 for t in self.acc_targets):
            raise InvalidArgument("acc targets must lie in [0, 1]")
        return self

    def hnsw_params(self) -> HNSWParams:
        return HNSWParams(self.hnsw_M, self.ef_construction, self.ef_search, seed=self.seed)

    # flat key=value serialisation

    def to_kv(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, tuple):
                v = ",".join(repr(x) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def to_mapping(self) -> dict[str, str]:
        return parse_kv(self.to_kv())

    @classmethod
    def from_kv(cls, text: str, overrides: dict[str, str] | None = None) -> "ExperimentConfig":
        raw = parse_kv(text)
        raw.update(overrides or {})
        return cls.from_mapping(raw)

    @classmethod
    def from_mapping(cls, raw: dict[str, str]) -> "ExperimentConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, value in raw.items():
            if key not in types:
                raise InvalidArgument(f"unknown config key {key!r}")
            kind = types[key]
            try:
                if kind == "bool":
                    if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                        raise ValueError(value)
                    kwargs[key] = value.lower() in ("true", "1", "yes")
                elif kind == "int":
                    kwargs[key] = int(value)
                elif kind == "float":
                    kwargs[key] = float(value)
                elif kind.startswith("tuple"):
                    kwargs[key] = tuple(float(v) for v in value.split(",") if v.strip())
                else:
                    kwargs[key] = value
            except ValueError:
                raise InvalidArgument(f"bad value for {key}: {value!r}") from None
        return cls(**kwargs).validate()


def parse_kv(text: str) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidArgument(f"config line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        raw[key] = value
    return raw


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


# State


@dataclass
class ClientState:
    client_id: int
    model: models.ClientModel
    shard: data_mod.ClientShard
    rounds_done: int = 0
    # FD: per-class teacher distributions from the last download, and which classes have one
    fd_teacher: np.ndarray | None = None
    fd_has: np.ndarray | None = None
    # FD: running per-class logit sums and counts for the current round
    fd_sums: np.ndarray | None = None
    fd_counts: np.ndarray | None = None

    def keys(self) -> list[tuple[int, int]]:
        return [(self.client_id, i) for i in range(len(self.shard.train))]


@dataclass
class ServerState:
    ledger: CommLedger = field(default_factory=CommLedger)
    cache: KnowledgeCache | None = None
    # FD: last uploaded per-client class means (K, C, C) and counts (K, C)
    fd_means: np.ndarray | None = None
    fd_counts: np.ndarray | None = None
    fd_teacher_logits: np.ndarray | None = None

    @property
    def parameter_bytes(self) -> int:
        return 0  # the server never stores model parameters in any algorithm here


def load_dataset(config: ExperimentConfig) -> data_mod.LabeledDataset:
    if config.dataset == "idx":
        return data_mod.load_idx(config.idx_images, config.idx_labels, config.num_classes)
    return data_mod.synth_gaussian(config.num_classes, config.per_class, config.dim, config.class_sep, config.seed)


def build_shards(config: ExperimentConfig, dataset: data_mod.LabeledDataset) -> list[data_mod.ClientShard]:
    shards = data_mod.make_shards(dataset, config.K, config.alpha, config.seed, config.test_fraction)
    if config.local_fraction > 0:
        n_keep = max(1, round(config.local_fraction * len(dataset)))
        shards = [data_mod.subsample_train(s, n_keep, derive_seed(config.seed, 5, s.client_id)) for s in shards]
    return shards


def build_clients(config: ExperimentConfig, shards: Sequence[data_mod.ClientShard]) -> list[ClientState]:
    clients = []
    for shard in shards:
        k = shard.client_id
        arch = models.assign_architecture(k, config.models)
        spec = models.make_spec(arch, shard.train.dim, config.num_classes, config.width_scale)
        clients.append(ClientState(k, models.build_model(spec, derive_seed(config.seed, 2, k)), shard))
    return clients


def make_encoder(config: ExperimentConfig, input_dim: int) -> Encoder:
    return Encoder(EncoderSpec.default(input_dim, config.hash_dim, config.encoder_depth, derive_seed(config.seed, 3)))


def run_initialization(
    config: ExperimentConfig,
    shards: Sequence[data_mod.ClientShard],
    encoder: Encoder | None,
    record_events: bool = False,
) -> tuple[ServerState, list[ClientState]]:
    """Build clients; for FedCache, hash every training sample once and build the cache relations."""
    ids = [s.client_id for s in shards]
    if len(set(ids)) != len(ids):
        raise ConflictError("duplicate client ids among shards")
    clients = build_clients(config, shards)
    server = ServerState()
    wants_hashes = config.algorithm == "fedcache" or (config.algorithm == "standalone" and config.encode_standalone)
    if not wants_hashes:
        return server, clients
    if encoder is None:
        raise InvalidArgument("hash uploads need an encoder")
    cache = KnowledgeCache(config.num_classes, encoder.spec.output_dim, record_events=record_events)
    msg = hash_upload(encoder.spec.output_dim)
    for c in clients:
        if len(c.shard.train) == 0:
            continue
        hashes = encoder.encode_batch(c.shard.train.features)
        for key, label, h in zip(c.keys(), c.shard.train.labels.tolist(), hashes):
            cache.init_entry(key, label, h)
        server.ledger.record(msg, len(hashes))
    if config.algorithm == "fedcache":
        cache.build_relations(config.R, config.hnsw_params(), config.exclude_same_client)
        server.cache = cache
    return server, clients


# Scheduling


def batch_order(config: ExperimentConfig, client: ClientState, round_no: int) -> list[np.ndarray]:
    n = len(client.shard.train)
    if config.shuffle:
        order = np.random.default_rng(derive_seed(config.seed, 4, round_no, client.client_id)).permutation(n)
    else:
        order = np.arange(n)
    return [order[s : s + config.batch_size] for s in range(0, n, config.batch_size)]


def round_robin_schedule(batch_counts: Sequence[int]) -> list[tuple[int, int]]:
    """Batch b of every client, then batch b+1 of every client, ... (lock-step)."""
    events = []
    for b in range(max(batch_counts, default=0)):
        for k, n in enumerate(batch_counts):
            if b < n:
                events.append((k, b))
    return events


def async_schedule(batch_counts: Sequence[int], seed: int) -> list[tuple[int, int]]:
    """Uniformly random interleaving of all clients' batch events; each client's own order is kept."""
    owners = np.repeat(np.arange(len(batch_counts)), batch_counts)
    owners = np.random.default_rng(seed).permutation(owners)
    nxt = [0] * len(batch_counts)
    events = []
    for k in owners.tolist():
        events.append((k, nxt[k]))
        nxt[k] += 1
    return events


def round_schedule(config: ExperimentConfig, batch_counts: Sequence[int], round_no: int) -> list[tuple[int, int]]:
    if config.schedule == "async":
        return async_schedule(batch_counts, derive_seed(config.async_seed, 6, round_no))
    return round_robin_schedule(batch_counts)


def _events(config, clients, round_no, schedule):
    batches = [batch_order(config, c, round_no) for c in clients]
    if schedule is None:
        schedule = round_schedule(config, [len(b) for b in batches], round_no)
    for pos, b in schedule:
        yield clients[pos], batches[pos][b]


# Rounds


def fedcache_round(
    server: ServerState,
    clients: Sequence[ClientState],
    round_no: int,
    config: ExperimentConfig,
    schedule: Sequence[tuple[int, int]] | None = None,
) -> None:
    cache = server.cache
    if cache is None or not cache.frozen:
        raise InvariantViolation("FedCache round before cache initialisation")
    C = config.num_classes
    up_msg = knowledge_upload(C)
    down_msg = ensemble_down(C, True)
    empty_down = ensemble_down(C, False)
    for client, idx in _events(config, clients, round_no, schedule):
        xs = client.shard.train.features[idx]
        ys = client.shard.train.labels[idx]
        z = models.forward_batch(client.model, xs)
        teachers = np.zeros((len(idx), C))
        has = np.zeros(len(idx), dtype=bool)
        for j, i in enumerate(idx.tolist()):
            server.ledger.record(up_msg)
            t = cache.handle_upload((client.client_id, i), z[j], config.temperature, config.skip_cold_teachers)
            if t is None:
                server.ledger.record(empty_down)
            else:
                server.ledger.record(down_msg)
                teachers[j] = t
                has[j] = True
        client.model, _ = models.train_step(
            client.model, xs, ys, teachers, has,
            beta=config.beta, temperature=config.temperature, lr=config.lr, distill="kl",
        )
    for c in clients:
        c.rounds_done += 1


def standalone_round(
    clients: Sequence[ClientState],
    round_no: int,
    config: ExperimentConfig,
    schedule: Sequence[tuple[int, int]] | None = None,
) -> None:
    for client, idx in _events(config, clients, round_no, schedule):
        xs = client.shard.train.features[idx]
        ys = client.shard.train.labels[idx]
        client.model, _ = models.train_step(client.model, xs, ys, lr=config.lr, temperature=config.temperature)
    for c in clients:
        c.rounds_done += 1


def fd_teachers(means: np.ndarray, counts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Leave-one-out per-class teacher logits.

    ``means`` is (K, C, C): client k's mean logits on its class-y samples;
    ``counts`` is (K, C). Client k's teacher for class y is the mean of the
    other clients' class-y means, over the clients that hold class y. Classes
    held by no other client get no teacher.
    """
    K = len(means)
    present = (counts > 0).astype(np.float64)  # (K, C)
    # sum over l != k directly rather than (total - own), so K=2 is exact
    weights = (1.0 - np.eye(K))[:, :, None] * present[None, :, :]  # (k, l, y)
    held = np.where(counts[:, :, None] > 0, means, 0.0)
    sums = np.einsum("kly,lyc->kyc", weights, held)
    others = weights.sum(axis=1)  # (K, C)
    has = others > 0
    teacher = sums / np.where(has, others, 1.0)[:, :, None]
    teacher[~has] = 0.0
    return teacher, has


def fd_round(
    server: ServerState,
    clients: Sequence[ClientState],
    round_no: int,
    config: ExperimentConfig,
    schedule: Sequence[tuple[int, int]] | None = None,
) -> None:
    K, C = len(clients), config.num_classes
    if K < 2:
        raise InvalidArgument("FD needs at least 2 clients")
    for c in clients:
        c.fd_sums = np.zeros((C, C))
        c.fd_counts = np.zeros(C, dtype=np.int64)
    for client, idx in _events(config, clients, round_no, schedule):
        xs = client.shard.train.features[idx]
        ys = client.shard.train.labels[idx]
        z = models.forward_batch(client.model, xs)
        np.add.at(client.fd_sums, ys, z)
        np.add.at(client.fd_counts, ys, 1)
        if client.fd_teacher is not None:
            teachers, has = client.fd_teacher[ys], client.fd_has[ys]
        else:
            teachers, has = None, None
        client.model, _ = models.train_step(
            client.model, xs, ys, teachers, has,
            beta=config.fd_gamma, temperature=1.0, lr=config.lr, distill="soft_ce",
        )
    # end of round: class means go up, leave-one-out teachers come down
    up, down = fd_class_upload(C), fd_class_down(C)
    means = np.zeros((K, C, C))
    counts = np.zeros((K, C), dtype=np.int64)
    for pos, c in enumerate(clients):
        counts[pos] = c.fd_counts
        nz = c.fd_counts > 0
        means[pos, nz] = c.fd_sums[nz] / c.fd_counts[nz, None]
        server.ledger.record(up)
    teacher_logits, has = fd_teachers(means, counts)
    server.fd_means, server.fd_counts, server.fd_teacher_logits = means, counts, teacher_logits
    for pos, c in enumerate(clients):
        server.ledger.record(down)
        c.fd_teacher = np.exp(teacher_logits[pos] - teacher_logits[pos].max(axis=1, keepdims=True))
        c.fd_teacher /= c.fd_teacher.sum(axis=1, keepdims=True)
        c.fd_has = has[pos]
        c.rounds_done += 1


def evaluate_clients(clients: Sequence[ClientState]) -> list[float]:
    return [models.evaluate(c.model, c.shard.test.features, c.shard.test.labels) for c in clients]


@dataclass
class RunResult:
    report: MetricsReport
    server: ServerState
    clients: list[ClientState]
    encoder: Encoder | None = None


def run(config: ExperimentConfig, dataset: data_mod.LabeledDataset | None = None, record_events: bool = False) -> RunResult:
    """Full experiment with access to final states (for audits); see :func:`run_experiment`."""
    config.validate()
    dataset = dataset if dataset is not None else load_dataset(config)
    shards = build_shards(config, dataset)
    active = [s for s in shards if len(s.train) > 0]
    if len(active) < len(shards):
        log.warning("skipping %d clients with empty training splits", len(shards) - len(active))
    encoder = make_encoder(config, dataset.dim)
    server, clients = run_initialization(config, active, encoder, record_events)
    encoded_at_init = encoder.calls
    report = MetricsReport(config.algorithm, init_bytes_up=server.ledger.up, acc_targets=tuple(config.acc_targets))

    step = {"fedcache": lambda r: fedcache_round(server, clients, r, config),
            "fd": lambda r: fd_round(server, clients, r, config),
            "standalone": lambda r: standalone_round(clients, r, config)}[config.algorithm]
    for r in range(1, config.rounds + 1):
        step(r)
        server.ledger.snapshot(r)
        report.records.append(RoundRecord(r, evaluate_clients(clients), server.ledger.up, server.ledger.down))

    if encoder.calls != encoded_at_init:
        raise InvariantViolation("samples were re-encoded after initialisation")
    if config.algorithm == "fedcache":
        stale = [k for k, v in server.cache.IK.items() if v.version != config.rounds]
        if stale:
            raise InvariantViolation(f"{len(stale)} cache entries missed an update, e.g. {stale[0]}")
    return RunResult(report, server, clients, encoder)


def run_experiment(config: ExperimentConfig, dataset: data_mod.LabeledDataset | None = None) -> MetricsReport:
    return run(config, dataset).report


def default_seed() -> int:
    return int(os.environ.get("FEDCACHE_SEED", "0"))


def closed_form_fedcache_round_bytes(n_train: int, C: int) -> int:
    """Per-round FedCache traffic for one client whose samples all have teachers."""
    return n_train * knowledge_upload(C).byte_size + n_train * ensemble_down(C).byte_size


def closed_form_hash_bytes(n_train: int, hash_dim: int) -> int:
    return n_train * hash_upload(hash_dim).byte_size


__all__ = [
    "ClientState", "CommLedger", "ExperimentConfig", "Message", "RunResult", "ServerState",
    "async_schedule", "fd_round", "fd_teachers", "fedcache_round", "round_robin_schedule",
    "run", "run_experiment", "run_initialization", "standalone_round",
]
