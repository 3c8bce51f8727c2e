"""Slow, independent reference implementations used by the test-suite.

Nothing here calls into ``numeric``, ``models``, ``ann_index``,
``knowledge_cache`` or ``federation``; only plain data (parameter vectors,
layer widths, arrays) crosses the boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import mpmath
import numpy as np

SampleIndex = tuple[int, int]

mpmath.mp.dps = 50


# High-precision evaluation


def mp_softmax(logits: Sequence[float], temperature: float = 1.0) -> list[mpmath.mpf]:
    z = [mpmath.mpf(v) / mpmath.mpf(temperature) for v in logits]
    e = [mpmath.e**v for v in z]
    s = mpmath.fsum(e)
    return [v / s for v in e]


def mp_cross_entropy(probs: Sequence, label: int) -> mpmath.mpf:
    return -mpmath.log(mpmath.mpf(probs[label]))


def mp_kl(p: Sequence, q: Sequence, floor: float = 1e-12) -> mpmath.mpf:
    total = mpmath.mpf(0)
    for pi, qi in zip(p, q):
        pi, qi = mpmath.mpf(pi), max(mpmath.mpf(qi), mpmath.mpf(floor))
        if pi > 0:
            total += pi * mpmath.log(pi / qi)
    return total


# Exact nearest neighbours, written as a plain sort


def exact_neighbors(
    hashes: Mapping[SampleIndex, Sequence[float]],
    labels: Mapping[SampleIndex, int],
    key: SampleIndex,
    R: int,
    exclude_same_client: bool = False,
) -> list[SampleIndex]:
    scored = []
    q = [float(v) for v in hashes[key]]
    for other, vec in hashes.items():
        if other == key or labels[other] != labels[key]:
            continue
        if exclude_same_client and other[0] == key[0]:
            continue
        sim = sum(a * float(b) for a, b in zip(q, vec))
        scored.append((-sim, other))
    scored.sort()
    return [k for _, k in scored[:R]]


# Cache replay


@dataclass
class ReplayResult:
    ok: bool
    index: int | None = None
    reason: str = ""


def replay_check(events: Sequence) -> ReplayResult:
    """Re-run a cache event log against a plain dict and compare every fetch.

    Each event has ``kind`` ("init" / "update" / "fetch"), ``key`` and ``payload``
    (update: ``(logits,)``; fetch: ``(related, versions, logits_matrix)``).
    """
    state: dict[SampleIndex, tuple[int, np.ndarray | None]] = {}
    relations: dict[SampleIndex, tuple] = {}
    for pos, ev in enumerate(events):
        if ev.kind == "init":
            if ev.key in state:
                return ReplayResult(False, pos, f"{ev.key} initialised twice")
            state[ev.key] = (0, None)
        elif ev.kind == "update":
            if ev.key not in state:
                return ReplayResult(False, pos, f"update of unknown {ev.key}")
            version, _ = state[ev.key]
            state[ev.key] = (version + 1, np.array(ev.payload[0], dtype=np.float64))
        elif ev.kind == "fetch":
            related, versions, logits = ev.payload
            related = tuple(related)
            if relations.setdefault(ev.key, related) != related:
                return ReplayResult(False, pos, f"relations of {ev.key} changed")
            if len(versions) != len(related) or len(logits) != len(related):
                return ReplayResult(False, pos, "fetch record is malformed")
            for j, r in enumerate(related):
                if r not in state:
                    return ReplayResult(False, pos, f"fetched unknown {r}")
                version, expect = state[r]
                got = np.asarray(logits[j], dtype=np.float64)
                if expect is None:
                    expect = np.zeros_like(got)
                if versions[j] != version or not np.array_equal(got, expect):
                    return ReplayResult(False, pos, f"fetch of {r} for {ev.key} diverges from replay")
        else:
            return ReplayResult(False, pos, f"unknown event kind {ev.kind!r}")
    return ReplayResult(True)


# Naive FedCache rounds


@dataclass
class TinyClient:
    widths: Sequence[int]  # input, hidden..., classes
    params: np.ndarray
    features: np.ndarray
    labels: Sequence[int]


@dataclass
class TinyScenario:
    clients: list[TinyClient]
    hashes: dict[SampleIndex, np.ndarray]
    # rounds[r] is the ordered list of (client_id, sample positions) batch events
    rounds: list[list[tuple[int, list[int]]]]
    R: int = 1
    beta: float = 1.5
    temperature: float = 1.0
    lr: float = 0.01


@dataclass
class OracleResult:
    params: list[np.ndarray]
    teachers: list[dict[SampleIndex, np.ndarray | None]] = field(default_factory=list)


def _unpack(widths, flat):
    layers, pos = [], 0
    for a, b in zip(widths[:-1], widths[1:]):
        w = np.array(flat[pos : pos + a * b]).reshape(a, b)
        pos += a * b
        layers.append((w, np.array(flat[pos : pos + b])))
        pos += b
    return layers


def _softmax(v, T):
    v = np.asarray(v, dtype=np.float64) / T
    e = np.exp(v - v.max())
    return e / e.sum()


def _sample_grad(widths, flat, x, y, teacher, beta, T):
    layers = _unpack(widths, flat)
    acts = [np.asarray(x, dtype=np.float64)]
    for i, (w, b) in enumerate(layers):
        pre = acts[-1] @ w + b
        acts.append(pre if i == len(layers) - 1 else np.maximum(pre, 0.0))
    p = _softmax(acts[-1], T)
    dz = p.copy()
    dz[y] -= 1.0
    dz /= T
    if teacher is not None and beta > 0:
        g = np.log(p) - np.log(np.maximum(teacher, 1e-12))
        dz += beta * p * (g - np.dot(p, g)) / T
    grads = []
    delta = dz
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        grads.append((np.outer(acts[i], delta).ravel(), delta.copy()))
        if i > 0:
            delta = (w @ delta) * (acts[i] > 0)
    flat_grad = []
    for gw, gb in reversed(grads):
        flat_grad.extend([gw, gb])
    return np.concatenate(flat_grad)


def _logits(widths, flat, x):
    h = np.asarray(x, dtype=np.float64)
    layers = _unpack(widths, flat)
    for i, (w, b) in enumerate(layers):
        h = h @ w + b
        if i < len(layers) - 1:
            h = np.maximum(h, 0.0)
    return h


def naive_round_oracle(sc: TinyScenario) -> OracleResult:
    """Run every round of ``sc`` with explicit dictionaries and per-sample gradients."""
    labels = {}
    for k, c in enumerate(sc.clients):
        for i, y in enumerate(c.labels):
            labels[(k, i)] = int(y)
    relations = {key: exact_neighbors(sc.hashes, labels, key, sc.R) for key in labels}
    C = sc.clients[0].widths[-1]
    knowledge = {key: np.zeros(C) for key in labels}
    params = [np.array(c.params, dtype=np.float64) for c in sc.clients]
    result = OracleResult(params)

    for events in sc.rounds:
        seen: dict[SampleIndex, np.ndarray | None] = {}
        for k, positions in events:
            c = sc.clients[k]
            uploads = [_logits(c.widths, params[k], c.features[i]) for i in positions]
            teachers = []
            for i, z in zip(positions, uploads):
                rel = relations[(k, i)]
                if rel:
                    mean = sum(knowledge[r] for r in rel) / len(rel)
                    teachers.append(_softmax(mean, sc.temperature))
                else:
                    teachers.append(None)
                seen[(k, i)] = teachers[-1]
                knowledge[(k, i)] = z
            grad = sum(
                _sample_grad(c.widths, params[k], c.features[i], int(c.labels[i]), t, sc.beta, sc.temperature)
                for i, t in zip(positions, teachers)
            ) / len(positions)
            params[k] = params[k] - sc.lr * grad
        result.teachers.append(seen)
    result.params = params
    return result
