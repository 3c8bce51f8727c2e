"""Server-side knowledge cache.

Four maps keyed by sample index ``(client_id, sample_id)``:

* ``LI``  label -> set of indexes
* ``IH``  index -> unit hash code
* ``IK``  index -> latest logits uploaded for that sample (zeros until first update)
* ``IR``  index -> related indexes, filled once by :meth:`KnowledgeCache.build_relations`

The cache is writable (``init_entry``) until relations are built, then frozen:
after that only IK values change, one whole vector at a time.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from . import numeric
from .ann_index import HNSWParams, LabelPartitionedIndex
from .errors import ConflictError, InvalidArgument, NotFoundError, StateError

SampleIndex = tuple[int, int]


@dataclass(frozen=True)
class Knowledge:
    logits: np.ndarray
    version: int = 0


@dataclass(frozen=True)
class CacheEvent:
    """One entry of the cache's audit log (see ``reference_oracles.replay_check``)."""

    kind: str  # "init" | "update" | "fetch"
    key: SampleIndex
    # update: (logits,); fetch: (related indexes, versions, stacked logits)
    payload: tuple = ()


class KnowledgeCache:
    def __init__(self, num_classes: int, hash_dim: int, record_events: bool = False):
        self.num_classes = num_classes
        self.hash_dim = hash_dim
        self.LI: dict[int, set[SampleIndex]] = {}
        self.IH: dict[SampleIndex, np.ndarray] = {}
        self.IK: dict[SampleIndex, Knowledge] = {}
        self.IR: dict[SampleIndex, tuple[SampleIndex, ...]] = {}
        self.labels: dict[SampleIndex, int] = {}
        self.frozen = False
        self.index: LabelPartitionedIndex | None = None
        self._lock = threading.Lock()
        self.events: list[CacheEvent] | None = [] if record_events else None

    def __len__(self) -> int:
        return len(self.IK)

    def _log(self, kind: str, key: SampleIndex, payload: tuple = ()) -> None:
        if self.events is not None:
            self.events.append(CacheEvent(kind, key, payload))

    def init_entry(self, key: SampleIndex, label: int, h) -> None:
        if self.frozen:
            raise StateError("cache is frozen; no new entries after relation building")
        key = (int(key[0]), int(key[1]))
        if key in self.IH:
            raise ConflictError(f"sample index {key} already initialised")
        if not 0 <= label < self.num_classes:
            raise InvalidArgument(f"label {label} out of range")
        h = np.array(h, dtype=np.float64)
        if h.shape != (self.hash_dim,):
            raise InvalidArgument(f"hash must have dim {self.hash_dim}")
        self.IH[key] = h
        self.LI.setdefault(int(label), set()).add(key)
        self.IK[key] = Knowledge(np.zeros(self.num_classes), 0)
        self.labels[key] = int(label)
        self._log("init", key)

    def build_relations(
        self, R: int, params: HNSWParams | None = None, exclude_same_client: bool = False
    ) -> None:
        if self.frozen:
            raise StateError("relations already built")
        if R < 1:
            raise InvalidArgument("R must be positive")
        index = LabelPartitionedIndex(self.hash_dim, params, exclude_same_client)
        for label in sorted(self.LI):
            for key in sorted(self.LI[label]):
                index.insert(key, label, self.IH[key])
        for key in sorted(self.IH):
            found = index.query(key, self.labels[key], self.IH[key], R)
            self.IR[key] = tuple(k for k, _ in found)
        self.index = index
        self.frozen = True

    def _require_frozen(self) -> None:
        if not self.frozen:
            raise StateError("build relations before fetching or updating")

    def fetch(self, key: SampleIndex) -> list[Knowledge]:
        """Current knowledge of every related index, in relation order."""
        self._require_frozen()
        try:
            related = self.IR[key]
        except KeyError:
            raise NotFoundError(f"unknown sample index {key}") from None
        # IK values are replaced wholesale, never mutated, so reading the
        # references is a consistent snapshot per entry; copy on the way out.
        out = [Knowledge(self.IK[r].logits.copy(), self.IK[r].version) for r in related]
        if self.events is not None:
            with self._lock:
                logits = np.stack([k.logits for k in out]) if out else np.zeros((0, self.num_classes))
                self._log("fetch", key, (related, tuple(k.version for k in out), logits))
        return out

    def update(self, key: SampleIndex, z) -> None:
        self._require_frozen()
        if key not in self.IK:
            raise NotFoundError(f"unknown sample index {key}")
        z = np.array(z, dtype=np.float64)
        if z.shape != (self.num_classes,):
            raise InvalidArgument(f"knowledge must have length {self.num_classes}")
        with self._lock:
            self.IK[key] = Knowledge(z, self.IK[key].version + 1)
            self._log("update", key, (z.copy(),))

    def handle_upload(self, key: SampleIndex, z, temperature: float = 1.0, skip_cold: bool = False):
        """Server handling of one knowledge upload: fetch, ensemble, then update.

        Returns the teacher distribution, or None when no teacher is available.
        """
        teachers = self.fetch(key)
        if skip_cold:
            teachers = [t for t in teachers if t.version > 0]
        teacher = ensemble(teachers, temperature) if teachers else None
        self.update(key, z)
        return teacher

    def audit_relations(self) -> list[str]:
        """Violations of label purity, self-exclusion or distinctness in IR."""
        problems = []
        for key, related in self.IR.items():
            if key in related:
                problems.append(f"{key}: contains itself")
            if len(set(related)) != len(related):
                problems.append(f"{key}: duplicate neighbours")
            for r in related:
                if self.labels[r] != self.labels[key]:
                    problems.append(f"{key}: neighbour {r} has label {self.labels[r]}")
        return problems

    def export_snapshot(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for key in sorted(self.IK):
                k = self.IK[key]
                vals = ",".join(repr(float(v)) for v in k.logits)
                fh.write(f"{key[0]}\t{key[1]}\t{self.labels[key]}\t{k.version}\t{vals}\n")


def ensemble(teachers: Iterable[Knowledge | np.ndarray], temperature: float = 1.0) -> np.ndarray:
    """Average the fetched logits, then soften with ``temperature``."""
    vecs = [t.logits if isinstance(t, Knowledge) else np.asarray(t, dtype=np.float64) for t in teachers]
    if not vecs:
        raise InvalidArgument("no teacher knowledge to ensemble")
    if len({v.shape for v in vecs}) != 1:
        raise InvalidArgument("teacher knowledge vectors differ in length")
    mean = np.mean(np.stack(vecs), axis=0)
    return numeric.softmax_temp(mean, temperature)
