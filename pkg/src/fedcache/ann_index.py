"""Label-partitioned R-nearest-neighbour search over unit-norm hash codes.

Each label class gets its own HNSW graph (Malkov & Yashunin), so neighbours
are always drawn from the query's class. Similarity is the dot product, which
equals cosine similarity for unit vectors. Every similarity evaluation is
counted so construction cost can be compared with an exhaustive scan.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from .errors import ConflictError, InvalidArgument

SampleIndex = tuple[int, int]
Neighbor = tuple[SampleIndex, float]


@dataclass(frozen=True)
class HNSWParams:
    M: int = 16
    ef_construction: int = 200
    ef_search: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.M < 2 or self.ef_construction < 1 or self.ef_search < 1:
            raise InvalidArgument("HNSW needs M >= 2 and positive ef values")


class _Counter:
    __slots__ = ("n",)

    def __init__(self):
        self.n = 0


class HNSWGraph:
    """HNSW graph over one label partition, keyed by ``SampleIndex``."""

    def __init__(self, dim: int, params: HNSWParams, counter: _Counter | None = None, seed: int = 0):
        self.dim = dim
        self.params = params
        self.m_max = params.M
        self.m_max0 = 2 * params.M
        self.level_mult = 1.0 / math.log(params.M)
        self.counter = counter if counter is not None else _Counter()
        self._rng = np.random.default_rng(seed)
        self._vecs = np.zeros((16, dim))
        self.keys: list[SampleIndex] = []
        self._pos: dict[SampleIndex, int] = {}
        # _links[node][level] maps neighbour node -> similarity
        self._links: list[list[dict[int, float]]] = []
        self.entry: int | None = None
        self.max_level = -1

    def __len__(self) -> int:
        return len(self.keys)

    def __contains__(self, key) -> bool:
        return key in self._pos

    def vector(self, key: SampleIndex) -> np.ndarray:
        return self._vecs[self._pos[key]]

    def _sims(self, q: np.ndarray, nodes: list[int]) -> np.ndarray:
        self.counter.n += len(nodes)
        return self._vecs[nodes] @ q

    def _random_level(self) -> int:
        u = 1.0 - self._rng.random()  # (0, 1]
        return int(-math.log(u) * self.level_mult)

    def _search_layer(self, q: np.ndarray, entries: list[tuple[float, int]], ef: int, level: int):
        visited = {n for _, n in entries}
        candidates = [(-s, n) for s, n in entries]
        heapq.heapify(candidates)
        results = list(entries)
        heapq.heapify(results)
        while len(results) > ef:
            heapq.heappop(results)
        while candidates:
            neg_s, c = heapq.heappop(candidates)
            if len(results) >= ef and -neg_s < results[0][0]:
                break
            fresh = [n for n in self._links[c][level] if n not in visited]
            if not fresh:
                continue
            visited.update(fresh)
            for n, s in zip(fresh, self._sims(q, fresh).tolist()):
                if len(results) < ef or s > results[0][0]:
                    heapq.heappush(candidates, (-s, n))
                    heapq.heappush(results, (s, n))
                    if len(results) > ef:
                        heapq.heappop(results)
        return results

    def _closer_to_kept(self, n: int, s: float, kept: list[tuple[float, int]], level: int) -> bool:
        known = self._links[n][level] if level < len(self._links[n]) else {}
        unknown = []
        for _, k in kept:
            sk = known.get(k)
            if sk is None:
                unknown.append(k)
            elif sk > s:
                return True
        return bool(unknown) and bool(np.any(self._sims(self._vecs[n], unknown) > s))

    def _select_neighbors(self, candidates: list[tuple[float, int]], m: int, level: int) -> list[tuple[float, int]]:
        """Diversity heuristic: keep a candidate only if it is closer to the base than to any kept one."""
        ordered = sorted(candidates, key=lambda t: (-t[0], t[1]))
        if len(ordered) <= m:
            return ordered
        kept: list[tuple[float, int]] = []
        pruned: list[tuple[float, int]] = []
        for s, n in ordered:
            if len(kept) >= m:
                break
            if kept and self._closer_to_kept(n, s, kept, level):
                pruned.append((s, n))
                continue
            kept.append((s, n))
        # top up with the closest pruned candidates so degree stays near m
        for item in pruned:
            if len(kept) >= m:
                break
            kept.append(item)
        return kept

    def insert(self, key: SampleIndex, vec: np.ndarray) -> None:
        if key in self._pos:
            raise ConflictError(f"{key} already indexed")
        node = len(self.keys)
        if node == len(self._vecs):
            self._vecs = np.concatenate([self._vecs, np.zeros_like(self._vecs)])
        self._vecs[node] = vec
        self.keys.append(key)
        self._pos[key] = node
        level = self._random_level()
        self._links.append([{} for _ in range(level + 1)])

        if self.entry is None:
            self.entry, self.max_level = node, level
            return

        q = self._vecs[node]
        ep = [(float(self._sims(q, [self.entry])[0]), self.entry)]
        for lv in range(self.max_level, level, -1):
            ep = [max(self._search_layer(q, ep, 1, lv))]
        for lv in range(min(level, self.max_level), -1, -1):
            found = self._search_layer(q, ep, self.params.ef_construction, lv)
            m_cap = self.m_max0 if lv == 0 else self.m_max
            chosen = self._select_neighbors(found, self.params.M, lv)
            for s, n in chosen:
                self._links[node][lv][n] = s
                links = self._links[n][lv]
                links[node] = s
                if len(links) > m_cap:
                    # shrink by stored similarity: no new evaluations
                    keep = heapq.nlargest(m_cap, links.items(), key=lambda t: (t[1], -t[0]))
                    self._links[n][lv] = dict(keep)
            ep = found
        if level > self.max_level:
            self.entry, self.max_level = node, level

    def search(self, q: np.ndarray, k: int, ef: int | None = None) -> list[tuple[float, int]]:
        if self.entry is None:
            return []
        ef = max(ef or self.params.ef_search, k)
        ep = [(float(self._sims(q, [self.entry])[0]), self.entry)]
        for lv in range(self.max_level, 0, -1):
            ep = [max(self._search_layer(q, ep, 1, lv))]
        return self._search_layer(q, ep, ef, 0)

    def reachable_from_entry(self) -> set[int]:
        """Nodes reachable on layer 0 from the entry point (connectivity audit)."""
        if self.entry is None:
            return set()
        seen = {self.entry}
        stack = [self.entry]
        while stack:
            n = stack.pop()
            for nb in self._links[n][0]:
                if nb not in seen:
                    seen.add(nb)
                    stack.append(nb)
        return seen


def _partition_seed(seed: int, label: int) -> int:
    return int(np.random.SeedSequence([seed, int(label)]).generate_state(1)[0])


def _rank(items: Iterable[Neighbor], R: int) -> list[Neighbor]:
    return sorted(items, key=lambda t: (-t[1], t[0]))[:R]


class LabelPartitionedIndex:
    """One HNSW graph per label; queries never cross label boundaries."""

    def __init__(self, dim: int, params: HNSWParams | None = None, exclude_same_client: bool = False):
        self.dim = dim
        self.params = params or HNSWParams()
        self.exclude_same_client = exclude_same_client
        self._counter = _Counter()
        self.partitions: dict[int, HNSWGraph] = {}
        self._label_of: dict[SampleIndex, int] = {}

    def __len__(self) -> int:
        return len(self._label_of)

    @property
    def distance_evals(self) -> int:
        return self._counter.n

    def reset_counter(self) -> None:
        self._counter.n = 0

    def label_of(self, key: SampleIndex) -> int:
        return self._label_of[key]

    def insert(self, key: SampleIndex, label: int, h: np.ndarray) -> None:
        if key in self._label_of:
            raise ConflictError(f"{key} already indexed")
        h = np.asarray(h, dtype=np.float64)
        if h.shape != (self.dim,):
            raise InvalidArgument(f"hash must have shape ({self.dim},), got {h.shape}")
        graph = self.partitions.get(label)
        if graph is None:
            graph = HNSWGraph(self.dim, self.params, self._counter, seed=_partition_seed(self.params.seed, label))
            self.partitions[label] = graph
        graph.insert(key, h)
        self._label_of[key] = label

    def query(self, key: SampleIndex, label: int, h: np.ndarray, R: int) -> list[Neighbor]:
        if R < 1:
            raise InvalidArgument("R must be positive")
        graph = self.partitions.get(label)
        if graph is None:
            return []
        h = np.asarray(h, dtype=np.float64)
        extra = 1
        if self.exclude_same_client:
            extra += sum(1 for k in graph.keys if k[0] == key[0])
        found = graph.search(h, R + extra, ef=max(self.params.ef_search, R + extra))
        out = []
        for s, node in found:
            k = graph.keys[node]
            if k == key or (self.exclude_same_client and k[0] == key[0]):
                continue
            out.append((k, s))
        return _rank(out, R)

    def partition_sizes(self) -> dict[int, int]:
        return {label: len(g) for label, g in sorted(self.partitions.items())}


def query_exact(
    candidates: Mapping[SampleIndex, np.ndarray],
    key: SampleIndex,
    h: np.ndarray,
    R: int,
    exclude_same_client: bool = False,
    counter: _Counter | None = None,
) -> list[Neighbor]:
    """Exact top-R by cosine over one label's hashes; ties broken by index ascending."""
    others = [
        k for k in candidates if k != key and not (exclude_same_client and k[0] == key[0])
    ]
    if not others:
        return []
    mat = np.stack([candidates[k] for k in others])
    sims = mat @ np.asarray(h, dtype=np.float64)
    if counter is not None:
        counter.n += len(others)
    return _rank(zip(others, sims.tolist()), R)


def brute_force_relations(
    partition: Mapping[SampleIndex, np.ndarray], R: int, counter: _Counter | None = None
) -> dict[SampleIndex, list[Neighbor]]:
    """Exhaustive relation table for one partition: n(n-1)/2 similarity evaluations."""
    keys = sorted(partition)
    n = len(keys)
    if counter is not None:
        counter.n += n * (n - 1) // 2
    if n == 0:
        return {}
    mat = np.stack([partition[k] for k in keys])
    gram = mat @ mat.T
    out = {}
    for a, key in enumerate(keys):
        row = [(keys[b], float(gram[a, b])) for b in range(n) if b != a]
        out[key] = _rank(row, R)
    return out


def new_counter() -> _Counter:
    return _Counter()

