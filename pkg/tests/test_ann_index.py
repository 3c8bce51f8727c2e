import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_unit
from fedcache.ann_index import (
    HNSWGraph,
    HNSWParams,
    LabelPartitionedIndex,
    brute_force_relations,
    new_counter,
    query_exact,
)
from fedcache.errors import ConflictError
from fedcache.reference_oracles import exact_neighbors


def _build(vecs, labels, params=None, exclude_same_client=False, clients=None):
    idx = LabelPartitionedIndex(vecs.shape[1], params, exclude_same_client)
    keys = []
    for i, (v, y) in enumerate(zip(vecs, labels)):
        key = (int(clients[i]) if clients is not None else 0, i)
        idx.insert(key, int(y), v)
        keys.append(key)
    return idx, keys


def test_single_element_query_is_empty():
    idx, keys = _build(np.eye(4)[:1], [0])
    assert idx.query(keys[0], 0, np.eye(4)[0], 1) == []


def test_pair_finds_other():
    vecs = random_unit(np.random.default_rng(0), 2, 8)
    idx, keys = _build(vecs, [5, 5])
    assert [k for k, _ in idx.query(keys[0], 5, vecs[0], 1)] == [keys[1]]
    assert [k for k, _ in idx.query(keys[1], 5, vecs[1], 1)] == [keys[0]]


def test_unknown_label_returns_empty():
    idx, keys = _build(np.eye(4)[:2], [0, 0])
    assert idx.query((9, 9), 3, np.eye(4)[0], 4) == []


def test_duplicate_insert_conflicts():
    idx, keys = _build(np.eye(4)[:2], [0, 0])
    with pytest.raises(ConflictError):
        idx.insert(keys[0], 0, np.eye(4)[0])


def test_partition_counts(rng):
    labels = rng.integers(0, 10, 500)
    idx, _ = _build(random_unit(rng, 500, 16), labels)
    plan = {int(y): int(c) for y, c in zip(*np.unique(labels, return_counts=True))}
    assert idx.partition_sizes() == plan
    assert len(idx) == 500


def test_orthogonal_basis_scores():
    basis = np.eye(4)
    idx, keys = _build(basis, [0, 0, 0, 0])
    found = idx.query(keys[0], 0, basis[0], 2)
    assert len(found) == 2
    assert all(s == 0.0 for _, s in found)
    assert keys[0] not in [k for k, _ in found]


def test_under_full_partition_returns_all(rng):
    vecs = random_unit(rng, 5, 8)
    idx, keys = _build(vecs, [1] * 5)
    assert len(idx.query(keys[2], 1, vecs[2], 16)) == 4


def test_every_node_reachable(rng):
    g = HNSWGraph(16, HNSWParams(M=4, ef_construction=32), seed=1)
    for i, v in enumerate(random_unit(rng, 300, 16)):
        g.insert((0, i), v)
    assert len(g.reachable_from_entry()) == 300


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 64), R=st.integers(1, 20), d=st.sampled_from([3, 8, 32]))
def test_small_partitions_match_exact(seed, n, R, d):
    r = np.random.default_rng(seed)
    vecs = random_unit(r, n, d)
    idx, keys = _build(vecs, [0] * n)
    table = dict(zip(keys, vecs))
    for key, v in zip(keys, vecs):
        got = idx.query(key, 0, v, R)
        want = query_exact(table, key, v, R)
        assert {k for k, _ in got} == {k for k, _ in want}
        sims = [s for _, s in got]
        assert sims == sorted(sims, reverse=True)


def test_query_exact_matches_sort_oracle(rng):
    n = 40
    vecs = random_unit(rng, n, 6)
    labels = rng.integers(0, 3, n)
    clients = rng.integers(0, 4, n)
    keys = [(int(c), i) for i, c in enumerate(clients)]
    hashes = dict(zip(keys, vecs))
    lab = dict(zip(keys, labels.tolist()))
    for excl in (False, True):
        for key in keys:
            part = {k: h for k, h in hashes.items() if lab[k] == lab[key]}
            got = [k for k, _ in query_exact(part, key, hashes[key], 5, excl)]
            assert got == exact_neighbors(hashes, lab, key, 5, excl)


def test_query_exact_ties_break_by_index():
    table = {(2, 0): np.array([0.0, 1.0]), (0, 5): np.array([0.0, 1.0]), (1, 1): np.array([0.0, 1.0])}
    got = query_exact(table, (9, 9), np.array([1.0, 0.0]), 2)
    assert [k for k, _ in got] == [(0, 5), (1, 1)]
    assert query_exact({}, (0, 0), np.array([1.0, 0.0]), 3) == []


def test_exclude_same_client(rng):
    n = 30
    vecs = random_unit(rng, n, 8)
    clients = np.arange(n) % 3
    idx, keys = _build(vecs, [0] * n, exclude_same_client=True, clients=clients)
    for key, v in zip(keys, vecs):
        found = idx.query(key, 0, v, 8)
        assert len(found) == 8
        assert all(k[0] != key[0] for k, _ in found)


def test_counters():
    c = new_counter()
    parts = {(0, i): v for i, v in enumerate(random_unit(np.random.default_rng(2), 50, 8))}
    brute_force_relations(parts, 4, c)
    assert c.n == 50 * 49 // 2
    idx, _ = _build(random_unit(np.random.default_rng(3), 50, 8), [0] * 50)
    assert idx.distance_evals > 0
    idx.reset_counter()
    assert idx.distance_evals == 0


def test_brute_force_relations_match_exact(rng):
    parts = {(0, i): v for i, v in enumerate(random_unit(rng, 20, 5))}
    table = brute_force_relations(parts, 3)
    for key, v in parts.items():
        want = query_exact(parts, key, v, 3)
        assert [k for k, _ in table[key]] == [k for k, _ in want]
        np.testing.assert_allclose([s for _, s in table[key]], [s for _, s in want], rtol=1e-12)


def test_build_is_deterministic(rng):
    vecs, labels = random_unit(rng, 200, 8), rng.integers(0, 4, 200)
    a, keys = _build(vecs, labels, HNSWParams(seed=5))
    b, _ = _build(vecs, labels, HNSWParams(seed=5))
    for k, v, y in zip(keys, vecs, labels):
        assert a.query(k, int(y), v, 6) == b.query(k, int(y), v, 6)


@pytest.mark.slow
def test_build_cost_ratio_falls_with_size():
    # not an acceptance gate: shows the sub-quadratic trend of construction
    ratios = []
    for n in (1000, 4000):
        idx, _ = _build(random_unit(np.random.default_rng(n), n, 32), [0] * n, HNSWParams(ef_construction=64))
        ratios.append(idx.distance_evals / (n * (n - 1) / 2))
    assert ratios[1] < ratios[0]
