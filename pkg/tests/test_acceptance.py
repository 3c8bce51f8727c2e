"""Acceptance gate: one check per criterion, each reported as a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s`` (lines are also collected
into the pytest terminal summary) or directly as ``python3 tests/test_acceptance.py``.
"""

from __future__ import annotations

import functools
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fedcache import cli, models, numeric
from fedcache import federation as F
from fedcache.ann_index import HNSWParams, LabelPartitionedIndex, query_exact
from fedcache.metrics import format_speedup, speedup
from fedcache.reference_oracles import naive_round_oracle, replay_check
from test_reference_oracles import build_tiny

RESULTS: dict[int, tuple[bool, str]] = {}
SEEDS = (0, 1, 2, 3, 4)


def d1(**overrides) -> F.ExperimentConfig:
    """Scenario D1: synthetic Gaussian, C=10, K=20, alpha=1, mixed MLPs, 30 rounds."""
    base = dict(num_classes=10, dim=64, per_class=200, class_sep=3.0, K=20, alpha=1.0, models="hetero",
                rounds=30, beta=1.5, R=16, lr=0.01, batch_size=8)
    base.update(overrides)
    return F.ExperimentConfig(**base).validate()


@functools.lru_cache(maxsize=None)
def d1_maua(algorithm: str, seed: int, R: int = 16, alpha: float = 1.0) -> float:
    return F.run_experiment(d1(algorithm=algorithm, seed=seed, R=R, alpha=alpha)).maua


def d1_median(algorithm: str, **kw) -> float:
    return float(np.median([d1_maua(algorithm, s, **kw) for s in SEEDS]))


def record(n: int, ok: bool, detail: str, started: float) -> None:
    RESULTS[n] = (bool(ok), f"{detail} [{time.perf_counter() - started:.1f}s]")
    print(f"CRITERION {n:>2}: {'PASS' if ok else 'FAIL'} - {RESULTS[n][1]}", flush=True)


def criterion_1():
    t0 = time.perf_counter()
    worst = 0.0
    for K, per_class, R, seed in [(2, 3, 1, 10), (3, 5, 2, 11), (4, 5, 2, 12)]:
        cfg, server, clients, sc = build_tiny(K, per_class, R, seed)
        assert sum(len(c.labels) for c in sc.clients) <= 16
        expect = naive_round_oracle(sc)
        for r in range(1, cfg.rounds + 1):
            F.fedcache_round(server, clients, r, cfg)
        worst = max(worst, max(float(np.max(np.abs(c.model.params - p))) for c, p in zip(clients, expect.params)))
    elapsed = time.perf_counter() - t0
    record(1, worst <= 1e-9 and elapsed < 5, f"max |param diff| {worst:.2e} over 3 scenarios x 3 rounds", t0)


def criterion_2():
    t0 = time.perf_counter()
    notes, ok = [], True
    runs = [("sync", d1(rounds=3))] + [(f"async{s}", d1(rounds=3, schedule="async", async_seed=s)) for s in range(5)]
    for name, cfg in runs:
        res = F.run(cfg, record_events=True)
        replay = replay_check(res.server.cache.events)
        audit = res.server.cache.audit_relations()
        ok &= replay.ok and not audit
        notes.append(f"{name}:{'ok' if replay.ok else 'diverged@' + str(replay.index)}/{len(audit)}")
        res.server.cache.events = None
    elapsed = time.perf_counter() - t0
    record(2, ok and elapsed < 60, "replay/audit violations " + " ".join(notes), t0)


def criterion_3():
    t0 = time.perf_counter()
    r = np.random.default_rng(2024)
    n, d = 2000, 32
    vecs = r.normal(size=(n, d))
    vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
    labels = r.integers(0, 10, n)
    idx = LabelPartitionedIndex(d, HNSWParams(ef_search=64))
    keys = [(i % 20, i) for i in range(n)]
    for k, v, y in zip(keys, vecs, labels):
        idx.insert(k, int(y), v)
    parts = {y: {k: v for k, v, yy in zip(keys, vecs, labels) if yy == y} for y in range(10)}
    recalls = []
    for k, v, y in zip(keys, vecs, labels):
        got = {kk for kk, _ in idx.query(k, int(y), v, 16)}
        want = {kk for kk, _ in query_exact(parts[int(y)], k, v, 16)}
        recalls.append(len(got & want) / len(want))
    recall = float(np.mean(recalls))
    # small partitions must be exact
    exact_small = True
    for trial in range(10):
        m = int(r.integers(2, 65))
        small = r.normal(size=(m, d))
        small /= np.linalg.norm(small, axis=1, keepdims=True)
        sidx = LabelPartitionedIndex(d, HNSWParams(seed=trial))
        table = {}
        for i, v in enumerate(small):
            sidx.insert((0, i), 0, v)
            table[(0, i)] = v
        for key, v in table.items():
            got = {kk for kk, _ in sidx.query(key, 0, v, 16)}
            exact_small &= got == {kk for kk, _ in query_exact(table, key, v, 16)}
    elapsed = time.perf_counter() - t0
    record(3, recall >= 0.9 and exact_small and elapsed < 30,
           f"recall@16 {recall:.4f}; partitions <= 64 exact: {exact_small}", t0)


def criterion_4():
    t0 = time.perf_counter()
    worst = 0.0
    r = np.random.default_rng(77)
    for trial in range(20):
        arch = models.HETERO_ORDER[trial % 3]
        spec = models.ModelSpec(arch, 6, (8,) if arch != "mlp_large" else (8, 5), 4)
        m = models.build_model(spec, trial)
        xs, ys = r.normal(size=(5, 6)), r.integers(0, 4, 5)
        teachers = numeric.softmax_temp(r.normal(size=(5, 4)) * 2)
        f = lambda p: models.objective_and_grad(m, xs, ys, teachers, None, 1.5, 1.0, "kl", params=p)[0]
        _, g = models.objective_and_grad(m, xs, ys, teachers, None, 1.5, 1.0, "kl")
        fd = numeric.finite_diff_grad(f, m.params, 1e-5)
        rel = np.abs(g - fd) / np.maximum(np.maximum(np.abs(g), np.abs(fd)), 1e-6)
        worst = max(worst, float(rel.max()))
    elapsed = time.perf_counter() - t0
    record(4, worst < 1e-4 and elapsed < 30, f"max relative error {worst:.2e} over 20 triples", t0)


def criterion_5():
    t0 = time.perf_counter()
    med = {a: d1_median(a) for a in ("fedcache", "fd", "standalone")}
    ok = med["fedcache"] > med["fd"] > med["standalone"]
    record(5, ok, "median MAUA " + ", ".join(f"{a} {v:.4f}" for a, v in med.items()), t0)


def criterion_6():
    t0 = time.perf_counter()
    fd = d1_median("fd")
    arms = {R: d1_median("fedcache", R=R) for R in (1, 4, 16, 64)}
    spread = 100 * (max(arms.values()) - min(arms.values()))
    ok = spread <= 5.0 and all(v > fd for v in arms.values())
    detail = ", ".join(f"R={R} {v:.4f}" for R, v in arms.items())
    record(6, ok, f"{detail}; spread {spread:.2f} pp; FD {fd:.4f}", t0)


def criterion_7():
    t0 = time.perf_counter()
    cfg = d1(rounds=2)
    res = F.run(cfg)
    C, d = cfg.num_classes, cfg.hash_dim
    n = [len(c.shard.train) for c in res.clients]
    lonely = sum(1 for rel in res.server.cache.IR.values() if not rel)
    up = sum(n) * (8 * d + 12) + cfg.rounds * sum(n) * (8 * C + 8)
    down = cfg.rounds * ((sum(n) - lonely) * (8 * C + 8) + lonely * 8)
    fedcache_exact = (res.server.ledger.up, res.server.ledger.down) == (up, down)
    fd_res = F.run(d1(rounds=2, algorithm="fd"))
    fd_exact = (fd_res.server.ledger.up, fd_res.server.ledger.down) == (
        2 * cfg.K * (8 * C * C + 4 * C), 2 * cfg.K * 8 * C * C)
    wide = F.run(d1(rounds=2, width_scale=2))
    width_ok = wide.server.ledger.snapshots == res.server.ledger.snapshots
    s1, s2 = format_speedup(speedup(13.25, 0.99)), format_speedup(speedup(20.71, 0.08))
    ok = fedcache_exact and fd_exact and width_ok and (s1, s2) == ("x13.4", "x258.9")
    record(7, ok, f"FedCache ledger exact {fedcache_exact}, FD exact {fd_exact}, "
                  f"width-invariant {width_ok}, speed-ups {s1} {s2}", t0)


def criterion_8():
    t0 = time.perf_counter()
    ds = F.load_dataset(d1())
    from fedcache.data import dirichlet_partition, label_tv_distance

    def tv(alpha):
        return float(np.mean([label_tv_distance([ds.labels[p] for p in dirichlet_partition(ds, 20, alpha, s)], 10)
                              for s in range(20)]))

    tv1, tv10 = tv(1.0), tv(10.0)
    pairs = {a: (d1_median("fedcache", alpha=a), d1_median("fd", alpha=a)) for a in (1.0, 3.0, 10.0)}
    ok = tv10 < tv1 and all(fc >= fd for fc, fd in pairs.values())
    detail = ", ".join(f"alpha={a:g} FedCache {fc:.4f} vs FD {fd:.4f}" for a, (fc, fd) in pairs.items())
    record(8, ok, f"TV alpha=1 {tv1:.4f} > alpha=10 {tv10:.4f}; {detail}", t0)


def criterion_9():
    t0 = time.perf_counter()
    n, d = 4000, 32
    r = np.random.default_rng(9)
    vecs = r.normal(size=(n, d))
    vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
    idx = LabelPartitionedIndex(d, HNSWParams())  # M=16, ef_construction=200
    for i, v in enumerate(vecs):
        idx.insert((0, i), 0, v)
    brute = n * (n - 1) // 2
    ratio = idx.distance_evals / brute
    record(9, ratio < 0.5, f"HNSW build {idx.distance_evals} evaluations = {ratio:.3f} of brute force {brute}", t0)


def criterion_10(tmp: Path):
    t0 = time.perf_counter()
    cfg = tmp / "d1.cfg"
    cfg.write_text(d1(rounds=5).to_kv())
    outs = []
    for name in ("first", "second"):
        code = cli.main(["run", "--config", str(cfg), "--out", str(tmp / name)])
        outs.append((code, (tmp / name / "metrics.csv").read_bytes()))
    ok = outs[0][0] == outs[1][0] == 0 and outs[0][1] == outs[1][1]
    record(10, ok, f"two cmd_run invocations, {len(outs[0][1])} CSV bytes, identical: {outs[0][1] == outs[1][1]}", t0)


def _check(n):
    ok, detail = RESULTS[n]
    assert ok, f"criterion {n}: {detail}"


def test_criterion_1_protocol_equivalence():
    criterion_1(); _check(1)


def test_criterion_2_cache_semantics():
    criterion_2(); _check(2)


def test_criterion_3_ann_quality():
    criterion_3(); _check(3)


def test_criterion_4_gradients():
    criterion_4(); _check(4)


@pytest.mark.slow
def test_criterion_5_maua_ordering():
    criterion_5(); _check(5)


@pytest.mark.slow
def test_criterion_6_r_robustness():
    criterion_6(); _check(6)


def test_criterion_7_communication():
    criterion_7(); _check(7)


@pytest.mark.slow
def test_criterion_8_heterogeneity():
    criterion_8(); _check(8)


@pytest.mark.slow
def test_criterion_9_build_complexity():
    criterion_9(); _check(9)


def test_criterion_10_determinism(tmp_path):
    criterion_10(tmp_path); _check(10)


if __name__ == "__main__":
    import tempfile

    for n in range(1, 10):
        globals()[f"criterion_{n}"]()
    with tempfile.TemporaryDirectory() as tmp:
        criterion_10(Path(tmp))
    print()
    for n, (ok, detail) in sorted(RESULTS.items()):
        print(f"CRITERION {n:>2}: {'PASS' if ok else 'FAIL'} - {detail}")
    sys.exit(0 if all(ok for ok, _ in RESULTS.values()) else 1)
