import numpy as np
import pytest

from fedcache.federation import ExperimentConfig


def small_config(**overrides) -> ExperimentConfig:
    """A few-second federation: 4 clients, 3 classes, 2 rounds."""
    base = dict(K=4, num_classes=3, per_class=20, dim=8, hash_dim=4, rounds=2, R=2, batch_size=4)
    base.update(overrides)
    return ExperimentConfig(**base).validate()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_unit(rng, n, d):
    v = rng.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n, (ok, detail) in sorted(RESULTS.items()):
        terminalreporter.write_line(f"CRITERION {n:>2}: {'PASS' if ok else 'FAIL'} - {detail}")
