import numpy as np
import pytest

from crn.domain import ClientRecord, DemographicSchema, Demographics, InteractionStep
from crn.model import ModelConfig, RewardModel
from crn.synthworld import generate_dataset, make_profile

SCHEMA = DemographicSchema((3, 2), 1)


def make_record(cid="c1", length=3, m=5, n_r=4, n_x=2, rewards=None, seed=0):
    """Small valid record with a closed reward on every step but the last."""
    rng = np.random.default_rng(seed)
    steps = []
    prev = 0
    for i in range(1, length + 1):
        resp = tuple(sorted(rng.choice(n_r, size=rng.integers(0, n_r + 1), replace=False).tolist()))
        r = None if i == length else (rewards[i - 1] if rewards else float(rng.random()))
        steps.append(InteractionStep(i, prev, resp, tuple(range(1, m + 1)),
                                     tuple(rng.random(n_x).tolist()), r))
        prev = int(rng.integers(1, m + 1))
    demo = Demographics((int(rng.integers(3)), int(rng.integers(2))), (float(rng.normal()),))
    return ClientRecord(cid, demo, tuple(steps))


def small_model(kind="crn", seed=0, m=5, n_r=4, n_x=2, **dims):
    d = dict(n_a=4, n_o=5, n_s=6, n_imp=3, n_exp=3, hidden=7)
    d.update(dims)
    return RewardModel.create(ModelConfig(m, n_r, SCHEMA, n_x, kind=kind, **d), seed)


@pytest.fixture
def record():
    return make_record()


@pytest.fixture
def model():
    return small_model()


@pytest.fixture(scope="session")
def tiny_world():
    return generate_dataset(make_profile("default", n_clients=120, seed=5))


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
