import numpy as np
import pytest

from tga.config import ModelConfig
from tga.events import BehaviorSequence, Candidate, Sample


def four_event_sequence() -> BehaviorSequence:
    """(A,X,click,10), (B,X,click,20), (A,X,cart,30), (C,Y,click,40)."""
    A, B, C, X, Y = 101, 102, 103, 7, 8
    return BehaviorSequence.from_events([
        (A, X, "click", 10),
        (B, X, "click", 20),
        (A, X, "cart", 30),
        (C, Y, "click", 40),
    ])


def random_sequence(rng, n, n_items=6, n_cats=3):
    return BehaviorSequence(
        rng.integers(0, n_items, n),
        rng.integers(0, n_cats, n),
        rng.integers(0, 4, n),
        np.sort(rng.integers(0, 10**6, n)),
    )


def random_sample(rng, n, profile_dim=4, n_items=6, n_cats=3):
    return Sample(
        rng.normal(size=profile_dim),
        random_sequence(rng, n, n_items, n_cats),
        Candidate(int(rng.integers(n_items)), int(rng.integers(n_cats))),
        int(rng.integers(2)),
    )


def tiny_config(**overrides) -> ModelConfig:
    base = dict(
        d=4, heads=2, d_k=3, d_v=2, layers=1, v_item=16, v_cat=8, v_time=8,
        max_positions=32, profile_dim=4, mlp_hidden=(8, 6), precision="float64",
    )
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed after the run
ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def criterion(request):
    """Record a pass/fail line for an acceptance criterion.

    Usage: ``record = criterion(6, "learnability")`` then ``record(ok, detail)``
    before asserting.  A test that errors before recording is reported as FAIL.
    """
    def start(number: int, title: str):
        ACCEPTANCE[number] = f"[FAIL] {number}. {title}: did not finish"

        def record(ok: bool, detail: str):
            ACCEPTANCE[number] = f"[{'PASS' if ok else 'FAIL'}] {number}. {title}: {detail}"
            return ok
        return record
    return start


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[number])
