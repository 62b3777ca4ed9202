import numpy as np
import pytest

from poisonforge.data import Dataset, build_dataset, select_targets
from poisonforge.recmodels import Hyper, train_model
from poisonforge.synth import SynthConfig, make_synthetic_log


def make_dataset(sequences, heldout=True) -> Dataset:
    """Dataset straight from integer sequences (users u0.., items i0..)."""
    n_items = 1 + max((max(s) for s in sequences if len(s)), default=-1)
    return Dataset(
        tuple(f"u{k}" for k in range(len(sequences))),
        tuple(f"i{k}" for k in range(n_items)),
        tuple(np.asarray(s, dtype=np.int64) for s in sequences),
        tuple(np.arange(len(s), dtype=np.int64) for s in sequences),
        np.full(len(sequences), heldout, dtype=bool),
    )


@pytest.fixture(scope="session")
def small_ds():
    log = make_synthetic_log(SynthConfig(n_users=120, n_items=60, n_clusters=4, seed=3))
    return build_dataset(log, 5, 5)


@pytest.fixture(scope="session")
def small_targets(small_ds):
    return select_targets(small_ds, 4, 6, seed=0)


@pytest.fixture(scope="session")
def small_hyper():
    return Hyper(dim=4, epochs=15, l2_reg=0.05)


@pytest.fixture(scope="session")
def small_bprmf(small_ds, small_hyper):
    return train_model("bprmf", small_ds, small_hyper, seed=1)


@pytest.fixture(scope="session")
def small_fpmc(small_ds, small_hyper):
    return train_model("fpmc", small_ds, small_hyper, seed=2)


# -- acceptance report ----------------------------------------------------------------------
ACCEPTANCE: list[str] = []


def record_criterion(label: str, ok: bool, detail: str) -> None:
    """Log one pass/fail line; the lines are repeated in the terminal summary."""
    line = f"[{'PASS' if ok else 'FAIL'}] {label}: {detail}"
    ACCEPTANCE.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
