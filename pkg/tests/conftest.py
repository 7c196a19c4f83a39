import time
from dataclasses import replace
from pathlib import Path

import pytest

from jemlab.experiment import build_data, build_model, load_config
from jemlab.trainer import train

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

# criterion number -> (passed, detail); filled by the acceptance suite
CRITERIA: dict = {}


def train_run(run, **train_overrides):
    """Build data and a fresh model for ``run`` and train it; returns ``(model, data, history, seconds)``."""
    t0 = time.perf_counter()
    data = build_data(run)
    model = build_model(run, data.train.dim, data.train.num_classes)
    cfg = replace(run.train, **train_overrides) if train_overrides else run.train
    _, hist = train(model, data.train, cfg, val=data.val)
    return model, data, hist, time.perf_counter() - t0


@pytest.fixture(scope="session")
def toy_run():
    return load_config(CONFIGS / "toy.cfg", seed=0)


@pytest.fixture(scope="session")
def toy_jem(toy_run):
    return train_run(toy_run)


@pytest.fixture(scope="session")
def toy_baseline(toy_run):
    return train_run(toy_run, gen_weight=0.0)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
