import os
from pathlib import Path

import numpy as np
import pytest

from semadv import tensor as T
from semadv.config import parse_config
from semadv.workbench import build_workbench

ROOT = Path(__file__).resolve().parents[1]
CACHE = Path(os.environ.get("SEMADV_CACHE", ROOT / ".cache" / "workbench"))


@pytest.fixture
def f64():
    with T.precision(np.float64):
        yield


@pytest.fixture(scope="session")
def default_config():
    return parse_config(None)


@pytest.fixture(scope="session")
def bench(default_config):
    """Dataset and all trained models for the default configuration.

    The first run trains everything (several minutes on one core) and caches
    it; later runs load the cached checkpoints.
    """
    return build_workbench(default_config, cache_dir=CACHE, log=lambda m: None)


def to64(model):
    """Copy of a model with float64 parameters, for gradient checks."""
    m = model.clone()
    for k, p in m.params.items():
        m.params[k] = T.Tensor(p.data.astype(np.float64), requires_grad=p.requires_grad,
                               dtype=np.float64)
    return m


_VERDICTS: list[str] = []


@pytest.fixture(scope="session")
def verdicts():
    """Acceptance tests append one pass/fail line each; they are echoed in
    the terminal summary so they show up even with output capture on."""
    return _VERDICTS


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS, key=lambda s: int(s.split()[1].rstrip(":").rstrip("abc"))):
            terminalreporter.write_line(line)
