import numpy as np
import pytest

from tdsnet.network import ModelConfig, TDSModel

# small enough that a forward+backward takes milliseconds
MICRO = ModelConfig(frames=4, height=16, width=16, patch=4, layers=2, frozen_dim=16, frozen_heads=2,
                    side_dim=8, side_heads=2, num_classes=4)


@pytest.fixture
def micro_cfg():
    return MICRO


@pytest.fixture
def micro_model():
    return TDSModel(MICRO, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def clip_video(rng, cfg, t_raw=8, batch=None):
    shape = (3, t_raw, cfg.height, cfg.width)
    if batch is not None:
        shape = (batch,) + shape
    return rng.uniform(0.0, 1.0, size=shape)


ACCEPTANCE = {}  # criterion -> detail line, filled by test_acceptance


def pytest_terminal_summary(terminalreporter):
    rows = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            name = rep.nodeid.rsplit("::", 1)[-1]
            if "test_acceptance" in rep.nodeid and name.startswith("test_a") and rep.when == "call":
                key = name.split("_")[1].upper()
                rows.append((key, "PASS" if outcome == "passed" else "FAIL", ACCEPTANCE.get(key, "")))
    if rows:
        terminalreporter.section("acceptance criteria")
        for key, verdict, detail in sorted(rows):
            terminalreporter.write_line(f"{key} {verdict}  {detail}")
