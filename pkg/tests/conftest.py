import dataclasses
import os

import pytest
import torch
from hypothesis import HealthCheck, settings

from aimv2_kit.config import RunConfig, load_config

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
DESK_TINY_TOML = os.path.join(ROOT, "configs", "desk_tiny.toml")

# filled by tests/test_acceptance.py, echoed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(autouse=True)
def _torch_defaults():
    torch.set_default_dtype(torch.float32)
    yield


@pytest.fixture
def desk_cfg(tmp_path) -> RunConfig:
    """The shipped memorization config with checkpoints redirected to a temp dir."""
    cfg = load_config(DESK_TINY_TOML)
    return dataclasses.replace(cfg, checkpoint_dir=str(tmp_path / "ckpt"), log_every=1)
