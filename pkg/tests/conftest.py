"""Shared tiny configurations for fast training-level tests."""

import numpy as np
import pytest

from eqrecon.dataset import MiniIEBenchConfig, generate_mini_iebench
from eqrecon.model import DecoderConfig, EncoderConfig, HeadConfig, ModelConfig

TINY_MODEL = ModelConfig(
    EncoderConfig(image_size=16, patch_size=8, token_dim=16, depth=1, heads=2, mlp_ratio=2, rep_dim=32),
    HeadConfig(hidden_dim=16, embed_dim=8),
    DecoderConfig(blocks=1, embed_dim=8, heads=2, mlp_ratio=2),
    seed=0,
)


@pytest.fixture(scope="session")
def tiny_data():
    """104 images (8 classes x 13), 16x16."""
    return generate_mini_iebench(MiniIEBenchConfig(image_size=16, samples_per_class=13, seed=5, supersample=2))


@pytest.fixture
def tiny_model_cfg():
    return TINY_MODEL


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line per acceptance criterion."""
    lines = request.config.stash.setdefault(ACCEPTANCE, [])

    def record(name, passed, detail):
        line = f"{'PASS' if passed else 'FAIL'}  {name}: {detail}"
        lines.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
