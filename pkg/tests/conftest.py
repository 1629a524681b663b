import numpy as np
import pytest

from medflip.config import RunConfig
from medflip.data import synthesize
from medflip.encoders import TextEncoderConfig, VisionEncoderConfig


def tiny_config(**train) -> RunConfig:
    """A model small enough for sub-second training steps."""
    cfg = RunConfig()
    cfg.model.vision = VisionEncoderConfig(embed_dim=16, depth=1, heads=2, projection_dim=8)
    cfg.model.text = TextEncoderConfig(embed_dim=16, depth=1, heads=2, projection_dim=8)
    cfg.train.batch_size = 16
    cfg.train.epochs = 1
    for k, v in train.items():
        setattr(cfg.train, k, v)
    return cfg.validate()


@pytest.fixture(scope="session")
def small_dataset():
    return synthesize(200, multi_label_prob=0.2, noise_sigma=0.05, seed=11)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
