import numpy as np
import pytest
import torch

from pafs.episodes import SpectrogramStore
from pafs.model import ModelConfig

torch.set_num_threads(1)


def tiny_model_config(**kw) -> ModelConfig:
    base = dict(n_mels=16, n_frames=16, conv_channels=(4, 4, 4, 4), rnn_hidden=6,
                fusion_ff_dim=8, proj_hidden=5, proj_dim=4)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny_cfg():
    return tiny_model_config()


@pytest.fixture
def random_store():
    rng = np.random.default_rng(0)
    return SpectrogramStore.single_segment(rng.standard_normal((60, 16, 16)).astype(np.float32))


# -- acceptance reporting -------------------------------------------------------------------

_CRITERIA = pytest.StashKey[list]()


class Criterion:
    """Collects checks for one acceptance criterion and records a single
    PASS/FAIL line when the block exits, including on exceptions."""

    def __init__(self, sink: list, number: int, title: str):
        self.sink, self.number, self.title = sink, number, title
        self.ok, self.details = True, []

    def check(self, cond, detail: str) -> None:
        self.ok &= bool(cond)
        self.details.append(detail if cond else f"{detail} [violated]")

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None:
            self.ok = False
            self.details.append(f"{exc_type.__name__}: {exc}")
        line = (f"criterion {self.number} {'PASS' if self.ok else 'FAIL'}: {self.title}"
                f" | {'; '.join(self.details)}")
        self.sink.append(line)
        return False

    def verdict(self) -> None:
        assert self.ok, "; ".join(self.details)


def pytest_configure(config):
    config.stash[_CRITERIA] = []


@pytest.fixture
def criterion(request):
    return lambda number, title: Criterion(request.config.stash[_CRITERIA], number, title)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_CRITERIA, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
