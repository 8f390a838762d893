import numpy as np
import pytest
import torch

from regdit.data import SyntheticDataset
from regdit.encoder import pretrain_toy_encoder


@pytest.fixture(scope="session")
def ref_encoder():
    """The reference toy encoder, the same one the CLI builds by default."""
    # the holdout only feeds the before/after reconstruction report
    return pretrain_toy_encoder(SyntheticDataset(2048, seed=0).images, steps=150, seed=0,
                                holdout=SyntheticDataset(256, seed=1).images)


@pytest.fixture(scope="session")
def calib_images():
    return torch.from_numpy(SyntheticDataset(64, seed=1).images)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


@pytest.fixture
def record():
    """Append one pass/fail line for an acceptance criterion, then assert it."""
    def _record(number, title, ok, detail=""):
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}"
        if detail:
            line += f"  [{detail}]"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line
    return _record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
