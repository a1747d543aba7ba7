import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(12345)


def perturb_(module, scale=0.1, seed=0):
    """Move every parameter off its initial value so tests exercise non-trivial flows."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.add_(scale * torch.randn(p.shape, generator=g, dtype=p.dtype))
    return module


# acceptance criteria report: one PASS/FAIL line per criterion, printed at the end of the run
ACCEPTANCE: dict = {}


def record_criterion(k: int, passed: bool, detail: str = ""):
    line = f"criterion {k:2d}: {'PASS' if passed else 'FAIL'}  {detail}".rstrip()
    ACCEPTANCE[k] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
