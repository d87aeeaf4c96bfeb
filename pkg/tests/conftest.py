from __future__ import annotations

import numpy as np
import pytest
import torch

from facedeblur.config import profile_config


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_cfg():
    return profile_config("tiny")


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)
    yield


_CRITERIA: dict[int, tuple[str, str, str]] = {}


class _Criterion:
    def __init__(self, number: int, title: str):
        self.number, self.title = number, title
        self.detail = ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        verdict = "PASS" if exc_type is None else "FAIL"
        detail = self.detail if exc is None else f"{self.detail} {type(exc).__name__}: {exc}".strip()
        _CRITERIA[self.number] = (verdict, self.title, detail.splitlines()[0] if detail else "")
        print(f"CRITERION {self.number:2d} {verdict}: {self.title} {self.detail}")
        return False


@pytest.fixture
def criterion():
    """``with criterion(n, title) as c:`` records a PASS/FAIL line for the summary."""
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        verdict, title, detail = _CRITERIA[n]
        terminalreporter.write_line(f"{verdict} {n:2d}. {title}" + (f" ({detail})" if detail else ""))
