import numpy as np
import pytest

from gear.net import ActivationKind, DenseLayer, Mlp


def linear(W, b=None):
    W = np.asarray(W, dtype=np.float64)
    return Mlp([DenseLayer(W, np.zeros(W.shape[0]) if b is None else np.asarray(b, float), ActivationKind.LINEAR)])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
