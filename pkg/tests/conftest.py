import sys

import numpy as np
import pytest

from glwalk.ensemble import EnsembleSpec


@pytest.fixture
def contracting():
    return EnsembleSpec.contracting_pair()


@pytest.fixture
def skewed_scalar():
    # bounded, skewed log-scale law: Z in {0, 1} with P(Z = 1) = 0.1
    return EnsembleSpec.scalar_gauge(2, law="discrete", values=[0.0, 1.0], probs=[0.9, 0.1])


@pytest.fixture
def orthogonal():
    return EnsembleSpec.orthogonal_only(2)


def all_families():
    return [
        EnsembleSpec.contracting_pair(),
        EnsembleSpec.two_atom([[[1.0, 1.0], [0.0, 1.0]], [[1.0, 0.0], [1.0, 1.0]]]),
        EnsembleSpec.scalar_gauge(2, law="exponential"),
        EnsembleSpec.scalar_gauge(3, law="uniform"),
        EnsembleSpec.rot_diag_rot(2, 4.5),
        EnsembleSpec.rot_diag_rot(3, 2.7),
        EnsembleSpec.orthogonal_only(2),
        EnsembleSpec.orthogonal_only(4),
    ]


def tail_survival(t, a, scale=1.0):
    """P(L > t) for the radial log-singular value of rot_diag_rot with shift 0."""
    return (1.0 + np.asarray(t) / scale) ** (-a)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
