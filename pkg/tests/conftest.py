import sys

import numpy as np
import pytest


def write_csv(path, values, names=None, stamp="2016-07-01 00:00:00"):
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    names = names or [f"c{j}" for j in range(values.shape[1])]
    lines = ["date," + ",".join(names)]
    for i, row in enumerate(values):
        lines.append(f"{i}," + ",".join(repr(float(v)) for v in row))
    path.write_text("\n".join(lines) + "\n")
    return path


def sinusoid(T, M=2, period=16, seed=0):
    t = np.arange(T)[:, None]
    phase = np.random.default_rng(seed).uniform(0, 2 * np.pi, size=M)
    return np.sin(2 * np.pi * t / period + phase) * (1 + np.arange(M)) + 0.5 * np.arange(M)


@pytest.fixture
def csv_writer(tmp_path):
    def _write(values, name="series.csv", names=None):
        return write_csv(tmp_path / name, values, names)
    return _write


@pytest.fixture
def small_csv(tmp_path):
    """Two-channel sinusoid long enough for L=32, F=8 in every region."""
    return write_csv(tmp_path / "toy.csv", sinusoid(400, M=2))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
