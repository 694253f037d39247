import numpy as np
import pytest

from mrsquant.basis import MetaboliteSpec, SpectralLine, default_basis, make_basis


def line_basis(freqs, damping=10.0, n_points=2048, dwell=5e-4, bg=(-300.0, 80.0)):
    """One single-line metabolite per frequency plus a one-line background."""
    mets = [MetaboliteSpec(f"L{i}", [SpectralLine(f, 1.0, damping)]) for i, f in enumerate(freqs)]
    background = MetaboliteSpec("BG", [SpectralLine(bg[0], 1.0, bg[1])])
    return make_basis(mets, background, n_points, dwell)


@pytest.fixture(scope="session")
def fixture_basis():
    return default_basis()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def criterion(request, capsys):
    """Record one acceptance verdict, print it, and fail the test if it did not pass."""
    def record(number, title, ok, detail=""):
        line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
        request.config.stash.setdefault(ACCEPTANCE, []).append((number, line))
        with capsys.disabled():
            print(f"\n{line}")
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
