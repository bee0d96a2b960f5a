import numpy as np
import pytest

from hydra_peft.linalg import Rng

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record a one-line PASS/FAIL verdict for the acceptance summary."""

    def record(number: int, ok: bool, detail: str) -> None:
        ACCEPTANCE_LINES.append(f"[criterion {number:>2}] {'PASS' if ok else 'FAIL'}  {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return Rng(1234)


def finite_difference_check(f, x: np.ndarray, analytic: np.ndarray, probes: int, rng: Rng,
                            h: float = 1e-5, rtol: float = 1e-4, atol: float = 1e-8):
    """Central differences on ``probes`` random coordinates of ``x``; returns the worst error ratio."""
    worst = 0.0
    flat = x.reshape(-1)
    coords = rng.integers(flat.size, probes)
    for c in coords:
        old = flat[c]
        flat[c] = old + h
        up = f()
        flat[c] = old - h
        down = f()
        flat[c] = old
        numeric = (up - down) / (2 * h)
        a = analytic.reshape(-1)[c]
        ratio = abs(a - numeric) / (rtol * max(abs(a), abs(numeric)) + atol)
        worst = max(worst, ratio)
    return worst
