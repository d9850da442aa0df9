import numpy as np
import pytest

from ssgmanip import GameInstance, Polytope


def make_game(att_r, att_p, def_r, def_p, budget, **kw) -> GameInstance:
    n = len(att_r)
    return GameInstance(att_r, att_p, def_r, def_p, Polytope.budget_box(n, budget), **kw)


def central_diff(f, x, h):
    """Central finite differences of a vector-valued ``f`` at ``x`` (columns per coordinate)."""
    x = np.asarray(x, dtype=float)
    cols = []
    for j in range(x.size):
        e = np.zeros_like(x)
        e.flat[j] = h
        cols.append((np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2 * h))
    return np.stack(cols, axis=-1)


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), floor))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


VERDICTS: dict = {}


def record_verdict(number: int, passed: bool, detail: str) -> str:
    line = f"CRITERION {number}: {'PASS' if passed else 'FAIL'} - {detail}"
    VERDICTS[number] = line
    print(line, flush=True)
    return line


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[n])
