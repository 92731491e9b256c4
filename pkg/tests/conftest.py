import numpy as np
import pytest

from protoldpc.protograph import BaseGraph, lift, load_base_graph


@pytest.fixture(scope="session")
def bg2():
    return load_base_graph("bg2")


@pytest.fixture(scope="session")
def code3(bg2):
    return lift(bg2, 3)


@pytest.fixture(scope="session")
def code16(bg2):
    return lift(bg2, 16)


def toy_base(m_b=3, n_b=6, seed=0, density=0.6, max_shift=7):
    """Random small base graph whose parity part is lower-triangular with a unit diagonal,
    so lifted codes are always encodable."""
    rng = np.random.default_rng(seed)
    k = n_b - m_b
    rows, cols, shifts = [], [], []
    for r in range(m_b):
        for c in range(n_b):
            if c < k:
                take = rng.random() < density or c == r % k
            else:
                p = c - k
                take = p == r or (p < r and rng.random() < density)
            if take:
                rows.append(r)
                cols.append(c)
                # keep the diagonal circulant an identity so the core stays invertible
                shifts.append(0 if c - k == r else int(rng.integers(0, max_shift + 1)))
    return BaseGraph(m_b=m_b, n_b=n_b, rows=rows, cols=cols, shifts=np.array(shifts)[:, None],
                     name=f"toy{seed}")


# --- acceptance reporting ---------------------------------------------------

ACCEPTANCE_LINES = {}


def record_acceptance(number, title, ok, detail):
    """Remember one pass/fail line per acceptance criterion and print it."""
    line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
