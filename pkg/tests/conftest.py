import numpy as np
import pytest
from hypothesis import settings, HealthCheck

from ethphish import htamg
from ethphish.ingest import Transaction

settings.register_profile("ci", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ci")


def random_transactions(rng, n_nodes, n_edges, t_max=1000.0, integer_times=True):
    """Time-sorted Transactions over ``n_nodes`` ids (self-loops allowed)."""
    t = rng.integers(0, int(t_max), n_edges).astype(float) if integer_times \
        else rng.uniform(0, t_max, n_edges)
    t.sort()
    src = rng.integers(0, n_nodes, n_edges)
    dst = rng.integers(0, n_nodes, n_edges)
    out = []
    for i in range(n_edges):
        cat = int(rng.integers(0, 5))
        tok = {1: 1, 2: int(rng.choice([2, 3]))}.get(cat, 0)
        v = float(rng.lognormal(0, 1))
        gas = float(rng.integers(21000, 90000))
        out.append(Transaction(int(src[i]), int(dst[i]), float(t[i]), float(rng.normal()),
                               float(rng.normal()), cat, tok, v, gas, f"0x{i:064x}"))
    return out


def random_graph(rng, n_nodes, n_edges, **kw):
    return htamg.build(random_transactions(rng, n_nodes, n_edges, **kw), num_nodes=n_nodes)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria report: one line per criterion at the end of the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, secs, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  ({secs:.1f} s)  {detail}")
