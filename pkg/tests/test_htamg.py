import numpy as np
import pytest
from hypothesis import given, strategies as st

from ethphish import htamg
from ethphish.errors import NodeOutOfRange, TimeRegression, UnsortedInput
from ethphish.ingest import Transaction
from conftest import random_graph, random_transactions


def tx(s, d, t, i=0):
    return Transaction(s, d, float(t), 0.0, 0.0, 0, 0, 1.0, 21000.0, f"h{i}")


def linear_scan(g, v, t, n, direction):
    hits = []
    for e in range(g.num_edges):
        if g.t[e] >= t:
            continue
        inc = {"in": g.dst[e] == v, "out": g.src[e] == v,
               "both": g.src[e] == v or g.dst[e] == v}[direction]
        if inc:
            hits.append(e)
    return hits[-n:] if n else []


def test_empty_and_multiedge():
    g = htamg.build([], num_nodes=3)
    assert g.num_nodes == 3 and g.num_edges == 0
    g = htamg.build([tx(0, 1, 1), tx(0, 1, 2, 1)])
    assert g.num_edges == 2 and list(g.incident_edges(0, "out")) == [0, 1]


def test_unsorted_rejected():
    with pytest.raises(UnsortedInput):
        htamg.build([tx(0, 1, 5), tx(1, 0, 3)])


def test_incident_reconstruction(rng):
    g = random_graph(rng, 40, 1000)
    for v in range(g.num_nodes):
        brute_in = set(np.nonzero(g.dst == v)[0])
        brute_out = set(np.nonzero(g.src == v)[0])
        assert set(g.incident_edges(v, "in")) == brute_in
        assert set(g.incident_edges(v, "out")) == brute_out
        assert set(g.incident_edges(v, "both")) == brute_in | brute_out
        seg = g.incident_edges(v, "both")
        assert np.all(np.diff(g.t[seg]) >= 0)
    assert len(g.in_eid) == len(g.out_eid) == g.num_edges


def test_strict_before_query():
    g = htamg.build([tx(0, 1, 1), tx(0, 1, 2, 1), tx(0, 1, 3, 2)])
    s = g.recent_neighbors(0, 3.0, 2)
    assert list(s.times) == [1.0, 2.0]
    assert len(htamg.build([], num_nodes=2).recent_neighbors(1, 10.0, 5)) == 0
    with pytest.raises(NodeOutOfRange):
        g.recent_neighbors(7, 1.0, 1)


def test_recent_neighbors_match_linear_scan(rng):
    for _ in range(5):
        g = random_graph(rng, 15, 120)
        for _ in range(60):
            v, t, n = int(rng.integers(15)), float(rng.integers(0, 1100)), int(rng.integers(1, 8))
            for d in htamg.DIRECTIONS:
                assert list(g.recent_neighbors(v, t, n, d).edges) == linear_scan(g, v, t, n, d)


def test_sample_neighbors_batched_matches(rng):
    g = random_graph(rng, 20, 300)
    nodes = rng.integers(0, 20, 200)
    times = rng.integers(0, 1100, 200).astype(float)
    for d in htamg.DIRECTIONS:
        nbr, eid, etime, mask = g.sample_neighbors(nodes, times, 6, d)
        for q in range(len(nodes)):
            s = g.recent_neighbors(int(nodes[q]), times[q], 6, d)
            assert list(eid[q][mask[q]]) == list(s.edges)
            assert list(nbr[q][mask[q]]) == list(s.nodes)


def test_extend_equivalence(rng):
    for _ in range(10):
        txs = random_transactions(rng, 12, 80)
        k = int(rng.integers(0, 81))
        a = htamg.build(txs[:k], num_nodes=0)
        b = htamg.extend(a, txs[k:])
        assert b.same_as(htamg.build(txs))
        assert a.num_edges == k          # untouched


def test_extend_cases():
    g = htamg.build([tx(0, 1, 5)])
    assert htamg.extend(g, []).same_as(g)
    g2 = htamg.extend(g, [tx(1, 4, 6)])
    assert g2.num_nodes == 5 and g2.num_edges == 2
    with pytest.raises(TimeRegression):
        htamg.extend(g, [tx(0, 1, 4)])


def test_snapshot_round_trip(tmp_path, rng):
    g = random_graph(rng, 10, 50)
    g.save(tmp_path / "g.bin", metadata={"note": "x"})
    h, meta = htamg.Htamg.load(tmp_path / "g.bin")
    assert h.same_as(g) and meta["note"] == "x"
    np.testing.assert_array_equal(h.edge_attr, g.edge_attr)


def test_edge_attr_layout():
    t = Transaction(0, 1, 0.0, 0.5, -0.5, 2, 2, 1.0, 1.0, "h")
    a = htamg.build([t]).edge_attr
    assert a.shape == (1, htamg.EDGE_ATTR_DIM) == (1, 11)
    assert a[0, 0] == 0.5 and a[0, 1] == -0.5 and a[0, 2 + 2] == 1 and a[0, 7 + 2] == 1
    assert a[0].sum() == 2.0


@given(st.integers(0, 10_000), st.floats(0, 1000), st.floats(0, 1000))
def test_monotone_in_time(seed, t1, t2):
    g = random_graph(np.random.default_rng(seed), 6, 30)
    t1, t2 = min(t1, t2), max(t1, t2)
    for v in range(6):
        a = set(g.recent_neighbors(v, t1, 10 ** 6).edges)
        assert a <= set(g.recent_neighbors(v, t2, 10 ** 6).edges)
