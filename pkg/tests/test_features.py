import networkx as nx
import numpy as np
import pytest
from hypothesis import given, strategies as st

from ethphish import features, htamg
from ethphish.errors import TooFewNodes
from ethphish.features import FeatureConfig
from ethphish.ingest import Transaction
from conftest import random_graph
import oracles


def tx(s, d, t=0.0, v=1.0, typ=0, i=0):
    return Transaction(s, d, float(t), 0.0, 0.0, typ, 0, float(v), 1.0, f"h{i}")


def graph(edges, n=None, kinds=None):
    txs = [tx(*e, i=i) for i, e in enumerate(edges)]
    txs.sort(key=lambda x: x.t)
    return htamg.build(txs, kinds=kinds, num_nodes=n)


def random_kinds(rng, n):
    return rng.choice([0, 1, 2], size=n, p=[0.7, 0.2, 0.1])


def test_toy_degree_value():
    g = graph([(0, 1, 0, 5), (0, 2, 1, 3), (1, 2, 2, 2)], n=4)
    f = features.degree_value_features(g)
    # C receives 3 + 2; the 8 belongs to A's outflow
    assert f["aid"][2] == 2 and f["aod"][0] == 2 and f["ivf"][2] == 5
    assert f["ovf"][0] == 8 and f["tve"][1] == 7
    assert all(f[k][3] == 0 for k in f)


def test_dtd_cases():
    g = graph([(0, 1, 0.0), (0, 2, 10.0)], n=4)
    d = features.dtd(g)
    assert d[0] == pytest.approx(0.2) and d[1] == 1.0 and d[3] == 0.0


def test_cir_pntd_cases():
    g = graph([(0, 1, 0, 1, 0)], kinds=[0, 0])
    assert features.cir_pntd(g)[0][0] == 0.0
    g = graph([(0, 1, 0, 1, 4), (0, 2, 1, 1, 0)], kinds=[0, 0, 0])
    assert features.cir_pntd(g)[0][0] == 0.5
    # hub 0 with neighbors of total degree 3, 7 and 2
    edges = [(0, 1), (0, 2), (0, 3)] + [(1, 4)] * 2 + [(2, 5)] * 6 + [(3, 6)]
    g = graph([(u, v, i) for i, (u, v) in enumerate(edges)])
    assert features.cir_pntd(g)[1][0] == 7


def test_centrality_cases():
    g = graph([(0, 1, 0), (0, 1, 1)])
    c = features.centrality_features(g)
    assert c["ncd"][0] == 1 and c["ic"][1] == 2.0
    star = graph([(0, k, k) for k in range(1, 6)], n=7)
    c = features.centrality_features(star)
    assert c["ncd"][0] == 5 and all(c[k][6] == 0 for k in c)
    with pytest.raises(TooFewNodes):
        features.centrality_features(htamg.build([], num_nodes=1))


def test_pagerank_cases():
    pr, ok = features.pagerank(htamg.build([], num_nodes=1))
    assert ok and pr[0] == pytest.approx(1.0)
    pr, _ = features.pagerank(graph([(0, 1, 0), (1, 0, 1)]))
    np.testing.assert_allclose(pr, [0.5, 0.5], atol=1e-12)


def test_pagerank_matches_networkx(rng):
    g = random_graph(rng, 30, 120)
    G = nx.MultiDiGraph()
    G.add_nodes_from(range(30))
    G.add_edges_from(zip(g.src.tolist(), g.dst.tolist()))
    ref = nx.pagerank(G, alpha=0.85, tol=1e-14, max_iter=10_000)
    pr, _ = features.pagerank(g)
    np.testing.assert_allclose(pr, [ref[i] for i in range(30)], atol=1e-8)


def test_scc_cases(rng):
    c4 = graph([(0, 1, 0), (1, 2, 1), (2, 3, 2), (3, 0, 3)])
    np.testing.assert_allclose(features.scc(c4), 1.0)
    tree = graph([(0, 1, 0), (0, 2, 1), (1, 3, 2), (1, 4, 3)])
    assert np.all(features.scc(tree) == 0)
    g = random_graph(rng, 20, 60)
    ref = nx.square_clustering(oracles.simple_graph(g))
    np.testing.assert_allclose(features.scc(g), [ref[i] for i in range(20)], atol=1e-12)


def test_mnr_cases():
    p = graph([(0, 1, 0), (1, 2, 1)], n=4)
    np.testing.assert_array_equal(features.mnr(p), [2, 1, 2, 0])
    k5 = graph([(u, v, u * 5 + v) for u in range(5) for v in range(u + 1, 5)])
    assert np.all(features.mnr(k5) == 1)


def test_utp_cases(rng):
    p = graph([(0, 1, 0), (1, 2, 1)])
    assert features.utp(p, FeatureConfig(utp_depth_cap=2))[0] == 1
    star = graph([(0, k, k) for k in range(1, 5)])
    assert features.utp(star)[0] == 0
    g = random_graph(rng, 12, 30)
    G = oracles.simple_graph(g)
    for cap in (2, 3, 4):
        got = features.utp(g, FeatureConfig(utp_depth_cap=cap))
        np.testing.assert_array_equal(got, [oracles.utp_brute(G, v, cap) for v in range(12)])


def test_all_features_match_oracles(rng):
    cfg = FeatureConfig()
    for _ in range(10):
        n = int(rng.integers(2, 31))
        g = random_graph(rng, n, int(rng.integers(0, 121)), integer_times=False)
        g.node_kind = random_kinds(rng, n)
        got, ref = features.compute_all(g, cfg), oracles.feature_oracle(g, cfg)
        for k in features.FEATURE_NAMES:
            np.testing.assert_allclose(got[k], ref[k], atol=1e-8, rtol=0, err_msg=k)


def test_assemble_standardizes(rng):
    g = random_graph(rng, 25, 90)
    g.node_kind = random_kinds(rng, 25)
    table, stats = features.extract(g)
    assert table.shape == (25, 19) and g.node_features is table
    assert np.all(table[:, -1] == g.node_kind)
    for j in range(18):
        if stats.sigma[j] > 1e-6:
            assert abs(table[:, j].mean()) < 1e-9
    again, _ = features.extract(g.copy())
    assert again.tobytes() == table.tobytes()
    fit = np.arange(10)
    t2, s2 = features.extract(g, fit_nodes=fit)
    for j in range(18):
        if s2.sigma[j] > 1e-6:
            assert abs(t2[fit, j].mean()) < 1e-9


def test_csv_export_round_trip(tmp_path, rng):
    g = random_graph(rng, 8, 20)
    table, _ = features.extract(g)
    features.export_csv(tmp_path / "f.csv", table)
    np.testing.assert_array_equal(features.load_csv(tmp_path / "f.csv"), table)


@given(st.integers(0, 2 ** 32 - 1))
def test_identities_and_ranges(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 20))
    g = random_graph(rng, n, int(rng.integers(0, 60)))
    g.node_kind = random_kinds(rng, n)
    f = features.compute_all(g)
    assert np.array_equal(f["atd"], f["aid"] + f["aod"])
    assert np.array_equal(f["tve"], f["ivf"] + f["ovf"])
    assert np.array_equal(f["dc"], f["ic"] + f["oc"])
    assert f["aid"].sum() == f["aod"].sum() == g.num_edges
    assert np.all((0 <= f["cir"]) & (f["cir"] <= 1))
    assert np.all((0 <= f["scc"]) & (f["scc"] <= 1 + 1e-12))
    assert np.all(f["pr"] > 0) and abs(f["pr"].sum() - 1) < 1e-6


@given(st.integers(0, 2 ** 32 - 1))
def test_permutation_equivariance(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 15))
    g = random_graph(rng, n, int(rng.integers(1, 40)))
    g.node_kind = random_kinds(rng, n)
    perm = rng.permutation(n)
    txs = [Transaction(int(perm[s]), int(perm[d]), float(t), 0.0, 0.0, int(ty), int(tk), float(v), 1.0, "h")
           for s, d, t, ty, tk, v in zip(g.src, g.dst, g.t, g.tx_type, g.token_type, g.value)]
    kinds = np.empty(n, dtype=np.int64)
    kinds[perm] = g.node_kind
    h = htamg.build(txs, kinds=kinds)
    a, b = features.compute_all(g), features.compute_all(h)
    for k in features.FEATURE_NAMES:
        np.testing.assert_allclose(b[k][perm], a[k], atol=1e-9, err_msg=k)
