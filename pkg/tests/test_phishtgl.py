import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ethphish import htamg, numeric as nm
from ethphish.errors import EmptyBuffer, ShapeError, TimeRegression
from ethphish.ingest import Transaction
from ethphish.numeric import Tensor
from ethphish.phishtgl import (ModelConfig, NodeMemory, PhishTGL, TemporalEncoder, aggregate_messages,
                               compute_messages, encode_time, incoming_levels, init_frequencies,
                               replay_events, update_memory)

from conftest import random_graph, random_transactions

F = 4


def small_model(**kw):
    cfg = dict(layers=2, heads=2, dim=8, neighbors=3, batch_size=4, time_scale=1.0, seed=0)
    cfg.update(kw)
    return PhishTGL(ModelConfig(**cfg), F)


def features(rng, n):
    return rng.normal(size=(n, F))


def tx(s, d, t, i, cat=0, tok=0):
    return Transaction(s, d, float(t), 0.3 * i - 1.0, 0.1 * i, cat, tok, 1.0, 21000.0, f"0x{i:064x}")


def toy_graph():
    # 6 nodes, a few repeated pairs, one tie in time
    pairs = [(0, 1, 1), (1, 2, 2), (2, 0, 3), (3, 1, 4), (1, 4, 4), (4, 5, 6), (5, 1, 7), (3, 4, 9)]
    return htamg.build([tx(s, d, t, i, i % 5, i % 3) for i, (s, d, t) in enumerate(pairs)], num_nodes=6)


# -- time encoding --------------------------------------------------------------

def test_encode_time_zero():
    enc = TemporalEncoder(Tensor(np.array([1.0, 0.3])))
    np.testing.assert_allclose(encode_time(enc, 0.0), math.sqrt(0.5) * np.array([1, 0, 1, 0]), atol=1e-15)


def test_encode_time_layout():
    w = np.array([0.5, 2.0, 7.0])
    enc = TemporalEncoder(Tensor(w), scale=10.0)
    t = 13.0
    ref = np.ravel([[math.cos(x * t / 10), math.sin(x * t / 10)] for x in w]) / math.sqrt(3)
    np.testing.assert_allclose(encode_time(enc, t), ref, atol=1e-15)


@given(st.floats(-1e9, 1e9, allow_nan=False))
def test_encode_time_unit_norm(t):
    enc = TemporalEncoder(Tensor(init_frequencies(16)))
    assert abs(np.linalg.norm(encode_time(enc, t)) - 1) < 1e-12


def test_encode_time_grad(rng):
    ts = rng.uniform(0, 5, 7)
    c = Tensor(rng.normal(size=(7, 6)))
    err = nm.grad_check(lambda w: nm.tsum(TemporalEncoder(w)(ts) * c), rng.uniform(0.1, 2, 3))
    assert err < 1e-4


def test_config_validation():
    for bad in (dict(dim=7), dict(heads=3, dim=8), dict(layers=0), dict(init="nope"), dict(time_scale=0)):
        with pytest.raises(ValueError):
            ModelConfig(**bad)
    cfg = ModelConfig()
    assert (cfg.layers, cfg.heads, cfg.dim, cfg.neighbors, cfg.freqs) == (2, 8, 128, 20, 64)


# -- messages and memory --------------------------------------------------------

def test_first_event_dt_and_buffers(rng):
    model = small_model()
    mem = NodeMemory(3, 8)
    attr = rng.normal(size=11)
    m_v, m_u = compute_messages(mem, model, 0, 1, 5.0, attr)
    zero = Tensor(np.zeros((1, 8)))
    a = Tensor(attr.reshape(1, -1))
    assert m_v.data.tobytes() == model.message("msg_s", zero, zero, [5.0], a).data.tobytes()
    assert m_u.data.tobytes() == model.message("msg_d", zero, zero, [5.0], a).data.tobytes()
    assert len(mem.buffer[0]) == 1 and len(mem.buffer[1]) == 1
    compute_messages(mem, model, 2, 2, 6.0, attr)
    assert len(mem.buffer[2]) == 2


def test_message_hand_concatenation(rng):
    model = small_model()
    mem = NodeMemory(2, 8)
    mem.state[:] = rng.normal(size=(2, 8))
    mem.last_update[:] = [1.0, 3.0]
    attr = rng.normal(size=11)
    m_v, m_u = compute_messages(mem, model, 0, 1, 4.0, attr)
    enc = model.time_encoder
    for side, mine, other, dt, got in (("msg_s", 0, 1, 3.0, m_v), ("msg_d", 1, 0, 1.0, m_u)):
        x = np.concatenate([mem.state[mine], mem.state[other], encode_time(enc, dt), attr])
        ref = np.tanh(x @ model.p(f"{side}.W").data + model.p(f"{side}.b").data)
        np.testing.assert_allclose(got.data[0], ref, atol=1e-13)
    # independent parameters
    assert model.p("msg_s.W") is not model.p("msg_d.W")
    assert not np.array_equal(model.p("msg_s.W").data, model.p("msg_d.W").data)


def test_time_regression():
    model = small_model()
    mem = NodeMemory(2, 8)
    mem.last_update[1] = 10.0
    with pytest.raises(TimeRegression):
        compute_messages(mem, model, 0, 1, 9.0, np.zeros(11))


def test_aggregate_messages(rng):
    one = Tensor(rng.normal(size=(1, 5)))
    assert aggregate_messages([one]).data.tobytes() == one.data.tobytes()
    two = aggregate_messages([Tensor(np.ones((1, 2))), Tensor(np.full((1, 2), 3.0))])
    np.testing.assert_array_equal(two.data, [[2.0, 2.0]])
    ms = [Tensor(rng.normal(size=(1, 6))) for _ in range(9)]
    naive = sum(m.data[0] for m in ms) / 9
    np.testing.assert_allclose(aggregate_messages(ms).data[0], naive, atol=1e-12)
    with pytest.raises(EmptyBuffer):
        aggregate_messages([])


def test_gru_update_gate_limit(rng):
    model = small_model()
    st_ = model.store
    m = 8
    st_["gru.Wz"].data[:] = 0.0
    st_["gru.bz"].data[:] = 60.0       # z == 1 in double precision
    st_["gru.Wr"].data[:] = 0.0
    st_["gru.br"].data[:] = -60.0      # r == 0: candidate ignores the old state
    mbar = rng.normal(size=(1, m))
    cand = np.tanh(mbar @ st_["gru.Wh"].data[:m] + st_["gru.bh"].data)
    for _ in range(3):
        s = Tensor(rng.normal(size=(1, m)))
        np.testing.assert_allclose(model.gru(Tensor(mbar), s).data, cand, atol=1e-15)


def test_update_memory_sets_time_and_clears(rng):
    model = small_model()
    mem = NodeMemory(3, 8)
    compute_messages(mem, model, 0, 1, 2.0, np.zeros(11))
    update_memory(mem, model, 0, aggregate_messages(mem.buffer[0]), 2.0)
    assert 0 not in mem.buffer and mem.last_update[0] == 2.0
    assert np.all(mem.state[2] == 0) and np.any(mem.state[0] != 0)
    with pytest.raises(ShapeError):
        update_memory(mem, model, 1, Tensor(np.zeros((1, 5))), 2.0)


def test_two_chained_updates_grad(rng):
    model = small_model()
    mbar = [Tensor(rng.normal(size=(2, 8))) for _ in range(2)]
    s0 = Tensor(rng.normal(size=(2, 8)) * 0.5)
    c = Tensor(rng.normal(size=(2, 8)))

    def objective():
        return nm.tsum(model.gru(mbar[1], model.gru(mbar[0], s0)) * c)

    errs = nm.grad_check_params(objective, model.store, names={n for n in model.store.params if n.startswith("gru.")})
    assert max(errs.values()) < 1e-4


def test_stream_memory_matches_event_replay(rng):
    for trial in range(3):
        g = random_graph(rng, 7, 23, t_max=50)
        model = small_model(batch_size=5, seed=trial)
        ref = NodeMemory(g.num_nodes, 8)
        for a in range(0, g.num_edges, 5):
            replay_events(ref, model, g, a, min(a + 5, g.num_edges))
        np.testing.assert_allclose(model.memory(g).final(), ref.state, atol=1e-12)


def test_untouched_memory_stays_zero(rng):
    txs = random_transactions(rng, 5, 20)
    g = htamg.build(txs, num_nodes=8)
    fin = small_model().memory(g).final()
    assert np.all(fin[5:] == 0)


def test_lookup_uses_only_earlier_events(rng):
    g = random_graph(rng, 6, 30, t_max=40)
    model = small_model(batch_size=4)
    mem = model.memory(g)
    for t in (0.0, 5.0, 17.5, 41.0):
        k = int(np.searchsorted(g.t, t, side="left"))
        ref = NodeMemory(g.num_nodes, 8)
        for a in range(0, k, 4):
            replay_events(ref, model, g, a, min(a + 4, k))
        # the trailing chunk is partial: reference replays it as a shorter batch
        np.testing.assert_allclose(mem.lookup(np.arange(6), t).data, ref.state, atol=1e-12)


# -- attention and combine ------------------------------------------------------

def attention_inputs(rng, U, n, m=8):
    return (Tensor(rng.normal(size=(U, m))), Tensor(rng.normal(size=(U * n, m))),
            Tensor(rng.normal(size=(U * n, m))), rng.uniform(0, 10, (U, n)))


def value_projection(model, l, zn, ze, dt):
    kin = np.concatenate([zn, ze, model.time_encoder(np.atleast_1d(dt)).data], axis=1)
    return kin @ model.p(f"att{l}.Wv").data


def test_attend_single_neighbor(rng):
    model = small_model()
    zv, zn, ze, dt = attention_inputs(rng, 1, 3)
    mask = np.array([[True, False, False]])
    h, attn = model.attend(1, zv, zn, ze, dt, mask)
    np.testing.assert_allclose(attn[0, 0], 1.0, atol=0)
    ref = value_projection(model, 1, zn.data[:1], ze.data[:1], dt[0, :1])
    np.testing.assert_allclose(h.data, ref, atol=1e-13)


def test_attend_empty_neighborhood(rng):
    model = small_model()
    zv, zn, ze, dt = attention_inputs(rng, 2, 3)
    mask = np.zeros((2, 3), bool)
    h, attn = model.attend(2, zv, zn, ze, dt, mask)
    assert np.all(h.data == 0) and np.all(attn == 0)


def test_attend_tied_keys_average_values(rng):
    model = small_model()
    model.store["att1.Wk"].data[:] = 0.0
    zv, zn, ze, dt = attention_inputs(rng, 1, 2)
    h, attn = model.attend(1, zv, zn, ze, dt, np.ones((1, 2), bool))
    ref = value_projection(model, 1, zn.data, ze.data, dt[0]).mean(axis=0, keepdims=True)
    np.testing.assert_allclose(h.data, ref, atol=1e-13)
    np.testing.assert_allclose(attn, 0.5, atol=1e-15)


@given(st.integers(0, 2 ** 32 - 1))
def test_attention_weights_sum_to_one(seed):
    r = np.random.default_rng(seed)
    model = small_model()
    zv, zn, ze, dt = attention_inputs(r, 5, 4)
    mask = r.random((5, 4)) < 0.7
    _, attn = model.attend(1, zv, zn, ze, dt, mask)
    sums = attn.sum(axis=1)
    has = mask.any(axis=1)
    assert np.all(np.abs(sums[has] - 1) < 1e-12) and np.all(sums[~has] == 0)
    assert np.all(attn[~mask] == 0)


def test_combine_zero_weights(rng):
    model = small_model()
    for name in ("ffn1.W1", "ffn1.W2"):
        model.store[name].data[:] = 0.0
    model.store["ffn1.b2"].data[:] = rng.normal(size=8)
    out = model.combine(1, Tensor(rng.normal(size=(3, 8))), Tensor(rng.normal(size=(3, 8))))
    np.testing.assert_array_equal(out.data, np.tile(model.store["ffn1.b2"].data, (3, 1)))


def test_input_layer_shapes(rng):
    model = small_model()
    z0 = model.input_layer(Tensor(np.zeros((3, 8))), rng.normal(size=(3, F)))
    assert z0.shape == (3, 8)
    with pytest.raises(ShapeError):
        model.input_layer(Tensor(np.zeros((3, 8))), rng.normal(size=(3, F + 1)))


# -- node embeddings ------------------------------------------------------------

def embed_oracle(model, g, X, mem, v, t, l):
    """One query at a time: recent_neighbors + attend + combine, recursively."""
    if l == 0:
        return model.input_layer(mem.lookup([v], t), X[[v]]).data
    zv = embed_oracle(model, g, X, mem, v, t, l - 1)
    n, m = model.cfg.neighbors, model.cfg.dim
    s = g.recent_neighbors(v, t, n)
    zn, ze, dt, mask = np.zeros((n, m)), np.zeros((n, m)), np.zeros((1, n)), np.zeros((1, n), bool)
    for i, (u, e, te) in enumerate(zip(s.nodes, s.edges, s.times)):
        zn[i] = embed_oracle(model, g, X, mem, int(u), t, l - 1)[0]
        ze[i] = model.edge_input(g.edge_attr[[e]]).data[0]
        dt[0, i], mask[0, i] = t - te, True
    h, _ = model.attend(l, Tensor(zv), Tensor(zn), Tensor(ze), dt, mask)
    return model.combine(l, Tensor(zv), h).data


@pytest.mark.parametrize("layers", [1, 2])
def test_embedding_matches_unrolled(rng, layers):
    g = toy_graph()
    X = features(rng, 6)
    model = small_model(layers=layers, neighbors=2)
    mem = model.memory(g)
    nodes = np.array([0, 1, 4, 5, 1, 3])
    times = np.array([3.5, 4.0, 8.0, 10.0, 10.0, 1.0])
    got = model.embed(g, X, nodes, times, mem).data
    for i, (v, t) in enumerate(zip(nodes, times)):
        np.testing.assert_allclose(got[i], embed_oracle(model, g, X, mem, int(v), t, layers)[0], atol=1e-12)


def test_isolated_node_uses_memory_and_features_only(rng):
    g = htamg.build([tx(0, 1, 1.0, 0)], num_nodes=3)
    X = features(rng, 3)
    model = small_model()
    z = Tensor(model.input_layer(Tensor(np.zeros((1, 8))), X[[2]]).data)
    for l in (1, 2):
        z = model.combine(l, z, Tensor(np.zeros((1, 8))))
    np.testing.assert_allclose(model.embed(g, X, [2], 5.0).data, z.data, atol=1e-13)


def relabel(txs, perm):
    return [Transaction(int(perm[x.src]), int(perm[x.dst]), x.t, x.value_z, x.gas_z, x.tx_type_id,
                        x.token_type_id, x.value, x.gas, x.tx_hash) for x in txs]


def test_permutation_equivariance(rng):
    for _ in range(3):
        n = 9
        txs = random_transactions(rng, n, 35, t_max=60)
        perm = rng.permutation(n)
        g, gp = htamg.build(txs, num_nodes=n), htamg.build(relabel(txs, perm), num_nodes=n)
        X = features(rng, n)
        Xp = np.empty_like(X)
        Xp[perm] = X
        model = small_model()
        nodes, t = np.arange(n), 61.0
        z = model.embed(g, X, nodes, t).data
        zp = model.embed(gp, Xp, perm[nodes], t).data
        assert z.tobytes() == zp.tobytes()
        assert model.edge_representations(g, X).data.tobytes() == \
            model.edge_representations(gp, Xp).data.tobytes()


# -- edge representations -------------------------------------------------------

def edge_oracle(model, g, X):
    mem = model.memory(g)
    E, L = g.num_edges, model.cfg.layers
    z = model.edge_input(g.edge_attr).data
    for l in range(1, L + 1):
        new = np.zeros_like(z)
        for e in range(E):
            zu = model.embed(g, X, [g.src[e]], g.t[e], mem, layer=l).data[0]
            zv = model.embed(g, X, [g.dst[e]], g.t[e], mem, layer=l).data[0]
            prior = [k for k in range(E) if g.dst[k] == g.dst[e] and g.t[k] < g.t[e]]
            h_in = np.mean([new[k] for k in prior], axis=0) if prior else np.zeros(z.shape[1])
            new[e] = (z[e] + (zu + zv) / 2 + h_in) / 3
        z = new
    return z


def test_edge_representation_single_edge(rng):
    g = htamg.build([tx(0, 1, 2.0, 0, 1, 1)], num_nodes=2)
    X = features(rng, 2)
    model = small_model()
    got = model.edge_representations(g, X).data
    assert got.shape == (1, 8)
    np.testing.assert_allclose(got, edge_oracle(model, g, X), atol=1e-13)


def test_edge_representation_sequential_into_one_recipient(rng):
    g = htamg.build([tx(0, 3, 1.0, 0), tx(1, 3, 2.0, 1, 2, 1), tx(2, 3, 4.0, 2, 1, 2)], num_nodes=4)
    X = features(rng, 4)
    model = small_model()
    np.testing.assert_allclose(model.edge_representations(g, X).data, edge_oracle(model, g, X), atol=1e-12)


def test_edge_representation_toy_graph(rng):
    g = toy_graph()
    X = features(rng, 6)
    model = small_model()
    got = model.edge_representations(g, X)
    assert got.shape == (g.num_edges, 8)
    np.testing.assert_allclose(got.data, edge_oracle(model, g, X), atol=1e-12)


def test_incoming_levels():
    dst = np.array([3, 3, 1, 3, 1, 3])
    t = np.array([1.0, 1.0, 2.0, 4.0, 5.0, 7.0])
    np.testing.assert_array_equal(incoming_levels(dst, t), [0, 0, 0, 1, 1, 2])


# -- causality and persistence --------------------------------------------------

def test_causality_node_and_edge(rng):
    for trial in range(20):
        n = int(rng.integers(4, 12))
        txs = random_transactions(rng, n, int(rng.integers(5, 40)), t_max=100)
        g = htamg.build(txs, num_nodes=n)
        cut = float(g.t[-1])
        extra = [Transaction(x.src, x.dst, x.t + cut + 1.0, x.value_z, x.gas_z, x.tx_type_id,
                             x.token_type_id, x.value, x.gas, x.tx_hash + "f")
                 for x in random_transactions(rng, n + 2, 15, t_max=30)]
        # events at exactly the last timestamp are also "future" for queries at that time
        extra[0] = Transaction(0, 1, cut, 0.0, 0.0, 0, 0, 1.0, 1.0, "tie")
        extra.sort(key=lambda x: x.t)
        g2 = htamg.extend(g, extra)
        X = features(rng, n)
        X2 = np.vstack([X, np.zeros((g2.num_nodes - n, F))])
        model = small_model(seed=trial, batch_size=int(rng.integers(2, 9)))
        nodes = np.arange(n)
        times = rng.uniform(0, cut, n)
        times[0] = cut
        a = model.embed(g, X, nodes, times).data
        b = model.embed(g2, X2, nodes, times).data
        assert a.tobytes() == b.tobytes()
        za = model.edge_representations(g, X).data
        zb = model.edge_representations(g2, X2, upto=g.num_edges).data
        assert za.tobytes() == zb.tobytes()


def test_checkpoint_roundtrip(rng):
    g = toy_graph()
    X = features(rng, 6)
    model = small_model(seed=4)
    doc = json.loads(nm.dumps_checkpoint(model.checkpoint()))
    other = PhishTGL.from_checkpoint(doc)
    assert other.cfg == model.cfg
    assert other.embed(g, X, [1, 4], 9.0).data.tobytes() == model.embed(g, X, [1, 4], 9.0).data.tobytes()
