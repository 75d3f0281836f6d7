"""Temporal graph encoder: time encoding, node memory, temporal attention and
edge representations over an ``Htamg`` event stream.

Memory semantics. Events are replayed in chunks of ``batch_size`` stream
positions. Within a chunk every message is computed from the memory snapshot
at the chunk start, messages are mean-aggregated per node and one GRU step is
applied. ``memory_at(v, t)`` uses exactly the events with timestamp < t: the
complete chunks before them come from cached snapshots and the trailing chunk
(possibly partial) is recomputed for the requested rows. Adding events at or
after ``t`` therefore never changes anything computed for time ``t``.
"""

import math
from contextlib import nullcontext
from dataclasses import dataclass, asdict

import numpy as np

from . import numeric as nm
from .numeric import Tensor
from .errors import ShapeError, TimeRegression, EmptyBuffer
from .htamg import EDGE_ATTR_DIM


@dataclass
class ModelConfig:
    layers: int = 2
    heads: int = 8
    dim: int = 128
    neighbors: int = 20
    batch_size: int = 256
    time_scale: float = 3600.0   # seconds per encoder time unit
    init: str = "glorot"         # weight init scheme, see ParamStore.add
    seed: int = 0

    def __post_init__(self):
        if self.init not in ("uniform", "glorot", "kaiming"):
            raise ValueError(f"unknown init scheme {self.init!r}")
        if self.time_scale <= 0:
            raise ValueError("time_scale must be positive")
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.dim < 2 or self.dim % 2:
            raise ValueError("dim must be even (time encoding uses dim/2 frequencies)")
        if self.heads < 1 or self.dim % self.heads:
            raise ValueError("heads must divide dim")
        if self.neighbors < 1 or self.batch_size < 1:
            raise ValueError("neighbors and batch_size must be positive")

    @property
    def freqs(self):
        return self.dim // 2


def affine(x, W, b=None):
    y = nm.matmul(x, W)
    return y if b is None else y + b


# -- time encoding ---------------------------------------------------------------

class TemporalEncoder:
    """phi(t) = sqrt(1/d) [cos w1 t, sin w1 t, ..., cos wd t, sin wd t]."""

    def __init__(self, omega, scale=1.0):
        self.omega = omega
        self.scale = float(scale)

    @property
    def d(self):
        return self.omega.shape[0]

    def __call__(self, t):
        t = np.asarray(t, dtype=float).reshape(-1, 1) / self.scale
        phase = nm.mul(Tensor(t), nm.reshape(self.omega, (1, self.d)))
        k = t.shape[0]
        c = nm.reshape(nm.cos(phase), (k, self.d, 1))
        s = nm.reshape(nm.sin(phase), (k, self.d, 1))
        out = nm.reshape(nm.concat([c, s], axis=2), (k, 2 * self.d))
        return nm.mul(out, math.sqrt(1.0 / self.d))


def init_frequencies(d):
    return 1.0 / 10.0 ** np.linspace(0, 9, d)


def encode_time(enc, t):
    """Encoding of a single time value as a flat array."""
    return enc(np.array([t])).data[0]


# -- model ---------------------------------------------------------------------

class PhishTGL:
    def __init__(self, cfg, node_feat_dim, edge_attr_dim=EDGE_ATTR_DIM, store=None):
        self.cfg = cfg
        self.node_feat_dim = int(node_feat_dim)
        self.edge_attr_dim = int(edge_attr_dim)
        self.store = store if store is not None else nm.ParamStore(cfg.seed)
        m, a, f = cfg.dim, self.edge_attr_dim, self.node_feat_dim
        st, w = self.store, cfg.init
        st.add("time.omega", (cfg.freqs,), value=init_frequencies(cfg.freqs))
        for side in ("msg_s", "msg_d"):
            st.add(f"{side}.W", (3 * m + a, m), init=w)
            st.add(f"{side}.b", (m,), init="zeros")
        for gate in ("z", "r", "h"):
            st.add(f"gru.W{gate}", (2 * m, m), init=w)
            st.add(f"gru.b{gate}", (m,), init="zeros")
        st.add("in.W", (m + f, m), init=w)
        st.add("in.b", (m,), init="zeros")
        st.add("edge.W", (a, m), init=w)
        st.add("edge.b", (m,), init="zeros")
        for l in range(1, cfg.layers + 1):
            st.add(f"att{l}.Wq", (2 * m, m), init=w)
            st.add(f"att{l}.Wk", (3 * m, m), init=w)
            st.add(f"att{l}.Wv", (3 * m, m), init=w)
            st.add(f"ffn{l}.W1", (2 * m, m), init=w)
            st.add(f"ffn{l}.b1", (m,), init="zeros")
            st.add(f"ffn{l}.W2", (m, m), init=w)
            st.add(f"ffn{l}.b2", (m,), init="zeros")
        self.time_encoder = TemporalEncoder(st["time.omega"], cfg.time_scale)

    def p(self, name):
        return self.store[name]

    # -- building blocks -----------------------------------------------------

    def message(self, side, s_self, s_other, dt, attr):
        x = nm.concat([s_self, s_other, self.time_encoder(dt), attr], axis=1)
        return nm.tanh(affine(x, self.p(f"{side}.W"), self.p(f"{side}.b")))

    def gru(self, mbar, s):
        if mbar.shape[-1] != self.cfg.dim or s.shape[-1] != self.cfg.dim:
            raise ShapeError(f"GRU expects width {self.cfg.dim}, got {mbar.shape} / {s.shape}")
        x = nm.concat([mbar, s], axis=1)
        z = nm.sigmoid(affine(x, self.p("gru.Wz"), self.p("gru.bz")))
        r = nm.sigmoid(affine(x, self.p("gru.Wr"), self.p("gru.br")))
        cand = nm.tanh(affine(nm.concat([mbar, r * s], axis=1), self.p("gru.Wh"), self.p("gru.bh")))
        return (1.0 - z) * s + z * cand

    def input_layer(self, s, x):
        if x.shape[1] != self.node_feat_dim:
            raise ShapeError(f"node feature width {x.shape[1]} != {self.node_feat_dim}")
        return affine(nm.concat([s, Tensor(x)], axis=1), self.p("in.W"), self.p("in.b"))

    def edge_input(self, attr):
        return affine(Tensor(attr), self.p("edge.W"), self.p("edge.b"))

    def attend(self, l, zv, zn, ze, dt, mask):
        """Multi-head attention of U queries over n neighbor slots.

        ``zv`` [U,m]; ``zn``/``ze`` [U*n,m]; ``dt``/``mask`` [U,n]. Returns the
        aggregated [U,m] output and the [U,n,H] attention weights."""
        U, n = mask.shape
        m, H = self.cfg.dim, self.cfg.heads
        hd = m // H
        phi0 = self.time_encoder(np.zeros(U))
        q = nm.matmul(nm.concat([zv, phi0], axis=1), self.p(f"att{l}.Wq"))
        kin = nm.concat([zn, ze, self.time_encoder(np.where(mask, dt, 0.0).reshape(-1))], axis=1)
        K = nm.reshape(nm.matmul(kin, self.p(f"att{l}.Wk")), (U, n, H, hd))
        V = nm.reshape(nm.matmul(kin, self.p(f"att{l}.Wv")), (U, n, H, hd))
        scores = nm.tsum(nm.reshape(q, (U, 1, H, hd)) * K, axis=3) * (1.0 / math.sqrt(hd))
        attn = nm.softmax(scores, axis=1, mask=mask[:, :, None])
        h = nm.tsum(nm.reshape(attn, (U, n, H, 1)) * V, axis=1)
        return nm.reshape(h, (U, m)), attn.data

    def combine(self, l, zprev, h):
        # zero-centred hidden units: a ReLU here drives all nodes towards a
        # shared direction at init (mean pairwise cosine ~0.6 after two layers)
        x = nm.concat([zprev, h], axis=1)
        hid = nm.tanh(affine(x, self.p(f"ffn{l}.W1"), self.p(f"ffn{l}.b1")))
        return affine(hid, self.p(f"ffn{l}.W2"), self.p(f"ffn{l}.b2"))

    # -- node embeddings -------------------------------------------------------

    def memory(self, g, bptt=False):
        return StreamMemory(self, g, bptt=bptt)

    def embed(self, g, X, nodes, times, mem=None, layer=None):
        """z^layer (default: last layer) for each (node, time) query."""
        nodes = np.asarray(nodes, dtype=np.int64).reshape(-1)
        times = np.broadcast_to(np.asarray(times, dtype=float), nodes.shape).copy()
        mem = mem if mem is not None else self.memory(g)
        X = np.asarray(X if X is not None else g.node_features, dtype=float)
        layer = self.cfg.layers if layer is None else layer
        if len(nodes) == 0:
            return Tensor(np.zeros((0, self.cfg.dim)))
        return self._embed(g, X, mem, layer, nodes, times)

    def _embed(self, g, X, mem, l, nodes, times):
        if l == 0:
            return self.input_layer(mem.lookup(nodes, times), X[nodes])
        pairs = np.stack([nodes.astype(float), times])
        uniq, inv = np.unique(pairs, axis=1, return_inverse=True)
        inv = inv.reshape(-1)
        un, ut = uniq[0].astype(np.int64), uniq[1]
        U, n = len(un), self.cfg.neighbors
        nbr, eid, etime, mask = g.sample_neighbors(un, ut, n, "both")
        qrow = np.broadcast_to(np.arange(U)[:, None], (U, n))
        need_nodes = np.concatenate([un, nbr[mask]])
        need_times = np.concatenate([ut, np.broadcast_to(ut[:, None], (U, n))[mask]])
        zprev = self._embed(g, X, mem, l - 1, need_nodes, need_times)
        pos = qrow.copy()
        pos[mask] = U + np.arange(int(mask.sum()))
        zv = nm.take(zprev, np.arange(U))
        zn = nm.take(zprev, pos.reshape(-1))
        ze = self.edge_input(g.edge_attr[eid.reshape(-1)]) if g.num_edges else \
            Tensor(np.zeros((U * n, self.cfg.dim)))
        h, _ = self.attend(l, zv, zn, ze, ut[:, None] - etime, mask)
        z = self.combine(l, zv, h)
        return nm.take(z, inv)

    # -- edge representations ------------------------------------------------

    def edge_representations(self, g, X=None, mem=None, upto=None):
        """z_e^L for the first ``upto`` edges of the stream (default: all).

        z_e^l = mean(z_e^{l-1}, h_uv, h_IN) with h_uv the mean endpoint
        embedding at t_e and h_IN the mean z^l of earlier edges into the same
        recipient (strictly earlier timestamps)."""
        E = g.num_edges if upto is None else int(upto)
        mem = mem if mem is not None else self.memory(g)
        X = np.asarray(X if X is not None else g.node_features, dtype=float)
        if E == 0:
            return Tensor(np.zeros((0, self.cfg.dim)))
        src, dst, t = g.src[:E], g.dst[:E], g.t[:E]
        levels = incoming_levels(dst, t)
        groups = [np.nonzero(levels == lv)[0] for lv in range(int(levels.max()) + 1)]
        perm = np.concatenate(groups)
        back = np.empty(E, dtype=np.int64)
        back[perm] = np.arange(E)
        z = self.edge_input(g.edge_attr[:E])
        ends = np.concatenate([src, dst])
        for l in range(1, self.cfg.layers + 1):
            zn = self._embed(g, X, mem, l, ends, np.concatenate([t, t]))
            huv = (nm.take(zn, np.arange(E)) + nm.take(zn, np.arange(E, 2 * E))) * 0.5
            base = z + huv
            running = Tensor(np.zeros((g.num_nodes, self.cfg.dim)))
            count = np.zeros(g.num_nodes)
            outs = []
            for S in groups:
                c = count[dst[S]]
                inv_c = np.divide(1.0, c, out=np.zeros_like(c), where=c > 0)
                h_in = nm.take(running, dst[S]) * inv_c[:, None]
                zs = (nm.take(base, S) + h_in) * (1.0 / 3.0)
                outs.append(zs)
                running = nm.index_add(running, dst[S], zs)
                np.add.at(count, dst[S], 1.0)
            z = nm.take(nm.concat(outs, axis=0), back)
        return z

    # -- persistence -----------------------------------------------------------

    def checkpoint(self, extra=None):
        doc = {"model_config": asdict(self.cfg), "node_feat_dim": self.node_feat_dim,
               "edge_attr_dim": self.edge_attr_dim}
        doc.update(extra or {})
        return self.store.to_checkpoint(doc)

    @classmethod
    def from_checkpoint(cls, doc):
        cfg = ModelConfig(**doc["model_config"])
        model = cls(cfg, doc["node_feat_dim"], doc["edge_attr_dim"])
        # auxiliary heads trained alongside the encoder (e.g. the projector)
        for name, rec in doc.get("params", {}).items():
            if name not in model.store:
                model.store.add(name, tuple(rec["shape"]), init="zeros")
        model.store.load_checkpoint(doc)
        return model


def incoming_levels(dst, t):
    """Rank of each edge's timestamp among the distinct timestamps of edges
    into the same recipient (0 = earliest)."""
    E = len(dst)
    order = np.lexsort((np.arange(E), t, dst))
    d, tt = dst[order], t[order]
    new_group = np.ones(E, dtype=bool)
    new_group[1:] = d[1:] != d[:-1]
    new_time = new_group.copy()
    new_time[1:] |= tt[1:] != tt[:-1]
    rank = np.cumsum(new_time) - 1
    group_start = np.maximum.accumulate(np.where(new_group, rank, 0))
    levels = np.empty(E, dtype=np.int64)
    levels[order] = rank - group_start
    return levels


# -- streaming memory -------------------------------------------------------------

class StreamMemory:
    """Chunked replay of one graph's event stream through the memory module.

    Snapshots at chunk boundaries are cached. With ``bptt=False`` they are
    detached (gradients flow only through the trailing chunk of a lookup);
    with ``bptt=True`` the full replay stays on the autodiff tape."""

    def __init__(self, model, g, bptt=False):
        self.model, self.g, self.bptt = model, g, bptt
        self.B = model.cfg.batch_size
        self.states = [Tensor(np.zeros((g.num_nodes, model.cfg.dim)))]
        self.last_update = [np.zeros(g.num_nodes)]

    def _messages(self, j, stop):
        g, a = self.g, j * self.B
        idx = np.arange(a, stop)
        S, lu = self.states[j], self.last_update[j]
        src, dst, t = g.src[idx], g.dst[idx], g.t[idx]
        dts, dtd = t - lu[src], t - lu[dst]
        if len(idx) and (dts.min() < 0 or dtd.min() < 0):
            raise TimeRegression("event older than an endpoint's last memory update")
        attr = Tensor(g.edge_attr[idx])
        ss, sd = nm.take(S, src), nm.take(S, dst)
        msgs = nm.concat([self.model.message("msg_s", ss, sd, dts, attr),
                          self.model.message("msg_d", sd, ss, dtd, attr)], axis=0)
        owner = np.concatenate([src, dst])
        eidx = np.concatenate([idx, idx]) - a
        side = np.repeat([0, 1], len(idx))
        order = np.lexsort((side, eidx, owner))
        return msgs, owner[order], eidx[order], order

    def _chunk_rows(self, j, nodes, ks):
        """Memory of ``nodes`` after applying events [jB, k) of chunk j."""
        a = j * self.B
        stop = int(ks.max())
        S = self.states[j]
        prev = nm.take(S, nodes)
        msgs, owner, eidx, order = self._messages(j, stop)
        span = stop - a + 1
        key = owner * span + eidx
        lo = np.searchsorted(key, nodes * span, side="left")
        hi = np.searchsorted(key, nodes * span + (ks - a), side="left")
        counts = hi - lo
        rows = np.nonzero(counts > 0)[0]
        if len(rows) == 0:
            return prev
        c = counts[rows]
        seg = np.repeat(np.arange(len(rows)), c)
        offs = np.arange(int(c.sum())) - np.repeat(np.cumsum(c) - c, c)
        picked = order[np.repeat(lo[rows], c) + offs]
        mbar = nm.segment_mean(nm.take(msgs, picked), seg, len(rows))
        new = self.model.gru(mbar, nm.take(prev, rows))
        return nm.scatter_rows(prev, rows, new)

    def _ensure(self, j):
        g = self.g
        while len(self.states) <= j:
            jj = len(self.states) - 1
            a, b = jj * self.B, min((jj + 1) * self.B, g.num_edges)
            touched = np.unique(np.concatenate([g.src[a:b], g.dst[a:b]]))
            ctx = nullcontext() if self.bptt else nm.no_grad()
            with ctx:
                rows = self._chunk_rows(jj, touched, np.full(len(touched), b))
                new = nm.scatter_rows(self.states[jj], touched, rows)
            lu = self.last_update[jj].copy()
            np.maximum.at(lu, g.src[a:b], g.t[a:b])
            np.maximum.at(lu, g.dst[a:b], g.t[a:b])
            self.states.append(new if self.bptt else new.detach())
            self.last_update.append(lu)

    def lookup(self, nodes, times):
        """Memory rows s_v(t) built from the events strictly before each t."""
        nodes = np.asarray(nodes, dtype=np.int64).reshape(-1)
        times = np.broadcast_to(np.asarray(times, dtype=float), nodes.shape)
        k = np.searchsorted(self.g.t, times, side="left")
        chunk = np.where(k > 0, (k - 1) // self.B, -1)
        parts, where = [], []
        for j in np.unique(chunk):
            rows = np.nonzero(chunk == j)[0]
            if j < 0:
                parts.append(Tensor(np.zeros((len(rows), self.model.cfg.dim))))
            else:
                self._ensure(int(j))
                parts.append(self._chunk_rows(int(j), nodes[rows], k[rows]))
            where.append(rows)
        if len(parts) == 1:
            return parts[0]
        back = np.empty(len(nodes), dtype=np.int64)
        back[np.concatenate(where)] = np.arange(len(nodes))
        return nm.take(nm.concat(parts, axis=0), back)

    def last_update_at(self, nodes, times):
        nodes = np.asarray(nodes, dtype=np.int64)
        out = np.zeros(len(nodes))
        for i, (v, t) in enumerate(zip(nodes, np.broadcast_to(times, nodes.shape))):
            k = np.searchsorted(self.g.t, t, side="left")
            hit = (self.g.src[:k] == v) | (self.g.dst[:k] == v)
            out[i] = self.g.t[:k][hit].max() if hit.any() else 0.0
        return out

    def final(self):
        """Memory of every node after the whole stream."""
        g = self.g
        t_end = np.nextafter(g.max_time, np.inf) if g.num_edges else 0.0
        with nm.no_grad():
            return self.lookup(np.arange(g.num_nodes), t_end).data


# -- per-event reference API -------------------------------------------------------

class NodeMemory:
    """Explicit per-node memory with message buffers (event-at-a-time API)."""

    def __init__(self, num_nodes, dim):
        self.state = np.zeros((num_nodes, dim))
        self.last_update = np.zeros(num_nodes)
        self.buffer = {}


def compute_messages(mem, model, v, u, t_e, attr):
    """Messages for event v -> u at t_e, buffered on both endpoints."""
    if t_e < mem.last_update[v] or t_e < mem.last_update[u]:
        raise TimeRegression(f"event at {t_e} precedes last memory update")
    attr = Tensor(np.asarray(attr, dtype=float).reshape(1, -1))
    sv, su = Tensor(mem.state[[v]]), Tensor(mem.state[[u]])
    m_v = model.message("msg_s", sv, su, [t_e - mem.last_update[v]], attr)
    m_u = model.message("msg_d", su, sv, [t_e - mem.last_update[u]], attr)
    mem.buffer.setdefault(v, []).append(m_v)
    mem.buffer.setdefault(u, []).append(m_u)
    return m_v, m_u


def aggregate_messages(messages):
    if not messages:
        raise EmptyBuffer("no buffered messages to aggregate")
    return nm.mean(nm.concat(list(messages), axis=0), axis=0, keepdims=True)


def update_memory(mem, model, v, mbar, t_e):
    new = model.gru(mbar, Tensor(mem.state[[v]]))
    mem.state[v] = new.data[0]
    mem.last_update[v] = max(mem.last_update[v], t_e)
    mem.buffer.pop(v, None)
    return new


def replay_events(mem, model, g, start, stop):
    """Apply events [start, stop) as one batch: buffer all messages from the
    current state, then update every touched node once."""
    touched_t = {}
    for e in range(start, stop):
        v, u, t_e = int(g.src[e]), int(g.dst[e]), float(g.t[e])
        compute_messages(mem, model, v, u, t_e, g.edge_attr[e])
    for e in range(start, stop):
        for w in (int(g.src[e]), int(g.dst[e])):
            touched_t[w] = max(touched_t.get(w, -np.inf), float(g.t[e]))
    # messages were computed against the pre-batch state, so update afterwards
    pending = {w: aggregate_messages(mem.buffer[w]) for w in touched_t}
    for w, mbar in pending.items():
        update_memory(mem, model, w, mbar, touched_t[w])
    return mem
