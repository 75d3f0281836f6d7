"""Heterogeneous temporal attributed multi-graph with time-sorted adjacency.

Edges are stored column-wise in insertion (= time) order, so an edge id is
also its position in the event stream. Per-node adjacency is kept in CSR form
for three directions (in, out, both); each segment is sorted by edge id and
therefore by time, which lets neighbor queries binary-search on time.
"""

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import UnsortedInput, TimeRegression, NodeOutOfRange, ShapeMismatch
from .ingest import TxCategory, TokenStandard, AccountKind

N_TX_TYPES = len(TxCategory)
N_TOKEN_TYPES = len(TokenStandard)
EDGE_ATTR_DIM = 2 + N_TX_TYPES + N_TOKEN_TYPES

SNAPSHOT_MAGIC = b"HTAMG\x00\x00\x01"
SNAPSHOT_VERSION = 1
EDGE_DTYPE = np.dtype([
    ("src", "<i8"), ("dst", "<i8"), ("t", "<f8"),
    ("value", "<f8"), ("gas", "<f8"), ("value_z", "<f8"), ("gas_z", "<f8"),
    ("tx_type", "<u1"), ("token_type", "<u1"),
])

DIRECTIONS = ("in", "out", "both")


@dataclass
class NeighborSample:
    nodes: np.ndarray
    edges: np.ndarray
    times: np.ndarray

    def __len__(self):
        return len(self.edges)


def _csr(keys, num_nodes, eids):
    order = np.argsort(keys, kind="stable")
    counts = np.bincount(keys, minlength=num_nodes)
    ptr = np.zeros(num_nodes + 1, dtype=np.int64)
    np.cumsum(counts, out=ptr[1:])
    return ptr, eids[order]


class Htamg:
    def __init__(self, num_nodes, node_kind=None):
        self.num_nodes = int(num_nodes)
        kinds = np.full(self.num_nodes, int(AccountKind.Unknown), dtype=np.int64)
        if node_kind is not None:
            node_kind = np.asarray(node_kind, dtype=np.int64)
            kinds[:len(node_kind)] = node_kind[:self.num_nodes]
        self.node_kind = kinds
        self.node_features = None
        self.src = np.zeros(0, dtype=np.int64)
        self.dst = np.zeros(0, dtype=np.int64)
        self.t = np.zeros(0, dtype=np.float64)
        self.value = np.zeros(0)
        self.gas = np.zeros(0)
        self.value_z = np.zeros(0)
        self.gas_z = np.zeros(0)
        self.tx_type = np.zeros(0, dtype=np.int64)
        self.token_type = np.zeros(0, dtype=np.int64)
        self.tx_hashes = []
        self._edge_attr = None
        self._index()

    # -- construction -----------------------------------------------------

    @property
    def num_edges(self):
        return len(self.src)

    @property
    def max_time(self):
        return float(self.t[-1]) if self.num_edges else -np.inf

    def _append(self, cols, hashes):
        for name, arr in cols.items():
            setattr(self, name, np.concatenate([getattr(self, name), arr]))
        self.tx_hashes = self.tx_hashes + list(hashes)
        self._edge_attr = None

    def _index(self):
        n, eids = self.num_nodes, np.arange(self.num_edges, dtype=np.int64)
        self.in_ptr, self.in_eid = _csr(self.dst, n, eids)
        self.out_ptr, self.out_eid = _csr(self.src, n, eids)
        loop = self.src == self.dst
        keys = np.concatenate([self.src, self.dst[~loop]])
        both = np.concatenate([eids, eids[~loop]])
        # both-index: stable sort by node, then by edge id (= time, ties by id)
        order = np.lexsort((both, keys))
        counts = np.bincount(keys, minlength=n)
        self.both_ptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(counts, out=self.both_ptr[1:])
        self.both_eid = both[order]

    @property
    def edge_attr(self):
        """[value_z, gas_z, tx-type one-hot, token-type one-hot] per edge."""
        if self._edge_attr is None:
            a = np.zeros((self.num_edges, EDGE_ATTR_DIM))
            a[:, 0] = self.value_z
            a[:, 1] = self.gas_z
            rows = np.arange(self.num_edges)
            a[rows, 2 + self.tx_type] = 1.0
            a[rows, 2 + N_TX_TYPES + self.token_type] = 1.0
            self._edge_attr = a
        return self._edge_attr

    def copy(self):
        g = Htamg(self.num_nodes, self.node_kind)
        for name in ("src", "dst", "t", "value", "gas", "value_z", "gas_z", "tx_type", "token_type"):
            setattr(g, name, getattr(self, name).copy())
        g.tx_hashes = list(self.tx_hashes)
        g.node_features = None if self.node_features is None else self.node_features.copy()
        g._index()
        return g

    def set_node_features(self, table):
        table = np.asarray(table, dtype=float)
        if table.ndim != 2 or table.shape[0] != self.num_nodes:
            raise ShapeMismatch(f"feature table {table.shape} for {self.num_nodes} nodes")
        self.node_features = table

    def subgraph_edges(self, keep):
        """New graph over the same node set with only the edges where ``keep`` is true."""
        keep = np.asarray(keep, dtype=bool)
        g = Htamg(self.num_nodes, self.node_kind)
        for name in ("src", "dst", "t", "value", "gas", "value_z", "gas_z", "tx_type", "token_type"):
            setattr(g, name, getattr(self, name)[keep].copy())
        g.tx_hashes = [h for h, k in zip(self.tx_hashes, keep) if k]
        g.node_features = self.node_features
        g._index()
        return g

    # -- queries ----------------------------------------------------------

    def _segment(self, v, direction):
        if direction == "in":
            return self.in_eid[self.in_ptr[v]:self.in_ptr[v + 1]]
        if direction == "out":
            return self.out_eid[self.out_ptr[v]:self.out_ptr[v + 1]]
        if direction == "both":
            return self.both_eid[self.both_ptr[v]:self.both_ptr[v + 1]]
        raise ValueError(f"direction must be one of {DIRECTIONS}")

    def incident_edges(self, v, direction="both"):
        return self._segment(v, direction)

    def other_end(self, v, eids):
        return np.where(self.src[eids] == v, self.dst[eids], self.src[eids])

    def recent_neighbors(self, v, t, n, direction="both"):
        """The ``n`` most recent events incident to ``v`` strictly before ``t``."""
        if not 0 <= v < self.num_nodes:
            raise NodeOutOfRange(f"node {v} not in [0, {self.num_nodes})")
        if n < 1:
            raise ValueError("n must be >= 1")
        seg = self._segment(v, direction)
        end = int(np.searchsorted(self.t[seg], t, side="left"))
        eids = seg[max(0, end - n):end]
        return NeighborSample(self.other_end(v, eids), eids, self.t[eids])

    def sample_neighbors(self, nodes, times, n, direction="both"):
        """Batched ``recent_neighbors``.

        Returns ``(nbr, eid, etime, mask)`` arrays of shape ``[Q, n]``; valid
        entries are left-aligned in chronological order.
        """
        nodes = np.asarray(nodes, dtype=np.int64)
        times = np.asarray(times, dtype=float)
        q = len(nodes)
        eid = np.zeros((q, n), dtype=np.int64)
        if q and (nodes.min() < 0 or nodes.max() >= self.num_nodes):
            raise NodeOutOfRange("query node outside graph")
        if direction == "in":
            ptr, flat = self.in_ptr, self.in_eid
        elif direction == "out":
            ptr, flat = self.out_ptr, self.out_eid
        else:
            ptr, flat = self.both_ptr, self.both_eid
        seg_times = self.t[flat]
        # vectorized lower bound of each query time inside its node's segment
        a = ptr[nodes]
        lo, hi = a.copy(), ptr[nodes + 1].copy()
        while True:
            open_ = lo < hi
            if not open_.any():
                break
            mid = (lo + hi) // 2
            before = open_ & (seg_times[np.minimum(mid, max(len(flat) - 1, 0))] < times)
            lo = np.where(before, mid + 1, lo)
            hi = np.where(open_ & ~before, mid, hi)
        starts = np.maximum(a, lo - n)
        counts = lo - starts
        cols = np.arange(n)
        mask = cols[None, :] < counts[:, None]
        if len(flat):
            idx = np.minimum(starts[:, None] + cols[None, :], len(flat) - 1)
            eid = np.where(mask, flat[idx], 0)
        nbr = np.where(self.src[eid] == nodes[:, None], self.dst[eid], self.src[eid])
        nbr = np.where(mask, nbr, 0)
        etime = np.where(mask, self.t[eid], 0.0)
        return nbr, eid, etime, mask

    # -- comparison / persistence -------------------------------------------

    def same_as(self, other):
        if self.num_nodes != other.num_nodes or self.num_edges != other.num_edges:
            return False
        cols = ("src", "dst", "t", "value", "gas", "value_z", "gas_z", "tx_type", "token_type",
                "node_kind", "in_ptr", "in_eid", "out_ptr", "out_eid", "both_ptr", "both_eid")
        return all(np.array_equal(getattr(self, c), getattr(other, c)) for c in cols) \
            and self.tx_hashes == other.tx_hashes

    def save(self, path, metadata=None):
        """Little-endian binary snapshot plus a ``.json`` metadata sidecar."""
        path = Path(path)
        rec = np.zeros(self.num_edges, dtype=EDGE_DTYPE)
        for name in ("src", "dst", "t", "value", "gas", "value_z", "gas_z"):
            rec[name] = getattr(self, name)
        rec["tx_type"] = self.tx_type
        rec["token_type"] = self.token_type
        with open(path, "wb") as fh:
            fh.write(SNAPSHOT_MAGIC)
            fh.write(struct.pack("<IQQ", SNAPSHOT_VERSION, self.num_nodes, self.num_edges))
            fh.write(self.node_kind.astype("<i1").tobytes())
            fh.write(rec.tobytes())
        side = {"version": SNAPSHOT_VERSION, "num_nodes": self.num_nodes,
                "num_edges": self.num_edges, "tx_hashes": self.tx_hashes}
        side.update(metadata or {})
        path.with_suffix(".json").write_text(json.dumps(side, sort_keys=True))

    @classmethod
    def load(cls, path):
        path = Path(path)
        raw = path.read_bytes()
        if raw[:8] != SNAPSHOT_MAGIC:
            raise ValueError(f"{path} is not a graph snapshot")
        version, num_nodes, num_edges = struct.unpack("<IQQ", raw[8:28])
        if version != SNAPSHOT_VERSION:
            raise ValueError(f"unsupported snapshot version {version}")
        off = 28
        kinds = np.frombuffer(raw, dtype="<i1", count=num_nodes, offset=off).astype(np.int64)
        off += num_nodes
        rec = np.frombuffer(raw, dtype=EDGE_DTYPE, count=num_edges, offset=off)
        g = cls(num_nodes, kinds)
        for name in ("src", "dst"):
            setattr(g, name, rec[name].astype(np.int64))
        for name in ("t", "value", "gas", "value_z", "gas_z"):
            setattr(g, name, rec[name].astype(np.float64))
        g.tx_type = rec["tx_type"].astype(np.int64)
        g.token_type = rec["token_type"].astype(np.int64)
        side_path = path.with_suffix(".json")
        meta = json.loads(side_path.read_text()) if side_path.exists() else {}
        g.tx_hashes = list(meta.get("tx_hashes", [""] * num_edges))
        g._index()
        return g, meta


def _columns(txs):
    return {
        "src": np.array([tx.src for tx in txs], dtype=np.int64),
        "dst": np.array([tx.dst for tx in txs], dtype=np.int64),
        "t": np.array([tx.t for tx in txs], dtype=np.float64),
        "value": np.array([tx.value for tx in txs], dtype=np.float64),
        "gas": np.array([tx.gas for tx in txs], dtype=np.float64),
        "value_z": np.array([tx.value_z for tx in txs], dtype=np.float64),
        "gas_z": np.array([tx.gas_z for tx in txs], dtype=np.float64),
        "tx_type": np.array([tx.tx_type_id for tx in txs], dtype=np.int64),
        "token_type": np.array([tx.token_type_id for tx in txs], dtype=np.int64),
    }


def build(txs, kinds=None, num_nodes=None):
    """Build a graph from time-sorted transactions.

    ``kinds`` is the node-kind table (registry order); the node count is the
    larger of its length, ``num_nodes`` and the largest id seen plus one.
    """
    cols = _columns(txs)
    if len(txs) and np.any(np.diff(cols["t"]) < 0):
        raise UnsortedInput("transactions must be sorted by time")
    n = 0 if kinds is None else len(kinds)
    if num_nodes is not None:
        n = max(n, int(num_nodes))
    if len(txs):
        n = max(n, int(cols["src"].max()) + 1, int(cols["dst"].max()) + 1)
        if min(cols["src"].min(), cols["dst"].min()) < 0:
            raise NodeOutOfRange("negative node id")
    g = Htamg(n, kinds)
    g._append(cols, [tx.tx_hash for tx in txs])
    g._index()
    return g


def extend(g, new_txs, kinds=None):
    """Append a time-ordered batch; returns a new graph, ``g`` is left untouched."""
    if not new_txs:
        out = g.copy()
        if kinds is not None:
            _merge_kinds(out, kinds)
        return out
    cols = _columns(new_txs)
    if np.any(np.diff(cols["t"]) < 0):
        raise UnsortedInput("new transactions must be sorted by time")
    if cols["t"][0] < g.max_time:
        raise TimeRegression(f"edge at t={cols['t'][0]} predates latest stored edge t={g.max_time}")
    n = max(g.num_nodes, int(cols["src"].max()) + 1, int(cols["dst"].max()) + 1)
    out = g.copy()
    if n > out.num_nodes:
        extra = np.full(n - out.num_nodes, int(AccountKind.Unknown), dtype=np.int64)
        out.node_kind = np.concatenate([out.node_kind, extra])
        if out.node_features is not None:
            pad = np.zeros((n - out.num_nodes, out.node_features.shape[1]))
            out.node_features = np.vstack([out.node_features, pad])
        out.num_nodes = n
    if kinds is not None:
        _merge_kinds(out, kinds)
    out._append(cols, [tx.tx_hash for tx in new_txs])
    out._index()
    return out


def _merge_kinds(g, kinds):
    kinds = np.asarray(kinds, dtype=np.int64)
    if len(kinds) > g.num_nodes:
        extra = np.full(len(kinds) - g.num_nodes, int(AccountKind.Unknown), dtype=np.int64)
        g.node_kind = np.concatenate([g.node_kind, extra])
        if g.node_features is not None:
            g.node_features = np.vstack([g.node_features,
                                         np.zeros((len(extra), g.node_features.shape[1]))])
        g.num_nodes = len(kinds)
        g._index()
    m = len(kinds)
    known = kinds != int(AccountKind.Unknown)
    g.node_kind[:m] = np.where(known, kinds, g.node_kind[:m])
