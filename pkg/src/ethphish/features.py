"""Per-account transactional-activity (T1-T9) and network-structure (N1-N9) features.

Degree and value features count every transaction (multi-edges count
multiply). Square clustering, eccentricity and path counts work on the
undirected simple projection: multi-edges collapsed, direction and
self-loops dropped.
"""

import csv
import json
import warnings
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import shortest_path

from .errors import TooFewNodes, ShapeMismatch
from .ingest import TxCategory, AccountKind

FEATURE_NAMES = (
    "aid", "aod", "atd", "ivf", "ovf", "tve", "dtd", "cir", "pntd",
    "ncd", "ic", "oc", "dc", "andc", "pr", "scc", "mnr", "utp",
)
TABLE_COLUMNS = FEATURE_NAMES + ("kind_code",)

CONTRACT_TX_TYPES = (int(TxCategory.ContractInteraction), int(TxCategory.InternalTx))


@dataclass
class FeatureConfig:
    pagerank_damping: float = 0.85
    pagerank_tol: float = 1e-10
    pagerank_max_iter: int = 200
    utp_depth_cap: int = 3
    dtd_min_span: float = 1.0

    def __post_init__(self):
        if not 0 < self.pagerank_damping < 1:
            raise ValueError("pagerank_damping must be in (0, 1)")
        if self.pagerank_tol <= 0 or self.pagerank_max_iter < 1:
            raise ValueError("pagerank tolerance/iterations must be positive")
        if self.utp_depth_cap < 2:
            raise ValueError("utp_depth_cap must be >= 2")
        if self.dtd_min_span <= 0:
            raise ValueError("dtd_min_span must be positive")


def simple_adjacency(g):
    """Undirected simple projection as a symmetric 0/1 CSR matrix without diagonal."""
    n = g.num_nodes
    keep = g.src != g.dst
    rows = np.concatenate([g.src[keep], g.dst[keep]])
    cols = np.concatenate([g.dst[keep], g.src[keep]])
    a = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    a.sum_duplicates()
    a.data[:] = 1.0
    return a


def _neighbor_lists(a):
    return [a.indices[a.indptr[v]:a.indptr[v + 1]] for v in range(a.shape[0])]


def degree_value_features(g):
    n = g.num_nodes
    aid = np.bincount(g.dst, minlength=n).astype(float)
    aod = np.bincount(g.src, minlength=n).astype(float)
    ivf = np.bincount(g.dst, weights=g.value, minlength=n).astype(float)
    ovf = np.bincount(g.src, weights=g.value, minlength=n).astype(float)
    return {"aid": aid, "aod": aod, "atd": aid + aod,
            "ivf": ivf, "ovf": ovf, "tve": ivf + ovf}


def dtd(g, cfg=None):
    cfg = cfg or FeatureConfig()
    n = g.num_nodes
    deg = (np.bincount(g.dst, minlength=n) + np.bincount(g.src, minlength=n)).astype(float)
    first = np.full(n, np.inf)
    last = np.full(n, -np.inf)
    for ends in (g.src, g.dst):
        np.minimum.at(first, ends, g.t)
        np.maximum.at(last, ends, g.t)
    span = np.where(deg > 0, last - first, 0.0)
    span = np.maximum(span, cfg.dtd_min_span)
    return np.where(deg > 0, deg / span, 0.0)


def cir_pntd(g, a=None):
    n = g.num_nodes
    kinds = g.node_kind
    contract_type = np.isin(g.tx_type, CONTRACT_TX_TYPES)
    # one incidence per (edge, endpoint role); a self-loop counts for both roles
    hits = np.zeros(n)
    src_hit = contract_type | (kinds[g.dst] == int(AccountKind.CA))
    dst_hit = contract_type | (kinds[g.src] == int(AccountKind.CA))
    np.add.at(hits, g.src, src_hit.astype(float))
    np.add.at(hits, g.dst, dst_hit.astype(float))
    atd = (np.bincount(g.src, minlength=n) + np.bincount(g.dst, minlength=n)).astype(float)
    cir = np.divide(hits, atd, out=np.zeros(n), where=atd > 0)

    a = simple_adjacency(g) if a is None else a
    pntd = np.zeros(n)
    for v, nb in enumerate(_neighbor_lists(a)):
        if len(nb):
            pntd[v] = atd[nb].max()
    return cir, pntd


def centrality_features(g, a=None):
    n = g.num_nodes
    if n < 2:
        raise TooFewNodes("centrality needs at least two nodes")
    a = simple_adjacency(g) if a is None else a
    aid = np.bincount(g.dst, minlength=n).astype(float)
    aod = np.bincount(g.src, minlength=n).astype(float)
    ncd = np.diff(a.indptr).astype(float)
    ic = aid / (n - 1)
    oc = aod / (n - 1)
    dc = ic + oc
    nb_sum = a @ dc
    andc = np.divide(nb_sum, ncd, out=np.zeros(n), where=ncd > 0)
    return {"ncd": ncd, "ic": ic, "oc": oc, "dc": dc, "andc": andc}


def pagerank(g, cfg=None):
    """Power iteration on the multigraph transition matrix.

    Each of ``u``'s outgoing transactions carries ``pr_u / aod_u``; sinks
    spread their mass uniformly. Returns ``(pr, converged)``.
    """
    cfg = cfg or FeatureConfig()
    n = g.num_nodes
    if n == 0:
        return np.zeros(0), True
    d = cfg.pagerank_damping
    aod = np.bincount(g.src, minlength=n).astype(float)
    w = np.zeros(g.num_edges) if g.num_edges == 0 else 1.0 / aod[g.src]
    trans = sp.csr_matrix((w, (g.dst, g.src)), shape=(n, n))
    dangling = aod == 0
    pr = np.full(n, 1.0 / n)
    converged = False
    for _ in range(cfg.pagerank_max_iter):
        new = (1 - d) / n + d * (trans @ pr + pr[dangling].sum() / n)
        new /= new.sum()
        delta = np.abs(new - pr).sum()
        pr = new
        if delta < cfg.pagerank_tol:
            converged = True
            break
    if not converged:
        warnings.warn(f"pagerank did not converge in {cfg.pagerank_max_iter} iterations")
    return pr, converged


def scc(g, a=None):
    """Square clustering coefficient on the simple projection."""
    n = g.num_nodes
    a = simple_adjacency(g) if a is None else a
    deg = np.diff(a.indptr).astype(float)
    common = (a @ a).tocsr()
    out = np.zeros(n)
    for v, nb in enumerate(_neighbor_lists(a)):
        k = len(nb)
        if k < 2:
            continue
        q = common[nb][:, nb].toarray() - 1.0  # v itself is always a common neighbor
        theta = a[nb][:, nb].toarray()
        iu, ju = np.triu_indices(k, 1)
        qp = q[iu, ju]
        degm = qp + 1.0 + theta[iu, ju]
        potential = (deg[nb][iu] - degm) + (deg[nb][ju] - degm) + qp
        total = potential.sum()
        if total > 0:
            out[v] = qp.sum() / total
    return out


def mnr(g, a=None, chunk=256):
    """Eccentricity within the node's connected component (0 for isolated nodes)."""
    n = g.num_nodes
    a = simple_adjacency(g) if a is None else a
    out = np.zeros(n)
    for lo in range(0, n, chunk):
        idx = np.arange(lo, min(n, lo + chunk))
        dist = shortest_path(a, directed=False, unweighted=True, indices=idx)
        dist[~np.isfinite(dist)] = 0.0
        out[idx] = dist.max(axis=1)
    return out


def utp(g, cfg=None, a=None):
    """Simple paths of 2..cap hops from each node that end outside its closed neighborhood."""
    cfg = cfg or FeatureConfig()
    a = simple_adjacency(g) if a is None else a
    cap = cfg.utp_depth_cap
    if cap > 3:
        return _utp_dfs(a, cap)
    deg = np.diff(a.indptr).astype(float)
    a2 = (a @ a).tocsr()
    diag = a2.diagonal()
    rows = lambda m: np.asarray(m.sum(axis=1)).ravel()
    a2_on_edges = rows(a2.multiply(a))
    # two hops: v-a-b with b not in N[v]
    total = rows(a2) - a2_on_edges - diag
    if cap >= 3:
        # three hops: v-a-b-c, c not in N[v]; the b == v term vanishes
        total = total + (a2 @ deg) - rows(a2.multiply(a2)) - a2_on_edges
    return total


def _utp_dfs(a, cap):
    nbrs = [set(x.tolist()) for x in _neighbor_lists(a)]
    out = np.zeros(a.shape[0])
    for v in range(a.shape[0]):
        closed = nbrs[v] | {v}
        count = 0
        stack = [(v, 0, (v,))]
        while stack:
            node, depth, path = stack.pop()
            if depth >= 2 and node not in closed:
                count += 1
            if depth == cap:
                continue
            for w in nbrs[node]:
                if w not in path:
                    stack.append((w, depth + 1, path + (w,)))
        out[v] = count
    return out


def compute_all(g, cfg=None):
    """All 18 features as a dict keyed by ``FEATURE_NAMES``; ``pr_converged`` flag attached."""
    cfg = cfg or FeatureConfig()
    a = simple_adjacency(g)
    feats = degree_value_features(g)
    feats["dtd"] = dtd(g, cfg)
    feats["cir"], feats["pntd"] = cir_pntd(g, a)
    if g.num_nodes >= 2:
        feats.update(centrality_features(g, a))
    else:
        feats.update({k: np.zeros(g.num_nodes) for k in ("ncd", "ic", "oc", "dc", "andc")})
    feats["pr"], converged = pagerank(g, cfg)
    feats["scc"] = scc(g, a)
    feats["mnr"] = mnr(g, a)
    feats["utp"] = utp(g, cfg, a)
    feats["pr_converged"] = converged
    return feats


@dataclass
class FeatureStats:
    mu: list
    sigma: list
    columns: tuple = FEATURE_NAMES

    def save(self, path):
        Path(path).write_text(json.dumps(
            {"columns": list(self.columns), "mu": list(self.mu), "sigma": list(self.sigma)},
            indent=2))

    @classmethod
    def load(cls, path):
        doc = json.loads(Path(path).read_text())
        return cls(doc["mu"], doc["sigma"], tuple(doc["columns"]))


def assemble(g, feats, stats=None, fit_nodes=None):
    """Stack features in a fixed column order and z-score them.

    Statistics are fitted on ``fit_nodes`` (default: every node) unless
    ``stats`` is given. The trailing ``kind_code`` column is left unscaled.
    The table is attached to ``g`` and returned with the statistics used.
    """
    n = g.num_nodes
    cols = []
    for name in FEATURE_NAMES:
        col = np.asarray(feats[name], dtype=float)
        if col.shape != (n,):
            raise ShapeMismatch(f"feature {name} has shape {col.shape}, expected ({n},)")
        cols.append(col)
    raw = np.stack(cols, axis=1) if n else np.zeros((0, len(FEATURE_NAMES)))
    if stats is None:
        rows = raw if fit_nodes is None else raw[np.asarray(fit_nodes)]
        mu = rows.mean(axis=0) if len(rows) else np.zeros(raw.shape[1])
        sigma = np.maximum(rows.std(axis=0), 1e-12) if len(rows) else np.ones(raw.shape[1])
        stats = FeatureStats(mu.tolist(), sigma.tolist())
    mu, sigma = np.asarray(stats.mu), np.asarray(stats.sigma)
    table = np.column_stack([(raw - mu) / sigma, g.node_kind.astype(float)])
    g.set_node_features(table)
    return table, stats


def extract(g, cfg=None, stats=None, fit_nodes=None):
    feats = compute_all(g, cfg)
    return assemble(g, feats, stats, fit_nodes)


def export_csv(path, table):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("node_id",) + TABLE_COLUMNS)
        for i, row in enumerate(table):
            w.writerow([i] + [repr(float(x)) for x in row[:-1]] + [int(row[-1])])


def load_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header[1:]) != TABLE_COLUMNS:
            raise ShapeMismatch(f"unexpected feature header in {path}")
        rows = [[float(x) for x in r[1:]] for r in reader]
    return np.asarray(rows, dtype=float).reshape(-1, len(TABLE_COLUMNS))


def config_dict(cfg):
    return asdict(cfg)
