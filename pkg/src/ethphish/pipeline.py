"""Evaluation harness: dataset assembly, splits, resampling, metrics,
end-to-end experiments and detection over new nodes/edges."""

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.stats import rankdata

from . import features, gbdt, htamg, ingest
from . import numeric as nm
from .contrastive import ContrastiveConfig, pretrain
from .errors import EmptyClass, InsufficientData, SingleClassError, UnknownTarget
from .phishtgl import ModelConfig, PhishTGL

MODES = ("random_split", "kfold", "chronological_unseen")
METRICS = ("precision", "recall", "fpr", "fnr", "f1", "auc", "bac")


@dataclass
class EvalProtocol:
    mode: str = "kfold"
    train_fraction: float = 0.7
    folds: int = 10
    resample_ratio: float = 0.8
    threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie in (0, 1)")
        if self.folds < 2:
            raise ValueError("folds must be >= 2")
        if not 0.0 < self.resample_ratio <= 1.0:
            raise ValueError("resample_ratio must lie in (0, 1]")


@dataclass
class Dataset:
    graph: htamg.Htamg
    registry: ingest.AddressRegistry
    stats: ingest.NormalizationStats
    node_ids: np.ndarray
    node_y: np.ndarray
    edge_ids: np.ndarray
    edge_y: np.ndarray
    feature_cfg: features.FeatureConfig = field(default_factory=features.FeatureConfig)


def build_dataset(raw_txs, node_labels=None, tx_labels=None, feature_cfg=None, fit_nodes=None):
    """Filter, normalize and index a raw log, attach node features and
    resolve address/tx-hash labels to node/edge ids (unknown keys are ignored)."""
    feature_cfg = feature_cfg or features.FeatureConfig()
    txs, stats, registry = ingest.normalize(ingest.filter_and_categorize(raw_txs))
    g = htamg.build(txs, kinds=registry.kind_array())
    features.extract(g, feature_cfg, fit_nodes=fit_nodes)
    node_ids, node_y = [], []
    for addr, lab in (node_labels or {}).items():
        v = registry.get(addr.lower())
        if v is not None:
            node_ids.append(v)
            node_y.append(int(lab))
    eid_of = {h: i for i, h in enumerate(g.tx_hashes)}
    edge_ids, edge_y = [], []
    for h, lab in (tx_labels or {}).items():
        e = eid_of.get(h)
        if e is not None:
            edge_ids.append(e)
            edge_y.append(int(lab))
    order = np.argsort(node_ids, kind="stable")
    eorder = np.argsort(edge_ids, kind="stable")
    return Dataset(g, registry, stats,
                   np.asarray(node_ids, dtype=np.int64)[order], np.asarray(node_y, dtype=np.int64)[order],
                   np.asarray(edge_ids, dtype=np.int64)[eorder], np.asarray(edge_y, dtype=np.int64)[eorder],
                   feature_cfg)


# -- resampling & splits ---------------------------------------------------------

def resample(idx, y, ratio, task, rng):
    """Rebalance a training set towards minority:majority >= ratio.

    Edge task duplicates random minority records; node task drops random
    majority records. Only whole records are duplicated or removed."""
    idx, y = np.asarray(idx), np.asarray(y)
    if not 0.0 < ratio <= 1.0:
        raise ValueError("ratio must lie in (0, 1]")
    pos, neg = np.nonzero(y == 1)[0], np.nonzero(y == 0)[0]
    if len(pos) == 0 or len(neg) == 0:
        raise EmptyClass("resampling needs both classes in the training set")
    minority, majority = (pos, neg) if len(pos) <= len(neg) else (neg, pos)
    if len(minority) >= ratio * len(majority) - 1e-12:
        return idx, y
    if task == "edge":
        target = math.ceil(ratio * len(majority) - 1e-9)
        extra = rng.choice(minority, size=target - len(minority), replace=True)
        keep = np.concatenate([np.arange(len(y)), np.sort(extra)])
    elif task == "node":
        target = max(1, math.floor(len(minority) / ratio + 1e-9))
        kept_major = np.sort(rng.choice(majority, size=target, replace=False))
        keep = np.sort(np.concatenate([minority, kept_major]))
    else:
        raise ValueError("task must be 'edge' or 'node'")
    return idx[keep], y[keep]


def split(y, protocol, rng=None):
    """Index pairs (train, test) over positions 0..len(y)-1 for the random and
    k-fold protocols (chronological splits live in ``chronological_split``)."""
    y = np.asarray(y)
    n = len(y)
    rng = rng if rng is not None else np.random.default_rng(protocol.seed)
    if n == 0:
        raise InsufficientData("empty dataset")
    if protocol.mode == "random_split":
        if n < 2:
            raise InsufficientData("need at least two items for a split")
        perm = rng.permutation(n)
        cut = min(max(int(round(protocol.train_fraction * n)), 1), n - 1)
        return [(np.sort(perm[:cut]), np.sort(perm[cut:]))]
    if protocol.mode == "kfold":
        if n < protocol.folds:
            raise InsufficientData(f"{n} items cannot fill {protocol.folds} folds")
        fold = np.empty(n, dtype=np.int64)
        offset = 0
        for c in np.unique(y):
            members = rng.permutation(np.nonzero(y == c)[0])
            fold[members] = (np.arange(len(members)) + offset) % protocol.folds
            offset += len(members)
        return [(np.nonzero(fold != k)[0], np.nonzero(fold == k)[0]) for k in range(protocol.folds)]
    raise ValueError(f"split() does not handle mode {protocol.mode!r}")


@dataclass
class ChronoSplit:
    cut_time: float
    train_edges: np.ndarray      # edge ids with t < cut_time
    test_edges: np.ndarray       # later edges between test-era nodes only
    train_nodes: np.ndarray
    test_nodes: np.ndarray


def chronological_split(g, train_fraction=0.7):
    """Earlier events for training, later ones for testing, no shared nodes.

    Test edges touching a node that already appeared before the cut are
    dropped so the two node sets stay disjoint."""
    E = g.num_edges
    if E < 2:
        raise InsufficientData("need at least two events for a chronological split")
    c = min(max(int(math.ceil(train_fraction * E)), 1), E - 1)
    cut_time = float(g.t[c])
    train_edges = np.nonzero(g.t < cut_time)[0]
    if len(train_edges) == 0:
        raise InsufficientData("no events strictly before the cut time")
    seen = np.zeros(g.num_nodes, dtype=bool)
    seen[g.src[train_edges]] = True
    seen[g.dst[train_edges]] = True
    later = np.nonzero(g.t >= cut_time)[0]
    test_edges = later[~seen[g.src[later]] & ~seen[g.dst[later]]]
    active = np.zeros(g.num_nodes, dtype=bool)
    active[g.src] = True
    active[g.dst] = True
    return ChronoSplit(cut_time, train_edges, test_edges,
                       np.nonzero(seen)[0], np.nonzero(active & ~seen)[0])


# -- metrics -----------------------------------------------------------------------

def auc_score(scores, labels):
    """ROC AUC from average ranks (ties count one half)."""
    scores, labels = np.asarray(scores, dtype=float), np.asarray(labels)
    pos = labels == 1
    n1, n0 = int(pos.sum()), int((~pos).sum())
    if n1 == 0 or n0 == 0:
        raise SingleClassError("AUC needs both classes")
    r = rankdata(scores, method="average")
    return float((r[pos].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


def compute_metrics(scores, labels, threshold=0.5):
    scores, labels = np.asarray(scores, dtype=float), np.asarray(labels)
    pred = scores >= threshold
    pos = labels == 1
    tp = int(np.sum(pred & pos))
    fp = int(np.sum(pred & ~pos))
    fn = int(np.sum(~pred & pos))
    tn = int(np.sum(~pred & ~pos))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    tnr = tn / (tn + fp) if tn + fp else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    try:
        auc = auc_score(scores, labels)
    except SingleClassError:
        auc = None
    return {"precision": precision, "recall": recall, "fpr": 1.0 - tnr if tn + fp else 0.0,
            "fnr": 1.0 - recall, "f1": f1, "auc": auc, "bac": (recall + tnr) / 2.0,
            "tp": tp, "fp": fp, "tn": tn, "fn": fn, "n": int(len(labels))}


def summarize(folds):
    mean, std = {}, {}
    for k in METRICS:
        vals = [f[k] for f in folds if f.get(k) is not None]
        mean[k] = float(np.mean(vals)) if vals else None
        std[k] = float(np.std(vals)) if vals else None
    return {"folds": folds, "mean": mean, "std": std}


# -- representations -------------------------------------------------------------------

def last_event_times(g):
    t = np.full(g.num_nodes, -np.inf)
    np.maximum.at(t, g.src, g.t)
    np.maximum.at(t, g.dst, g.t)
    return t


def node_query_times(g, nodes):
    """Each node is embedded just after its own latest event."""
    t = last_event_times(g)[np.asarray(nodes, dtype=np.int64)]
    t = np.where(np.isfinite(t), t, 0.0)
    return np.nextafter(t, np.inf)


def node_representations(model, g, nodes, X=None, concat_features=True, mem=None):
    X = g.node_features if X is None else X
    nodes = np.asarray(nodes, dtype=np.int64)
    with nm.no_grad():
        z = model.embed(g, X, nodes, node_query_times(g, nodes), mem).data
    return np.hstack([z, X[nodes]]) if concat_features else z


def edge_representations(model, g, X=None, mem=None):
    with nm.no_grad():
        return model.edge_representations(g, X, mem).data


# -- experiments ---------------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    node_gbdt: gbdt.GbdtConfig = field(default_factory=gbdt.node_config)
    edge_gbdt: gbdt.GbdtConfig = field(default_factory=gbdt.edge_config)
    protocol: EvalProtocol = field(default_factory=EvalProtocol)
    tasks: tuple = ("node", "edge")
    concat_features: bool = True
    holdout: float = 0.0


def train_encoder(g, X, cfg, log_path=None):
    """Fresh encoder + contrastive pretraining. Takes no labels by design."""
    model = PhishTGL(cfg.model, X.shape[1])
    res = pretrain(g, X, model, cfg.contrastive, log_path=log_path)
    return model, res


def holdout_split(y, fraction, rng):
    """Stratified (fit, holdout) positions; classes too small to share are
    kept entirely on the fit side."""
    y = np.asarray(y)
    hold = []
    for c in np.unique(y):
        members = rng.permutation(np.nonzero(y == c)[0])
        k = int(math.ceil(fraction * len(members))) if len(members) >= 4 else 0
        hold.append(members[:k])
    hold = np.sort(np.concatenate(hold)) if hold else np.zeros(0, dtype=np.int64)
    fit = np.setdiff1d(np.arange(len(y)), hold)
    return fit, hold


def fit_classifier(task, X, y, gcfg, protocol, rng, holdout=0.1):
    """Resample, then boost with early stopping on a holdout drawn before
    resampling (so no duplicated record straddles the two sides)."""
    eval_set = None
    fit_pos = np.arange(len(y))
    if holdout > 0:
        fit_pos, hold = holdout_split(y, holdout, rng)
        if len(hold) and len(np.unique(y[hold])) == 2:
            eval_set = (X[hold], y[hold])
        else:
            fit_pos = np.arange(len(y))
    idx, yy = resample(fit_pos, y[fit_pos], protocol.resample_ratio, task, rng)
    return gbdt.fit(X[idx], yy, gcfg, eval_set=eval_set)


def _fit_eval(task, Xtr, ytr, Xte, yte, gcfg, protocol, rng, holdout=0.1):
    clf = fit_classifier(task, Xtr, ytr, gcfg, protocol, rng, holdout)
    scores = gbdt.predict_scores(clf, Xte)
    return compute_metrics(scores, yte, protocol.threshold), scores


def run_experiment(ds, cfg, log_path=None, return_model=False):
    """Pretrain, embed, fit the classifiers on resampled training folds and
    score held-out items; returns a JSON-serializable report."""
    protocol = cfg.protocol
    rng = np.random.default_rng(protocol.seed)
    g, X = ds.graph, ds.graph.node_features
    report = {"protocol": asdict(protocol), "tasks": {}}
    if protocol.mode == "chronological_unseen":
        cs = chronological_split(g, protocol.train_fraction)
        g_train = g.subgraph_edges(np.isin(np.arange(g.num_edges), cs.train_edges))
        model, res = train_encoder(g_train, X, cfg, log_path)
        mem = model.memory(g)
        if "node" in cfg.tasks:
            tr = np.isin(ds.node_ids, cs.train_nodes)
            te = np.isin(ds.node_ids, cs.test_nodes)
            Z = node_representations(model, g, ds.node_ids, X, cfg.concat_features, mem)
            m, _ = _fit_eval("node", Z[tr], ds.node_y[tr], Z[te], ds.node_y[te],
                             cfg.node_gbdt, protocol, rng, cfg.holdout)
            report["tasks"]["node"] = summarize([m])
        if "edge" in cfg.tasks:
            Ze = edge_representations(model, g, X, mem)[ds.edge_ids]
            tr = np.isin(ds.edge_ids, cs.train_edges)
            te = np.isin(ds.edge_ids, cs.test_edges)
            m, _ = _fit_eval("edge", Ze[tr], ds.edge_y[tr], Ze[te], ds.edge_y[te],
                             cfg.edge_gbdt, protocol, rng, cfg.holdout)
            report["tasks"]["edge"] = summarize([m])
        report["split"] = {"cut_time": cs.cut_time, "train_edges": int(len(cs.train_edges)),
                           "test_edges": int(len(cs.test_edges)),
                           "train_nodes": int(len(cs.train_nodes)), "test_nodes": int(len(cs.test_nodes))}
        return (report, model) if return_model else report
    # transductive protocols: the encoder never sees labels, so one
    # pretraining run over the full graph serves every fold
    model, res = train_encoder(g, X, cfg, log_path)
    mem = model.memory(g)
    if "node" in cfg.tasks:
        Z = node_representations(model, g, ds.node_ids, X, cfg.concat_features, mem)
        folds = []
        for tr, te in split(ds.node_y, protocol, rng):
            m, _ = _fit_eval("node", Z[tr], ds.node_y[tr], Z[te], ds.node_y[te],
                             cfg.node_gbdt, protocol, rng, cfg.holdout)
            folds.append(m)
        report["tasks"]["node"] = summarize(folds)
    if "edge" in cfg.tasks:
        Ze = edge_representations(model, g, X, mem)[ds.edge_ids]
        folds = []
        for tr, te in split(ds.edge_y, protocol, rng):
            m, _ = _fit_eval("edge", Ze[tr], ds.edge_y[tr], Ze[te], ds.edge_y[te],
                             cfg.edge_gbdt, protocol, rng, cfg.holdout)
            folds.append(m)
        report["tasks"]["edge"] = summarize(folds)
    return (report, model) if return_model else report


def report_json(report):
    return json.dumps(report, indent=2, sort_keys=True)


# -- detection -------------------------------------------------------------------------------

def run_detection(ds, model, gbdt_node, gbdt_edge, targets, concat_features=True):
    """Score targets given as ("node", address) or ("edge", tx_hash) pairs;
    output order follows input order."""
    g, X = ds.graph, ds.graph.node_features
    eid_of = {h: i for i, h in enumerate(g.tx_hashes)}
    resolved = []
    for kind, key in targets:
        if kind == "node":
            v = ds.registry.get(str(key).lower())
            if v is None:
                raise UnknownTarget(f"unknown address {key}")
            resolved.append(("node", key, v))
        elif kind == "edge":
            if key not in eid_of:
                raise UnknownTarget(f"unknown transaction {key}")
            resolved.append(("edge", key, eid_of[key]))
        else:
            raise UnknownTarget(f"unknown target kind {kind!r}")
    if not resolved:
        return []
    mem = model.memory(g)
    out = [None] * len(resolved)
    node_pos = [i for i, r in enumerate(resolved) if r[0] == "node"]
    edge_pos = [i for i, r in enumerate(resolved) if r[0] == "edge"]
    if node_pos:
        if gbdt_node is None:
            raise UnknownTarget("no node classifier available")
        Z = node_representations(model, g, [resolved[i][2] for i in node_pos], X, concat_features, mem)
        for i, p in zip(node_pos, gbdt.predict(gbdt_node, Z)):
            out[i] = {"kind": "node", "id": resolved[i][1], "score": p.score, "label": p.label}
    if edge_pos:
        if gbdt_edge is None:
            raise UnknownTarget("no edge classifier available")
        Ze = edge_representations(model, g, X, mem)[[resolved[i][2] for i in edge_pos]]
        for i, p in zip(edge_pos, gbdt.predict(gbdt_edge, Ze)):
            out[i] = {"kind": "edge", "id": resolved[i][1], "score": p.score, "label": p.label}
    return out
