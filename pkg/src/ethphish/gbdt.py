"""Gradient-boosted decision trees for binary classification.

Logistic loss, Newton leaf values with L2 smoothing, leaf-wise (best-first)
growth capped at ``num_leaves``, exact greedy splits over sorted values and a
per-tree random column subset.
"""

import json
from dataclasses import dataclass, asdict, field

import numpy as np

from .errors import SingleClassError, ShapeError


@dataclass
class GbdtConfig:
    num_leaves: int = 127
    learning_rate: float = 0.08
    feature_fraction: float = 0.9
    num_rounds: int = 200
    min_samples_leaf: int = 5
    l2: float = 1.0
    early_stopping: int = 20
    max_bins: int = 0             # 0 = exact greedy; >0 = histogram split search
    seed: int = 0

    def __post_init__(self):
        if self.max_bins < 0 or self.max_bins == 1:
            raise ValueError("max_bins must be 0 (exact) or >= 2")
        if self.num_leaves < 2:
            raise ValueError("num_leaves must be >= 2")
        if not 0.0 < self.feature_fraction <= 1.0:
            raise ValueError("feature_fraction must lie in (0, 1]")
        if self.learning_rate <= 0 or self.num_rounds < 0 or self.min_samples_leaf < 1:
            raise ValueError("bad learning_rate / num_rounds / min_samples_leaf")


def node_config(**kw):
    return GbdtConfig(**{"num_leaves": 127, **kw})


def edge_config(**kw):
    return GbdtConfig(**{"num_leaves": 63, **kw})


@dataclass
class Tree:
    feature: np.ndarray     # -1 marks a leaf
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def num_leaves(self):
        return int(np.sum(self.feature < 0))

    def predict(self, X):
        node = np.zeros(len(X), dtype=np.int64)
        active = self.feature[node] >= 0
        while active.any():
            idx = np.nonzero(active)[0]
            nd = node[idx]
            go_left = X[idx, self.feature[nd]] <= self.threshold[nd]
            node[idx] = np.where(go_left, self.left[nd], self.right[nd])
            active = self.feature[node] >= 0
        return self.value[node]

    def to_dict(self):
        return {k: getattr(self, k).tolist() for k in ("feature", "threshold", "left", "right", "value")}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["feature"], dtype=np.int64), np.asarray(d["threshold"], dtype=float),
                   np.asarray(d["left"], dtype=np.int64), np.asarray(d["right"], dtype=np.int64),
                   np.asarray(d["value"], dtype=float))


@dataclass
class Prediction:
    logits: tuple
    label: int
    score: float


@dataclass
class GbdtModel:
    trees: list
    init_score: float
    num_features: int
    config: GbdtConfig
    train_loss: list = field(default_factory=list)

    def margin(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.num_features:
            raise ShapeError(f"expected {self.num_features} columns, got shape {X.shape}")
        out = np.full(len(X), self.init_score)
        for t in self.trees:
            out += t.predict(X)
        return out

    def to_json(self):
        return json.dumps({"format": "ethphish-gbdt", "version": 1, "init_score": self.init_score,
                           "num_features": self.num_features, "config": asdict(self.config),
                           "trees": [t.to_dict() for t in self.trees]}, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls([Tree.from_dict(t) for t in d["trees"]], d["init_score"], d["num_features"],
                   GbdtConfig(**d["config"]))


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def logistic_loss(y, margin):
    # log(1 + e^m) - y m, written stably
    return float(np.mean(np.logaddexp(0.0, margin) - y * margin))


def _best_split(X, g, h, rows, feats, cfg):
    """Best (gain, feature, threshold) for the samples ``rows``."""
    n = len(rows)
    msl = cfg.min_samples_leaf
    if n < 2 * msl:
        return None
    sub = X[np.ix_(rows, feats)]
    order = np.argsort(sub, axis=0, kind="stable")
    xs = np.take_along_axis(sub, order, axis=0)
    gs = np.cumsum(g[rows][order], axis=0)
    hs = np.cumsum(h[rows][order], axis=0)
    G, H = gs[-1], hs[-1]
    gl, hl = gs[:-1], hs[:-1]
    gr, hr = G - gl, H - hl
    lam = cfg.l2
    gain = 0.5 * (gl ** 2 / (hl + lam) + gr ** 2 / (hr + lam) - G ** 2 / (H + lam))
    valid = xs[1:] > xs[:-1]
    count_left = np.arange(1, n)[:, None]
    valid &= (count_left >= msl) & (n - count_left >= msl)
    gain = np.where(valid, gain, -np.inf)
    flat = int(np.argmax(gain))
    i, j = divmod(flat, len(feats))
    best = gain[i, j]
    if not np.isfinite(best) or best <= 1e-12:
        return None
    thr = 0.5 * (xs[i, j] + xs[i + 1, j])
    if not thr < xs[i + 1, j]:   # midpoint rounding onto the upper value
        thr = xs[i, j]
    return float(best), int(feats[j]), float(thr)


class _Binned:
    """Per-column quantile bins. Columns with at most ``max_bins`` distinct
    values get one bin per value, which makes the search exact for them."""

    def __init__(self, X, max_bins):
        n, F = X.shape
        self.codes = np.zeros((n, F), dtype=np.int64)
        self.lo, self.hi = [], []     # smallest / largest training value per bin
        self.nb = np.zeros(F, dtype=np.int64)
        for f in range(F):
            u = np.unique(X[:, f])
            if len(u) <= max_bins:
                edges = u[1:]
            else:
                q = np.quantile(X[:, f], np.linspace(0, 1, max_bins + 1)[1:-1], method="inverted_cdf")
                edges = np.unique(q)
                edges = edges[edges > u[0]]
            code = np.searchsorted(edges, X[:, f], side="right")
            self.codes[:, f] = code
            nb = len(edges) + 1
            self.nb[f] = nb
            lo = np.full(nb, np.inf)
            hi = np.full(nb, -np.inf)
            np.minimum.at(lo, code, X[:, f])
            np.maximum.at(hi, code, X[:, f])
            self.lo.append(lo)
            self.hi.append(hi)
        self.width = int(self.nb.max()) if F else 1

    def histogram(self, g, h, rows, feats):
        W = self.width
        idx = (self.codes[np.ix_(rows, feats)] + np.arange(len(feats)) * W).ravel()
        size = len(feats) * W
        hg = np.bincount(idx, np.repeat(g[rows], len(feats)), size).reshape(len(feats), W)
        hh = np.bincount(idx, np.repeat(h[rows], len(feats)), size).reshape(len(feats), W)
        hc = np.bincount(idx, None, size).reshape(len(feats), W)
        return hg, hh, hc

    def best_split(self, hist, feats, cfg):
        hg, hh, hc = hist
        gs, hs, cs = np.cumsum(hg, 1), np.cumsum(hh, 1), np.cumsum(hc, 1)
        G, H, C = gs[:, -1:], hs[:, -1:], cs[:, -1:]
        lam, msl = cfg.l2, cfg.min_samples_leaf
        gl, hl, cl = gs[:, :-1], hs[:, :-1], cs[:, :-1]
        gain = 0.5 * (gl ** 2 / (hl + lam) + (G - gl) ** 2 / (H - hl + lam) - G ** 2 / (H + lam))
        valid = (cl >= msl) & (C - cl >= msl) & (hc[:, :-1] > 0)
        valid &= np.arange(self.width - 1)[None, :] < (self.nb[feats] - 1)[:, None]
        gain = np.where(valid, gain, -np.inf)
        if gain.size == 0:
            return None
        j, b = divmod(int(np.argmax(gain)), gain.shape[1])
        best = gain[j, b]
        if not np.isfinite(best) or best <= 1e-12:
            return None
        f = int(feats[j])
        lo_next = self.lo[f][b + 1:]
        upper = lo_next[np.isfinite(lo_next)][0]
        lower = self.hi[f][b]
        thr = 0.5 * (lower + upper)
        if not thr < upper:
            thr = lower
        return float(best), f, float(thr)


def _grow_tree_hist(X, binned, g, h, feats, cfg):
    feature, threshold, left, right, value = [-1], [0.0], [-1], [-1], [0.0]
    all_rows = np.arange(len(X))
    rows_of = {0: all_rows}
    hists = {0: binned.histogram(g, h, all_rows, feats)}
    value[0] = _leaf_value(g, h, all_rows, cfg)
    cand = {}
    s = binned.best_split(hists[0], feats, cfg)
    if s is not None:
        cand[0] = s
    leaves = 1
    while leaves < cfg.num_leaves and cand:
        nid = max(cand, key=lambda k: (cand[k][0], -k))
        gain, f, thr = cand.pop(nid)
        rows = rows_of.pop(nid)
        parent = hists.pop(nid)
        go = X[rows, f] <= thr
        parts = (rows[go], rows[~go])
        small = 0 if len(parts[0]) <= len(parts[1]) else 1
        hs = binned.histogram(g, h, parts[small], feats)
        other = tuple(p - q for p, q in zip(parent, hs))
        kid_hist = (hs, other) if small == 0 else (other, hs)
        kids = []
        for part, hist in zip(parts, kid_hist):
            kid = len(feature)
            feature.append(-1)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
            value.append(_leaf_value(g, h, part, cfg))
            rows_of[kid] = part
            hists[kid] = hist
            kids.append(kid)
        feature[nid], threshold[nid] = f, thr
        left[nid], right[nid] = kids
        value[nid] = 0.0
        leaves += 1
        for kid in kids:
            s = binned.best_split(hists[kid], feats, cfg)
            if s is not None:
                cand[kid] = s
    return Tree(np.asarray(feature, dtype=np.int64), np.asarray(threshold),
                np.asarray(left, dtype=np.int64), np.asarray(right, dtype=np.int64),
                np.asarray(value))


def _leaf_value(g, h, rows, cfg):
    return -cfg.learning_rate * g[rows].sum() / (h[rows].sum() + cfg.l2)


def _grow_tree(X, g, h, feats, cfg):
    feature, threshold, left, right, value = [-1], [0.0], [-1], [-1], [0.0]
    all_rows = np.arange(len(X))
    rows_of = {0: all_rows}
    value[0] = _leaf_value(g, h, all_rows, cfg)
    cand = {}
    s = _best_split(X, g, h, all_rows, feats, cfg)
    if s is not None:
        cand[0] = s
    leaves = 1
    while leaves < cfg.num_leaves and cand:
        # best-first: expand the leaf with the largest gain (ties -> lowest id)
        nid = max(cand, key=lambda k: (cand[k][0], -k))
        gain, f, thr = cand.pop(nid)
        rows = rows_of.pop(nid)
        go = X[rows, f] <= thr
        kids = []
        for part in (rows[go], rows[~go]):
            kid = len(feature)
            feature.append(-1)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
            value.append(_leaf_value(g, h, part, cfg))
            rows_of[kid] = part
            kids.append(kid)
        feature[nid], threshold[nid] = f, thr
        left[nid], right[nid] = kids
        value[nid] = 0.0
        leaves += 1
        for kid in kids:
            s = _best_split(X, g, h, rows_of[kid], feats, cfg)
            if s is not None:
                cand[kid] = s
    return Tree(np.asarray(feature, dtype=np.int64), np.asarray(threshold),
                np.asarray(left, dtype=np.int64), np.asarray(right, dtype=np.int64),
                np.asarray(value))


def fit(X, y, cfg=None, eval_set=None):
    """Boosted logistic ensemble. ``eval_set=(Xv, yv)`` enables early stopping."""
    cfg = cfg or GbdtConfig()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    if X.ndim != 2 or len(X) != len(y):
        raise ShapeError(f"X {X.shape} and y {y.shape} do not align")
    if len(y) < 2 or np.unique(y).size < 2:
        raise SingleClassError("training labels must contain both classes")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("labels must be 0/1")
    rng = np.random.default_rng(cfg.seed)
    F = X.shape[1]
    k = max(1, int(round(cfg.feature_fraction * F)))
    base = y.mean()
    init = float(np.log(base / (1.0 - base)))
    margin = np.full(len(y), init)
    binned = _Binned(X, cfg.max_bins) if cfg.max_bins else None
    model = GbdtModel([], init, F, cfg, [logistic_loss(y, margin)])
    if eval_set is not None:
        Xv, yv = np.asarray(eval_set[0], dtype=float), np.asarray(eval_set[1], dtype=float)
        mv = np.full(len(yv), init)
        best_loss, best_round = logistic_loss(yv, mv), 0
    for r in range(cfg.num_rounds):
        p = sigmoid(margin)
        g, h = p - y, p * (1.0 - p)
        feats = np.arange(F) if k == F else np.sort(rng.choice(F, size=k, replace=False))
        if binned is None:
            tree = _grow_tree(X, g, h, feats, cfg)
        else:
            tree = _grow_tree_hist(X, binned, g, h, feats, cfg)
        model.trees.append(tree)
        margin = margin + tree.predict(X)
        model.train_loss.append(logistic_loss(y, margin))
        if eval_set is not None:
            mv = mv + tree.predict(Xv)
            lv = logistic_loss(yv, mv)
            if lv < best_loss - 1e-12:
                best_loss, best_round = lv, r + 1
            elif r + 1 - best_round >= cfg.early_stopping:
                break
    if eval_set is not None:
        model.trees = model.trees[:best_round]
        model.train_loss = model.train_loss[:best_round + 1]
    return model


def predict(model, X):
    m = model.margin(X)
    # keep the probability strictly inside (0, 1) even for saturated margins
    s = np.clip(sigmoid(m), np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0))
    return [Prediction((0.0, float(mi)), int(mi > 0), float(si)) for mi, si in zip(m, s)]


def predict_scores(model, X):
    return sigmoid(model.margin(X))
