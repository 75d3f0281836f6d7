"""Self-supervised pretraining: perturbed graph views, projection head and the
two-view contrastive objective, maximized by gradient ascent."""

import json
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import numeric as nm
from .numeric import Tensor
from .errors import ShapeError, NumericalError


@dataclass
class ContrastiveConfig:
    tau: float = 1.0
    batch_size: int = 256
    lr: float = 1e-4
    epochs: int = 10
    p: float = 0.2
    momentum: float = 0.0
    seed: int = 0
    track_alignment: bool = True

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("temperature must be positive")
        if not 0.0 <= self.p < 1.0:
            raise ValueError("drop probability must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0 or self.lr <= 0:
            raise ValueError("batch_size >= 1, epochs >= 0 and lr > 0 required")


@dataclass
class View:
    graph: object
    features: np.ndarray
    edge_mask: np.ndarray
    node_mask: np.ndarray


def augment(g, X, p, rng):
    """Two independent views: Bernoulli(1-p) edge retention and feature-row
    zeroing with probability p. ``g`` and ``X`` are left untouched."""
    if not 0.0 <= p < 1.0:
        raise ValueError("drop probability must lie in [0, 1)")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    X = np.asarray(X, dtype=float)
    views = []
    for _ in range(2):
        keep_e = rng.random(g.num_edges) >= p
        keep_v = rng.random(g.num_nodes) >= p
        Xv = X * keep_v[:, None]
        gv = g.subgraph_edges(keep_e)
        gv.node_features = Xv
        views.append(View(gv, Xv, keep_e, keep_v))
    return views[0], views[1]


class ProjectionHead:
    """Two-layer feed-forward projector whose weights live in the model store."""

    def __init__(self, store, dim, out_dim=None, init="glorot"):
        out_dim = out_dim or dim
        self.store = store
        for name, shape, init in (("proj.W1", (dim, dim), init), ("proj.b1", (dim,), "zeros"),
                                  ("proj.W2", (dim, out_dim), init), ("proj.b2", (out_dim,), "zeros")):
            if name not in store:
                store.add(name, shape, fan_in=dim, init=init)

    def __call__(self, z):
        s = self.store
        hid = nm.tanh(nm.matmul(z, s["proj.W1"]) + s["proj.b1"])
        return nm.matmul(hid, s["proj.W2"]) + s["proj.b2"]


def similarity(head, za, zb):
    """Projected cosine similarity per row; zero projections give 0 (with a warning)."""
    with nm.no_grad():
        pa, pb = head(nm.as_tensor(np.atleast_2d(za))), head(nm.as_tensor(np.atleast_2d(zb)))
    na = np.linalg.norm(pa.data, axis=1)
    nb = np.linalg.norm(pb.data, axis=1)
    if np.any(na <= 1e-12) or np.any(nb <= 1e-12):
        warnings.warn("zero-norm projection; similarity set to 0")
    return nm.cosine_similarity(pa, pb).data


def _logits(anchors, positives, tau):
    a = nm.l2_normalize(anchors)
    b = nm.l2_normalize(positives)
    inter = nm.matmul(a, nm.transpose(b)) * (1.0 / tau)
    intra = nm.matmul(a, nm.transpose(a)) * (1.0 / tau)
    return inter, intra


def pairwise_losses(anchors, positives, tau=1.0):
    """Per-anchor objective: log of the positive term over the positive, the
    inter-view negatives and the intra-view negatives."""
    anchors, positives = nm.as_tensor(anchors), nm.as_tensor(positives)
    if anchors.shape != positives.shape or anchors.ndim != 2:
        raise ShapeError(f"view shapes differ: {anchors.shape} vs {positives.shape}")
    N = anchors.shape[0]
    inter, intra = _logits(anchors, positives, tau)
    mask = np.concatenate([np.ones((N, N), bool), ~np.eye(N, dtype=bool)], axis=1)
    denom = nm.logsumexp(nm.concat([inter, intra], axis=1), axis=1, mask=mask)
    pos = nm.take(inter, (np.arange(N), np.arange(N)))
    return pos - denom


def pairwise_loss(anchors, positives, i, tau=1.0):
    return float(pairwise_losses(anchors, positives, tau).data[i])


def batch_loss(p1, p2, tau=1.0):
    """Symmetric average of the per-anchor objective over both views."""
    p1, p2 = nm.as_tensor(p1), nm.as_tensor(p2)
    if p1.shape != p2.shape:
        raise ShapeError(f"view shapes differ: {p1.shape} vs {p2.shape}")
    N = p1.shape[0]
    if N == 0:
        raise ShapeError("empty batch")
    total = nm.tsum(pairwise_losses(p1, p2, tau)) + nm.tsum(pairwise_losses(p2, p1, tau))
    return total * (1.0 / (2 * N))


def stream_batches(g, batch_size):
    """(query time, touched nodes) per chunk of the event stream; queries sit
    just after the chunk's last event so the whole chunk is history."""
    out = []
    for a in range(0, g.num_edges, batch_size):
        b = min(a + batch_size, g.num_edges)
        nodes = np.unique(np.concatenate([g.src[a:b], g.dst[a:b]]))
        out.append((float(np.nextafter(g.t[b - 1], np.inf)), nodes))
    return out


def view_projections(model, head, v1, v2, nodes, t):
    m1, m2 = v1, v2
    z1 = model.embed(m1[0].graph, m1[0].features, nodes, t, m1[1])
    z2 = model.embed(m2[0].graph, m2[0].features, nodes, t, m2[1])
    return head(z1), head(z2)


def evaluate_alignment(g, X, model, head, cfg, seed=None):
    """Mean positive-pair projected cosine similarity over all stream batches,
    on a pair of views fixed by ``seed``."""
    seed = cfg.seed + 7919 if seed is None else seed
    v1, v2 = augment(g, X, cfg.p, np.random.default_rng(seed))
    w1 = (v1, model.memory(v1.graph))
    w2 = (v2, model.memory(v2.graph))
    vals = []
    with nm.no_grad():
        for t, nodes in stream_batches(g, cfg.batch_size):
            p1, p2 = view_projections(model, head, w1, w2, nodes, t)
            vals.append(nm.cosine_similarity(p1, p2).data)
    return float(np.mean(np.concatenate(vals))) if vals else 0.0


@dataclass
class PretrainResult:
    model: object
    head: ProjectionHead
    history: list = field(default_factory=list)
    memory: np.ndarray = None


def pretrain(g, X, model, cfg, log_path=None):
    """Contrastive pretraining. Labels are never an input.

    Each epoch draws fresh views, resets memory, replays the stream in
    batches and ascends the objective on the nodes touched by each batch."""
    X = np.asarray(X if X is not None else g.node_features, dtype=float)
    head = ProjectionHead(model.store, model.cfg.dim, init=model.cfg.init)
    opt = nm.OptimizerState(lr=cfg.lr, sign="ascent", momentum=cfg.momentum)
    rng = np.random.default_rng(cfg.seed)
    history = []
    log = open(log_path, "w") if log_path else None

    def record(entry):
        history.append(entry)
        if log:
            log.write(json.dumps(entry, sort_keys=True) + "\n")
            log.flush()

    try:
        if cfg.track_alignment:
            record({"epoch": 0, "loss": None,
                    "theta": evaluate_alignment(g, X, model, head, cfg), "wall": 0.0})
        batches = stream_batches(g, cfg.batch_size)
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            v1, v2 = augment(g, X, cfg.p, rng)
            w1 = (v1, model.memory(v1.graph))
            w2 = (v2, model.memory(v2.graph))
            losses, thetas = [], []
            for t, nodes in batches:
                p1, p2 = view_projections(model, head, w1, w2, nodes, t)
                loss = batch_loss(p1, p2, cfg.tau)
                if not np.isfinite(loss.item()):
                    raise NumericalError(f"non-finite loss in epoch {epoch}")
                nm.backward(loss, model.store)
                nm.sga_step(model.store, opt)
                losses.append(loss.item())
                thetas.append(float(nm.cosine_similarity(p1.detach(), p2.detach()).data.mean()))
            entry = {"epoch": epoch, "loss": float(np.mean(losses)) if losses else 0.0,
                     "train_theta": float(np.mean(thetas)) if thetas else 0.0,
                     "wall": round(time.perf_counter() - t0, 3)}
            if cfg.track_alignment:
                entry["theta"] = evaluate_alignment(g, X, model, head, cfg)
            record(entry)
    finally:
        if log:
            log.close()
    return PretrainResult(model, head, history, model.memory(g).final())
