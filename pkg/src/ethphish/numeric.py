"""Small reverse-mode autodiff over float64 numpy arrays.

Only the operations needed by the temporal encoder, projector and
contrastive loss are provided. Every op returns a new ``Tensor`` that
remembers its parents and a closure computing the vector-Jacobian product;
``Tensor.backward`` walks the graph in reverse topological order.
"""

import base64
import contextlib
import json
import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, NumericalError, GraphError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _check(out, op):
    # a finite sum implies finite entries; the full scan only runs when it is not
    if not np.isfinite(out.sum()) and not np.isfinite(out).all():
        raise NumericalError(f"non-finite values produced by {op}")
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjp = None
        self.name = name

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data)

    def check_finite(self):
        _check(self.data, "check_finite")
        return self

    # -- graph ------------------------------------------------------------

    def backward(self, grad=None):
        if grad is None:
            if self.size != 1:
                raise GraphError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # -- operators ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, vjp, op):
    out = Tensor(_check(data, op))
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


# -- elementwise -------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape),
                            _unbroadcast(-g * ad / (bd * bd), bd.shape)), "div")


def exp(x):
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x):
    x = as_tensor(x)
    xd = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(xd)
    return _make(out, (x,), lambda g: (g / xd,), "log")


def tanh(x):
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(x):
    x = as_tensor(x)
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(x):
    x = as_tensor(x)
    keep = x.data > 0
    return _make(np.where(keep, x.data, 0.0), (x,), lambda g: (g * keep,), "relu")


def cos(x):
    x = as_tensor(x)
    xd = x.data
    return _make(np.cos(xd), (x,), lambda g: (-g * np.sin(xd),), "cos")


def sin(x):
    x = as_tensor(x)
    xd = x.data
    return _make(np.sin(xd), (x,), lambda g: (g * np.cos(xd),), "sin")


def scale(x, c):
    return mul(x, float(c))


# -- reductions / shape ------------------------------------------------------

def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)
    return _make(out, (x,), vjp, "sum")


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    if axis is None:
        count = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[a] for a in axes]))
    if count == 0:
        raise ShapeError("mean over an empty axis")
    return mul(tsum(x, axis, keepdims), 1.0 / count)


def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x, axes=None):
    x = as_tensor(x)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def take(x, idx):
    """Indexing (basic or advanced); gradients scatter-add back."""
    x = as_tensor(x)
    if isinstance(idx, Tensor):
        raise TypeError("index with numpy arrays, not Tensors")
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)
    return _make(x.data[idx], (x,), vjp, "take")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of nothing")
    ax = axis % tensors[0].ndim
    for t in tensors:
        if t.ndim != tensors[0].ndim or any(
                t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != ax):
            raise ShapeError(f"concat shape mismatch: {[t.shape for t in tensors]}")
    sizes = [t.shape[ax] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors,
                 lambda g: tuple(np.split(g, cuts, axis=ax)), "concat")


def slice_cols(x, start, stop):
    return take(x, (Ellipsis, slice(start, stop)))


ROW_BLOCK = 16


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    rows = ad.shape[-2]
    if ad.ndim == 2 and rows % ROW_BLOCK:
        # BLAS handles leftover rows with tail kernels that sum in a different
        # order; zero-padding to whole row blocks keeps every row's result
        # independent of how many rows share the call
        pad = np.zeros((ROW_BLOCK - rows % ROW_BLOCK, ad.shape[1]))
        out = (np.vstack([ad, pad]) @ bd)[:rows]
    else:
        out = ad @ bd

    def vjp(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)
    return _make(out, (a, b), vjp, "matmul")


def where(mask, a, b):
    mask = np.asarray(mask, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(np.where(mask, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(np.where(mask, g, 0.0), sa),
                            _unbroadcast(np.where(mask, 0.0, g), sb)), "where")


def scatter_rows(base, idx, rows):
    """Copy of ``base`` with ``base[idx] = rows`` (``idx`` must be unique)."""
    base, rows = as_tensor(base), as_tensor(rows)
    idx = np.asarray(idx, dtype=np.int64)
    out = base.data.copy()
    out[idx] = rows.data

    def vjp(g):
        gb = g.copy()
        gb[idx] = 0.0
        return gb, g[idx]
    return _make(out, (base, rows), vjp, "scatter_rows")


def index_add(base, idx, rows):
    """Copy of ``base`` with ``rows`` accumulated into ``base[idx]`` (repeats add up)."""
    base, rows = as_tensor(base), as_tensor(rows)
    idx = np.asarray(idx, dtype=np.int64)
    out = base.data.copy()
    np.add.at(out, idx, rows.data)
    return _make(out, (base, rows), lambda g: (g, g[idx]), "index_add")


def segment_mean(x, seg, num_segments):
    """Row-wise mean of ``x`` grouped by integer ``seg`` (empty groups give zeros)."""
    x = as_tensor(x)
    seg = np.asarray(seg, dtype=np.int64)
    counts = np.bincount(seg, minlength=num_segments).astype(float)
    inv = np.divide(1.0, counts, out=np.zeros_like(counts), where=counts > 0)
    out = np.zeros((num_segments,) + x.shape[1:])
    np.add.at(out, seg, x.data)
    bshape = (-1,) + (1,) * (x.ndim - 1)
    out *= inv.reshape(bshape)
    return _make(out, (x,), lambda g: ((g * inv.reshape(bshape))[seg],), "segment_mean")


# -- normalizations ------------------------------------------------------------

def softmax(x, axis=-1, mask=None):
    """Numerically stable softmax; masked-out entries get weight 0 and a fully
    masked slice returns all zeros."""
    x = as_tensor(x)
    xd = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), xd.shape)
        xd = np.where(mask, xd, -np.inf)
    mx = np.max(xd, axis=axis, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    e = np.exp(xd - mx)
    s = e.sum(axis=axis, keepdims=True)
    out = np.divide(e, s, out=np.zeros_like(e), where=s > 0)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)
    return _make(out, (x,), vjp, "softmax")


def logsumexp(x, axis=-1, mask=None, keepdims=False):
    x = as_tensor(x)
    xd = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), xd.shape)
        xd = np.where(mask, xd, -np.inf)
    mx = np.max(xd, axis=axis, keepdims=True)
    if not np.all(np.isfinite(mx)):
        raise NumericalError("logsumexp over an empty (fully masked) slice")
    e = np.exp(xd - mx)
    s = e.sum(axis=axis, keepdims=True)
    out = np.log(s) + mx
    w = e / s

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * w,)
    return _make(out if keepdims else np.squeeze(out, axis=axis), (x,), vjp, "logsumexp")


def l2_normalize(x, axis=-1, eps=1e-12):
    """x / ||x||; rows with norm below ``eps`` map to zero."""
    x = as_tensor(x)
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))
    ok = norm > eps
    inv = np.divide(1.0, norm, out=np.zeros_like(norm), where=ok)
    out = xd * inv

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - out * dot) * inv,)
    return _make(out, (x,), vjp, "l2_normalize")


def cosine_similarity(a, b, axis=-1):
    """Cosine similarity along ``axis``; zero vectors give similarity 0."""
    return tsum(mul(l2_normalize(a, axis), l2_normalize(b, axis)), axis=axis)


# -- parameters & optimization -------------------------------------------------

class ParamStore:
    """Named learnable tensors plus the seeded RNG used to initialize them."""

    def __init__(self, seed=0):
        self.seed = int(seed)
        self.rng = np.random.default_rng(self.seed)
        self.params = OrderedDict()

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params.items())

    def __len__(self):
        return len(self.params)

    def add(self, name, shape, fan_in=None, init="uniform", value=None):
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        shape = tuple(int(s) for s in shape)
        if value is not None:
            data = np.broadcast_to(np.asarray(value, dtype=float), shape).copy()
        elif init == "zeros":
            data = np.zeros(shape)
        else:
            fan_in = max(fan_in if fan_in is not None else shape[0], 1)
            if init == "uniform":
                bound = 1.0 / math.sqrt(fan_in)
            elif init == "glorot":
                fan_out = shape[-1] if len(shape) > 1 else 1
                bound = math.sqrt(6.0 / (fan_in + fan_out))
            elif init == "kaiming":
                bound = math.sqrt(6.0 / fan_in)
            else:
                raise ValueError(f"unknown init {init!r}")
            data = self.rng.uniform(-bound, bound, size=shape)
        t = Tensor(data, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def zero_grad(self):
        for p in self.params.values():
            p.grad = np.zeros_like(p.data)

    def num_parameters(self):
        return sum(p.size for p in self.params.values())

    def state_dict(self):
        return OrderedDict((k, v.data.copy()) for k, v in self.params.items())

    def load_state_dict(self, state):
        for k, v in state.items():
            if k not in self.params:
                raise KeyError(f"unknown parameter {k!r}")
            if self.params[k].shape != np.shape(v):
                raise ShapeError(f"parameter {k}: shape {np.shape(v)} != {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=float)

    def to_checkpoint(self, extra=None):
        doc = {"format": "ethphish-params", "version": 1, "seed": self.seed, "params": {}}
        for k, v in self.params.items():
            doc["params"][k] = {"shape": list(v.shape), "data": encode_array(v.data)}
        doc.update(extra or {})
        return doc

    def load_checkpoint(self, doc):
        if doc.get("format") != "ethphish-params":
            raise ValueError("not a parameter checkpoint")
        self.load_state_dict({k: decode_array(v["data"], v["shape"])
                              for k, v in doc["params"].items()})


def encode_array(a):
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode("ascii")


def decode_array(s, shape):
    return np.frombuffer(base64.b64decode(s), dtype="<f8").reshape(shape).astype(np.float64)


@dataclass
class OptimizerState:
    lr: float = 1e-4
    sign: str = "ascent"
    momentum: float = 0.0
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.sign not in ("ascent", "descent"):
            raise ValueError("sign must be 'ascent' or 'descent'")


def backward(loss, store=None):
    """Populate ``store`` gradients with d(loss)/d(param); unused params get zeros."""
    if loss.size != 1:
        raise GraphError("loss must be a scalar")
    if store is not None:
        for p in store.params.values():
            p.grad = None
    loss.backward()
    if store is not None:
        for p in store.params.values():
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
    return store


def sga_step(store, opt):
    """One (stochastic) gradient ascent or descent step; gradients are zeroed."""
    direction = 1.0 if opt.sign == "ascent" else -1.0
    for name, p in store.params.items():
        if p.grad is None:
            continue
        step = p.grad
        if opt.momentum:
            v = opt.velocity.get(name)
            v = step.copy() if v is None else opt.momentum * v + step
            opt.velocity[name] = v
            step = v
        p.data = p.data + direction * opt.lr * step
        p.grad = np.zeros_like(p.data)
    return store


def grad_check(f, point, eps=1e-5):
    """Max relative error between the analytic gradient of scalar ``f`` at
    ``point`` and central differences: |a - n| / max(1, |a|)."""
    x = Tensor(np.array(point.data if isinstance(point, Tensor) else point, dtype=float),
               requires_grad=True)
    out = f(x)
    if out.size != 1:
        raise GraphError("grad_check needs a scalar function")
    out.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad
    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    num_flat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = f(Tensor(x.data)).item()
            flat[i] = orig - eps
            down = f(Tensor(x.data)).item()
            flat[i] = orig
            num_flat[i] = (up - down) / (2 * eps)
    if not (np.all(np.isfinite(analytic)) and np.all(np.isfinite(numeric))):
        raise NumericalError("non-finite gradient in grad_check")
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic)))) \
        if analytic.size else 0.0


def grad_check_params(objective, store, eps=1e-5, names=None):
    """Per-parameter-tensor relative error for a closure ``objective()`` that
    reads its weights from ``store``."""
    backward(objective(), store)
    analytic = {k: p.grad.copy() for k, p in store.params.items()}
    errors = OrderedDict()
    with no_grad():
        for name, p in store.params.items():
            if names is not None and name not in names:
                continue
            flat = p.data.reshape(-1)
            numeric = np.zeros_like(flat)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                up = objective().item()
                flat[i] = orig - eps
                down = objective().item()
                flat[i] = orig
                numeric[i] = (up - down) / (2 * eps)
            a = analytic[name].reshape(-1)
            errors[name] = float(np.max(np.abs(a - numeric) / np.maximum(1.0, np.abs(a))))
    return errors


def dumps_checkpoint(doc):
    return json.dumps(doc, sort_keys=True, indent=1)
