"""Minimal reverse-mode autodiff over numpy arrays.

Only the operations needed by the neural PDP forward pass and the energy
loss are provided. Every op returns a :class:`Node`; when any parent is
recorded on a live :class:`Tape` the new node is appended to it, otherwise
the op is a plain numpy computation carrying no graph.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import expit, log_expit

LOG_FLOOR = 1e-20
POW_LO, POW_HI = 1e-12, 1.0


class Node:
    __slots__ = ("id", "op", "parents", "value", "grad", "tape", "vjp", "name")

    def __init__(self, value, op="constant", parents=(), vjp=None, tape=None, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.op = op
        self.parents = tuple(parents)
        self.vjp = vjp
        self.grad = None
        self.tape = tape
        self.name = name
        self.id = -1
        if tape is not None:
            tape._append(self)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.shape})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: divide(self, o)
    __rtruediv__ = lambda self, o: divide(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __neg__ = lambda self: scale(self, -1.0)


class Tape:
    """Append-only record of nodes in creation (= topological) order."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.params: dict[str, Node] = {}

    def _append(self, node: Node):
        node.id = len(self.nodes)
        self.nodes.append(node)

    def param(self, name: str, value) -> Node:
        node = self.params.get(name)
        if node is None:
            node = Node(value, op="input", tape=self, name=name)
            self.params[name] = node
        return node

    def backward(self, loss: Node) -> dict[str, np.ndarray]:
        return backward(loss)

    def release(self):
        """Drop graph links so the recorded arrays are freed immediately.

        Nodes and tape reference each other; without this a finished tape
        waits for the cyclic garbage collector. Node values stay readable.
        """
        for n in self.nodes:
            n.vjp = None
            n.parents = ()
            n.tape = None
        self.nodes = []
        self.params = {}


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def _tape_of(*nodes: Node):
    for n in nodes:
        if n.tape is not None:
            return n.tape
    return None


def _op(op: str, value, parents, vjp) -> Node:
    tape = _tape_of(*parents)
    if not np.all(np.isfinite(value)):
        raise FloatingPointError(f"non-finite output from {op}")
    if tape is None:
        return Node(value, op=op)
    return Node(value, op=op, parents=parents, vjp=vjp, tape=tape)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str):
    try:
        out = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}") from None
    if out != a.shape and out != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- binary ops ---------------------------------------------------------------

def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_broadcast(a.value, b.value, "add")
    return _op("add", a.value + b.value, (a, b),
               lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_broadcast(a.value, b.value, "sub")
    return _op("add", a.value - b.value, (a, b),
               lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_broadcast(a.value, b.value, "mul")
    av, bv = a.value, b.value
    return _op("multiply", av * bv, (a, b),
               lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)))


def divide(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_broadcast(a.value, b.value, "divide")
    av, bv = a.value, b.value
    if np.any(bv == 0):
        raise ZeroDivisionError("divide by zero")
    out = av / bv
    return _op("scalar-divide", out, (a, b),
               lambda g: (_unbroadcast(g / bv, a.shape), _unbroadcast(-g * out / bv, b.shape)))


def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return _op("matrix-vector", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def affine(terms, bias=None) -> Node:
    """Fused ``sum_i x_i @ W_i + b``; one tape node instead of 2k.

    ``terms`` is a sequence of (x, W) pairs. Keeping the fused form matters
    for memory: the tape then stores one (rows, h) array per layer.
    """
    pairs = [(as_node(x), as_node(w)) for x, w in terms]
    if not pairs:
        raise ValueError("affine needs at least one term")
    rows = pairs[0][0].shape[0]
    out = None
    for x, w in pairs:
        if x.value.ndim != 2 or w.value.ndim != 2 or x.shape[1] != w.shape[0] or x.shape[0] != rows:
            raise ValueError(f"affine: shape mismatch {x.shape} @ {w.shape}")
        out = x.value @ w.value if out is None else out + x.value @ w.value
    parents = [n for pair in pairs for n in pair]
    if bias is not None:
        bias = as_node(bias)
        _check_broadcast(out, bias.value, "affine")
        out = out + bias.value
        parents.append(bias)

    def vjp(g):
        grads = []
        for x, w in pairs:
            grads.append(g @ w.value.T if x.tape is not None else None)
            grads.append(x.value.T @ g if w.tape is not None else None)
        if bias is not None:
            grads.append(_unbroadcast(g, bias.shape))
        return grads

    return _op("matrix-vector", out, tuple(parents), vjp)


# -- unary ops ----------------------------------------------------------------

def scale(a, c: float) -> Node:
    a = as_node(a)
    return _op("multiply", a.value * c, (a,), lambda g: (g * c,))


def mask(a, m: np.ndarray) -> Node:
    """Elementwise product with a constant array (dropout, selection)."""
    a = as_node(a)
    m = np.asarray(m, dtype=np.float64)
    _check_broadcast(a.value, m, "mask")
    return _op("select", a.value * m, (a,), lambda g: (_unbroadcast(g * m, a.shape),))


def sigmoid(a) -> Node:
    a = as_node(a)
    s = _sigmoid(a.value)
    return _op("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def log_sigmoid(a) -> Node:
    a = as_node(a)
    x = a.value
    out = log_expit(x)
    # d/dx log sigmoid(x) = sigmoid(-x) = 1 - exp(out)
    return _op("log-sigmoid", out, (a,), lambda g: (g * -np.expm1(out),))


def tanh(a) -> Node:
    a = as_node(a)
    t = np.tanh(a.value)
    return _op("tanh", t, (a,), lambda g: (g * (1.0 - t * t),))


def exp(a) -> Node:
    a = as_node(a)
    with np.errstate(over="ignore"):
        e = np.exp(a.value)  # overflow is reported by _op as non-finite
    return _op("exp", e, (a,), lambda g: (g * e,))


def log(a) -> Node:
    """Natural log of max(x, 1e-20); zero gradient where the floor is active."""
    a = as_node(a)
    x = a.value
    inside = x > LOG_FLOOR
    xc = np.where(inside, x, LOG_FLOOR)
    return _op("log", np.log(xc), (a,), lambda g: (np.where(inside, g / xc, 0.0),))


def power(a, k: float) -> Node:
    """x**k with x clamped to [1e-12, 1]; zero gradient outside the interior."""
    a = as_node(a)
    x = a.value
    inside = (x > POW_LO) & (x < POW_HI)
    xc = np.clip(x, POW_LO, POW_HI)
    out = xc ** k
    return _op("power", out, (a,), lambda g: (np.where(inside, g * k * xc ** (k - 1.0), 0.0),))


def clamp_min(a, c: float) -> Node:
    a = as_node(a)
    x = a.value
    keep = x > c
    return _op("max-with-constant-clamp", np.where(keep, x, c), (a,), lambda g: (np.where(keep, g, 0.0),))


def total(a) -> Node:
    a = as_node(a)
    shape = a.shape
    return _op("sum-reduce", np.array(a.value.sum()), (a,), lambda g: (np.full(shape, float(g)),))


def segment_sum(a, segments) -> Node:
    """Sum rows of ``a`` into ``segments.num_segments`` groups."""
    a = as_node(a)
    if a.shape[0] != segments.index.size:
        raise ValueError(f"segment_sum: {a.shape[0]} rows vs {segments.index.size} indices")
    idx = segments.index
    return _op("sum-reduce", segments.sum(a.value), (a,), lambda g: (g[idx],))


def gather(a, segments) -> Node:
    """Row ``segments.index[r]`` of ``a`` for every r (inverse of segment_sum)."""
    a = as_node(a)
    if a.shape[0] != segments.num_segments:
        raise ValueError(f"gather: {a.shape[0]} rows vs {segments.num_segments} segments")
    return _op("select", a.value[segments.index], (a,), lambda g: (segments.sum(g),))


def _sigmoid(x):
    return expit(x)


# -- backward -----------------------------------------------------------------

def backward(loss: Node) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every parameter on its tape."""
    if loss.value.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    tape = loss.tape
    if tape is None:
        raise ValueError("loss was not recorded on a tape")
    for n in tape.nodes:
        n.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(tape.nodes[: loss.id + 1]):
        if node.grad is None or node.vjp is None:
            continue
        for parent, g in zip(node.parents, node.vjp(node.grad)):
            if parent.tape is None or g is None:
                continue
            parent.grad = g if parent.grad is None else parent.grad + g
        if node.op != "input":
            # release as we go; the peak is then the forward tape alone
            node.grad = None
    out = {}
    for name, p in tape.params.items():
        out[name] = np.zeros_like(p.value) if p.grad is None else p.grad.reshape(p.shape)
    for n in tape.nodes:
        if n.op != "input":
            n.grad = None
    return out


# -- verification -------------------------------------------------------------

@dataclass
class FiniteDiffReport:
    max_rel_error: float
    coords_checked: int
    coords_total: int
    frac_within_rel: float
    max_abs_error_outside: float
    per_param: dict = field(default_factory=dict)

    def passed(self, rel_tol=1e-3, abs_tol=1e-6, min_frac=0.99) -> bool:
        return self.frac_within_rel >= min_frac and self.max_abs_error_outside < abs_tol


def compare_gradients(loss_fn: Callable[[dict], float], params: dict[str, np.ndarray],
                      grads: dict[str, np.ndarray], step: float = 1e-4,
                      rel_tol: float = 1e-3) -> FiniteDiffReport:
    """Central differences for every coordinate of every parameter."""
    rel_ok = 0
    total_coords = 0
    max_rel = 0.0
    max_abs_out = 0.0
    per = {}
    for name, value in params.items():
        flat = value.reshape(-1)
        g = grads[name].reshape(-1)
        errs = np.empty(flat.size)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            lp = loss_fn(params)
            flat[j] = orig - step
            lm = loss_fn(params)
            flat[j] = orig
            fd = (lp - lm) / (2 * step)
            abs_err = abs(fd - g[j])
            rel = abs_err / max(abs(fd), abs(g[j]), 1e-12)
            if abs(fd) < 1e-12 and abs(g[j]) < 1e-12:
                rel = 0.0
            errs[j] = rel
            if rel < rel_tol:
                rel_ok += 1
            else:
                max_abs_out = max(max_abs_out, abs_err)
            max_rel = max(max_rel, rel)
        total_coords += flat.size
        per[name] = float(errs.max()) if errs.size else 0.0
    return FiniteDiffReport(
        max_rel_error=max_rel,
        coords_checked=total_coords,
        coords_total=sum(v.size for v in params.values()),
        frac_within_rel=rel_ok / max(total_coords, 1),
        max_abs_error_outside=max_abs_out,
        per_param=per,
    )


def finite_diff_check(model, formula, config, step: float = 1e-4) -> FiniteDiffReport:
    """Check autodiff gradients of the discounted loss against central differences.

    ``config`` is a :class:`pdpsat.training.TrainConfig`; dropout is disabled
    for the comparison so both routes see the same function.
    """
    from .formula import build_factor_graph
    from .training import loss_and_grads, loss_value

    graph = build_factor_graph(formula)
    _, grads, _ = loss_and_grads(model, graph, config, seed=config.seed, dropout=False)
    params = model.params

    def fn(_params):
        return loss_value(model, graph, config, seed=config.seed)

    return compare_gradients(fn, params, grads, step=step)
