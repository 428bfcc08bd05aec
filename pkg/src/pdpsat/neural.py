"""Neural PDP: deep-set propagators and predictor, GRU decimators.

Parameters live in a flat ``{name: ndarray}`` dict. A forward pass goes
through :meth:`NeuralPdpModel.bind`, which returns an engine model whose
ops record onto an autodiff tape when one is given (training) and are
plain numpy otherwise (inference).
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import grad as G
from .engine import PdpModel
from .formula import FactorGraph

DEEPSETS = ("psi_var", "psi_clause", "gamma")
GRUS = ("phi_var", "phi_clause")


def _deepset_shapes(prefix: str, h: int, out: int) -> dict:
    return {
        f"{prefix}.inner.w_msg": (h, h), f"{prefix}.inner.w_sign": (1, h), f"{prefix}.inner.b1": (1, h),
        f"{prefix}.inner.w2": (h, h), f"{prefix}.inner.b2": (1, h),
        f"{prefix}.outer.w1": (h, h), f"{prefix}.outer.b1": (1, h),
        f"{prefix}.outer.w2": (h, out), f"{prefix}.outer.b2": (1, out),
    }


def _gru_shapes(prefix: str, h: int) -> dict:
    shapes = {}
    for gate in ("z", "r", "n"):
        shapes[f"{prefix}.w_{gate}"] = (h, h)
        shapes[f"{prefix}.we_{gate}"] = (1, h)
        shapes[f"{prefix}.u_{gate}"] = (h, h)
        shapes[f"{prefix}.b_{gate}"] = (1, h)
    return shapes


def param_shapes(h: int) -> dict[str, tuple[int, int]]:
    shapes = {}
    shapes.update(_deepset_shapes("psi_var", h, h))
    shapes.update(_deepset_shapes("psi_clause", h, h))
    shapes.update(_gru_shapes("phi_var", h))
    shapes.update(_gru_shapes("phi_clause", h))
    shapes.update(_deepset_shapes("gamma", h, 1))
    return shapes


@dataclass
class NeuralPdpModel(PdpModel):
    h: int
    params: dict[str, np.ndarray]
    dropout_rate: float = 0.2

    def __post_init__(self):
        expected = param_shapes(self.h)
        if set(expected) != set(self.params):
            missing = set(expected) ^ set(self.params)
            raise ValueError(f"parameter names do not match h={self.h}: {sorted(missing)[:4]}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ValueError(f"{name}: shape {self.params[name].shape} != {shape}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")

    @property
    def message_dim(self) -> int:
        return self.h

    @property
    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def bind(self, tape: G.Tape | None = None, dropout_rng: np.random.Generator | None = None) -> "NeuralRuntime":
        return NeuralRuntime(self, tape, dropout_rng)

    # inference path: no tape, no dropout
    def propagate_var(self, graph, d):
        return self.bind().propagate_var(graph, d)

    def propagate_clause(self, graph, d):
        return self.bind().propagate_clause(graph, d)

    def decimate_var(self, graph, p, d_prev):
        return self.bind().decimate_var(graph, p, d_prev)

    def decimate_clause(self, graph, p, d_prev):
        return self.bind().decimate_clause(graph, p, d_prev)

    def predict(self, graph, d):
        return self.bind().predict(graph, d)


def init_model(h: int, seed: int = 0, dropout_rate: float = 0.2) -> NeuralPdpModel:
    """Fan-in scaled uniform weights, zero biases."""
    if h < 1:
        raise ValueError("h must be >= 1")
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(h).items():
        leaf = name.rsplit(".", 1)[1]
        if leaf.startswith("b"):
            params[name] = np.zeros(shape)
        else:
            fan_in = h + 1 if leaf in ("w_msg", "w_sign") or leaf.startswith(("w_", "we_")) else shape[0]
            bound = np.sqrt(3.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
    return NeuralPdpModel(h, params, dropout_rate)


class NeuralRuntime(PdpModel):
    """One forward context: parameters resolved once, optional tape and dropout."""

    def __init__(self, model: NeuralPdpModel, tape=None, dropout_rng=None):
        self.model = model
        self.message_dim = model.h
        self.tape = tape
        self.dropout_rng = dropout_rng if model.dropout_rate > 0 else None
        self._cache: dict[str, G.Node] = {}

    def p(self, name: str) -> G.Node:
        node = self._cache.get(name)
        if node is None:
            value = self.model.params[name]
            node = self.tape.param(name, value) if self.tape is not None else G.Node(value)
            self._cache[name] = node
        return node

    def _dropout(self, x: G.Node) -> G.Node:
        if self.dropout_rng is None:
            return x
        rate = self.model.dropout_rate
        keep = (self.dropout_rng.random(x.shape) >= rate) / (1.0 - rate)
        return G.mask(x, keep)

    def _mlp(self, x: G.Node, prefix: str) -> G.Node:
        hidden = G.log_sigmoid(G.affine([(x, self.p(prefix + ".w1"))], self.p(prefix + ".b1")))
        hidden = self._dropout(hidden)
        return G.affine([(hidden, self.p(prefix + ".w2"))], self.p(prefix + ".b2"))

    def _inner(self, msg, signs: np.ndarray, prefix: str) -> G.Node:
        pre = G.affine([(msg, self.p(prefix + ".inner.w_msg")),
                        (G.Node(signs[:, None]), self.p(prefix + ".inner.w_sign"))],
                       self.p(prefix + ".inner.b1"))
        hidden = self._dropout(G.log_sigmoid(pre))
        return G.affine([(hidden, self.p(prefix + ".inner.w2"))], self.p(prefix + ".inner.b2"))

    def _excluding_self(self, graph, d, segments, prefix) -> G.Node:
        elems = self._inner(G.as_node(d), graph.edge_sign, prefix)
        pooled = G.segment_sum(elems, segments)
        rest = G.gather(pooled, segments) - elems
        return self._mlp(rest, prefix + ".outer")

    def propagate_var(self, graph: FactorGraph, d_c2v):
        if graph.num_edges == 0:
            return G.as_node(d_c2v)
        return self._excluding_self(graph, d_c2v, graph.var_segments, "psi_var")

    def propagate_clause(self, graph: FactorGraph, d_v2c):
        if graph.num_edges == 0:
            return G.as_node(d_v2c)
        return self._excluding_self(graph, d_v2c, graph.clause_segments, "psi_clause")

    def _gru(self, prefix: str, inp, signs: np.ndarray, hidden) -> G.Node:
        inp, hidden = G.as_node(inp), G.as_node(hidden)
        e = G.Node(signs[:, None])

        def lin(gate, h_in):
            return G.affine([(inp, self.p(f"{prefix}.w_{gate}")), (e, self.p(f"{prefix}.we_{gate}")),
                             (h_in, self.p(f"{prefix}.u_{gate}"))], self.p(f"{prefix}.b_{gate}"))

        z = G.sigmoid(lin("z", hidden))
        r = G.sigmoid(lin("r", hidden))
        cand = G.tanh(lin("n", r * hidden))
        return hidden + z * (cand - hidden)

    def decimate_var(self, graph, p, d_prev):
        if graph.num_edges == 0:
            return G.as_node(d_prev)
        return self._gru("phi_var", p, graph.edge_sign, d_prev)

    def decimate_clause(self, graph, p, d_prev):
        if graph.num_edges == 0:
            return G.as_node(d_prev)
        return self._gru("phi_clause", p, graph.edge_sign, d_prev)

    def predict(self, graph: FactorGraph, d_c2v):
        if graph.num_edges:
            elems = self._inner(G.as_node(d_c2v), graph.edge_sign, "gamma")
            pooled = G.segment_sum(elems, graph.var_segments)
        else:
            pooled = G.Node(np.zeros((graph.num_variables, self.model.h)))
        return G.sigmoid(self._mlp(pooled, "gamma.outer"))


# -- standalone set / cell functions -----------------------------------------

def deepset_forward(model: NeuralPdpModel, prefix: str, messages: np.ndarray, signs: np.ndarray) -> np.ndarray:
    """outer(sum_k inner([m_k ; e_k])) for one set of (message, sign) elements."""
    messages = np.asarray(messages, dtype=float).reshape(-1, model.h)
    signs = np.asarray(signs, dtype=float).reshape(-1)
    if messages.shape[0] != signs.size:
        raise ValueError("one sign per element required")
    rt = model.bind()
    if messages.shape[0]:
        pooled = G.Node(rt._inner(G.Node(messages), signs, prefix).value.sum(axis=0, keepdims=True))
    else:
        pooled = G.Node(np.zeros((1, model.h)))
    return rt._mlp(pooled, prefix + ".outer").value[0]


def predict_variable(model: NeuralPdpModel, messages: np.ndarray, signs: np.ndarray) -> float:
    out = deepset_forward(model, "gamma", messages, signs)
    return float(G.sigmoid(out).value[0])


def gru_forward(model: NeuralPdpModel, prefix: str, inp: np.ndarray, sign: float, hidden: np.ndarray) -> np.ndarray:
    inp = np.asarray(inp, dtype=float).reshape(1, model.h)
    hidden = np.asarray(hidden, dtype=float).reshape(1, model.h)
    return model.bind()._gru(prefix, inp, np.array([float(sign)]), hidden).value[0]


# -- checkpoints ---------------------------------------------------------------

MAGIC = b"PDPSATCK"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: NeuralPdpModel, path, metadata: dict | None = None,
                    extra: dict[str, np.ndarray] | None = None) -> None:
    """Write the versioned binary checkpoint (layout in docs/checkpoint_format.md)."""
    meta = dict(metadata or {})
    meta["dropout_rate"] = model.dropout_rate
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    sections = list(model.params.items()) + sorted((extra or {}).items())
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<IIII", FORMAT_VERSION, model.h, len(sections), len(meta_bytes))
    buf += meta_bytes
    for name, arr in sections:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        nb = name.encode("utf-8")
        buf += struct.pack("<H", len(nb)) + nb
        buf += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.tobytes()
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(bytes(buf))
    tmp.replace(path)


def read_checkpoint(path, expected_h: int | None = None) -> tuple[int, dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if len(data) < 24 or data[:8] != MAGIC:
        raise CheckpointError("not a PDP checkpoint (bad magic)")
    version, h, n_sections, meta_len = struct.unpack_from("<IIII", data, 8)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if expected_h is not None and h != expected_h:
        raise CheckpointError(f"checkpoint has h={h}, expected {expected_h}")
    off = 24
    try:
        meta = json.loads(data[off:off + meta_len].decode("utf-8"))
        off += meta_len
        sections = {}
        for _ in range(n_sections):
            (nlen,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<B", data, off)
            off += 1
            dims = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            count = int(np.prod(dims)) if ndim else 1
            nbytes = 8 * count
            if off + nbytes > len(data):
                raise CheckpointError("truncated checkpoint")
            sections[name] = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(dims).copy()
            off += nbytes
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from None
    if off != len(data):
        raise CheckpointError("trailing bytes after last section")
    return h, meta, sections


def load_checkpoint(path, expected_h: int | None = None) -> NeuralPdpModel:
    h, meta, sections = read_checkpoint(path, expected_h)
    names = param_shapes(h)
    try:
        params = {name: sections[name] for name in names}
    except KeyError as exc:
        raise CheckpointError(f"missing section {exc}") from None
    return NeuralPdpModel(h, params, meta.get("dropout_rate", 0.2))
