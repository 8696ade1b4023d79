"""Inference provenance graphs: per-input activated subgraphs of the model DAG.

Nodes are stored sparsely as parallel arrays sorted by (layer, unit). Edges
of an extracted graph are fully determined by its nodes and the model
weights, so they are materialized on demand from shared weight references
instead of being copied per graph. Graphs loaded from an explicit-edge
corpus carry their own edge table.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ConsistencyError, DataFormatError, DimensionError, ParseError
from .nn_core import Model, forward


@dataclass(frozen=True, order=True)
class NodeId:
    layer_index: int
    unit_index: int


@dataclass(frozen=True)
class IpgNode:
    id: NodeId
    activation: float


@dataclass(frozen=True)
class IpgEdge:
    src: NodeId
    dst: NodeId
    weight: float
    contribution: float


@dataclass
class EdgeTable:
    src_layer: np.ndarray
    src_unit: np.ndarray
    dst_unit: np.ndarray
    weight: np.ndarray
    contribution: np.ndarray

    def __len__(self):
        return len(self.src_layer)

    @classmethod
    def empty(cls):
        z = np.zeros(0, dtype=np.int64)
        f = np.zeros(0)
        return cls(z, z.copy(), z.copy(), f, f.copy())

    def arrays(self):
        return (self.src_layer, self.src_unit, self.dst_unit, self.weight, self.contribution)


class ModelEdges:
    """Per-layer effective weight matrices of a model, shared by its graphs."""

    def __init__(self, model: Model):
        self.model_id = model.digest
        self.unit_counts = tuple(model.unit_counts)
        self.weights = [None] + [model.edge_weights(l) for l in range(1, len(model.layers))]
        self.elementwise = tuple(model.is_elementwise(l) for l in range(len(model.layers)))


class IPG:
    """One inference's provenance graph.

    Either ``edge_source`` (a :class:`ModelEdges`) or ``edge_table`` provides
    the edges; a graph loaded with implicit edges and no model has neither
    until :meth:`bind` is called.
    """

    def __init__(self, model_id: str, input_id: str, setting: str, predicted_label: int,
                 node_layer, node_unit, activation, unit_counts: Sequence[int],
                 edge_source: Optional[ModelEdges] = None,
                 edge_table: Optional[EdgeTable] = None):
        self.model_id = model_id
        self.input_id = str(input_id)
        self.setting = setting
        self.predicted_label = int(predicted_label)
        node_layer = np.asarray(node_layer, dtype=np.int64)
        node_unit = np.asarray(node_unit, dtype=np.int64)
        order = np.lexsort((node_unit, node_layer))
        self.node_layer = node_layer[order]
        self.node_unit = node_unit[order]
        self.activation = np.asarray(activation, dtype=np.float64)[order]
        self.unit_counts = tuple(int(u) for u in unit_counts)
        self._source = edge_source
        if edge_table is not None:
            eo = np.lexsort((edge_table.dst_unit, edge_table.src_unit, edge_table.src_layer))
            edge_table = EdgeTable(*(col[eo] for col in edge_table.arrays()))
        self._table = edge_table
        self._bounds = np.searchsorted(self.node_layer, np.arange(len(self.unit_counts) + 1))

    # ------------------------------------------------------------------ nodes

    @property
    def num_layers(self) -> int:
        return len(self.unit_counts)

    @property
    def num_nodes(self) -> int:
        return len(self.node_layer)

    def layer_slice(self, layer: int) -> slice:
        return slice(self._bounds[layer], self._bounds[layer + 1])

    def layer_units(self, layer: int) -> np.ndarray:
        return self.node_unit[self.layer_slice(layer)]

    def layer_activations(self, layer: int) -> np.ndarray:
        return self.activation[self.layer_slice(layer)]

    def layer_counts(self) -> np.ndarray:
        return np.diff(self._bounds)

    @property
    def nodes(self) -> list:
        return [IpgNode(NodeId(int(l), int(u)), float(a))
                for l, u, a in zip(self.node_layer, self.node_unit, self.activation)]

    def node_ids(self) -> list:
        return [NodeId(int(l), int(u)) for l, u in zip(self.node_layer, self.node_unit)]

    def node_index(self, node: NodeId) -> int:
        """Position of ``node`` in the node arrays, or -1 when absent."""
        units = self.layer_units(node.layer_index)
        i = int(np.searchsorted(units, node.unit_index))
        if i < len(units) and units[i] == node.unit_index:
            return self.layer_slice(node.layer_index).start + i
        return -1

    # ------------------------------------------------------------------ edges

    @property
    def has_edges(self) -> bool:
        return self._source is not None or self._table is not None

    def bind(self, model_edges: ModelEdges) -> "IPG":
        if model_edges.model_id != self.model_id:
            raise ConsistencyError(
                f"graph {self.input_id} belongs to model {self.model_id[:12]}, "
                f"not {model_edges.model_id[:12]}"
            )
        self._source = model_edges
        return self

    @property
    def edges(self) -> EdgeTable:
        if self._table is not None:
            return self._table
        if self._source is None:
            raise ConsistencyError(
                "graph stores its edges implicitly; bind it to its model first"
            )
        return self._materialize()

    def _materialize(self) -> EdgeTable:
        parts = []
        src_ = self._source
        for l in range(self.num_layers - 1):
            su, sa = self.layer_units(l), self.layer_activations(l)
            du = self.layer_units(l + 1)
            W = src_.weights[l + 1]
            if src_.elementwise[l + 1]:
                keep = np.isin(su, du)
                s, a = su[keep], sa[keep]
                w = W[s, s]
                parts.append((np.full(len(s), l), s, s.copy(), w, w * a))
            else:
                if len(su) == 0 or len(du) == 0:
                    continue
                w = W[np.ix_(du, su)].T.ravel()
                s = np.repeat(su, len(du))
                parts.append((np.full(len(s), l), s, np.tile(du, len(su)), w,
                              w * np.repeat(sa, len(du))))
        if not parts:
            return EdgeTable.empty()
        cols = [np.concatenate(c) for c in zip(*parts)]
        cols[0] = cols[0].astype(np.int64)
        return EdgeTable(*cols)

    def edge_list(self) -> list:
        e = self.edges
        return [IpgEdge(NodeId(int(l), int(u)), NodeId(int(l) + 1, int(v)), float(w), float(c))
                for l, u, v, w, c in zip(*e.arrays())]

    def is_layered_complete(self) -> bool:
        """True when every consecutive layer pair is joined by a complete bipartite edge set."""
        counts = self.layer_counts()
        expected = counts[:-1] * counts[1:]
        if self._table is None:
            if self._source is None:
                return False
            return not any(self._source.elementwise[1:])
        got = np.bincount(self._table.src_layer, minlength=self.num_layers - 1)[:self.num_layers - 1]
        return bool(np.array_equal(got, expected))

    # ----------------------------------------------------------- comparison

    def __eq__(self, other):
        if not isinstance(other, IPG):
            return NotImplemented
        same_meta = (self.model_id, self.input_id, self.setting, self.predicted_label,
                     self.unit_counts) == (other.model_id, other.input_id, other.setting,
                                           other.predicted_label, other.unit_counts)
        if not same_meta:
            return False
        if not (np.array_equal(self.node_layer, other.node_layer)
                and np.array_equal(self.node_unit, other.node_unit)
                and np.array_equal(self.activation, other.activation)):
            return False
        if self.has_edges != other.has_edges:
            return False
        if not self.has_edges:
            return True
        return all(np.array_equal(a, b) for a, b in zip(self.edges.arrays(), other.edges.arrays()))

    __hash__ = None

    def __repr__(self):
        return (f"IPG(input_id={self.input_id!r}, setting={self.setting!r}, "
                f"nodes={self.num_nodes}, label={self.predicted_label})")


# ------------------------------------------------------------------ extraction


def activated_mask(model: Model, layer_index: int, values: np.ndarray, tau: float = 0.0):
    """Activation criterion: inputs always; ReLU units iff > 0; others iff |v| > tau."""
    if layer_index == 0:
        return np.ones(values.shape, dtype=bool)
    if model.layers[layer_index].activation == "relu":
        return values > 0
    return np.abs(values) > tau


def extract_ipg(model: Model, x, setting: str, input_id=None, tau: float = 0.0,
                model_edges: Optional[ModelEdges] = None) -> IPG:
    x = np.asarray(x, dtype=np.float64)
    if x.size != model.input_dim:
        raise DimensionError(f"input has {x.size} features, model expects {model.input_dim}")
    model_edges = model_edges or ModelEdges(model)
    logits, trace = forward(model, x)
    layers, units, acts = [], [], []
    for l, out in enumerate(trace.per_layer):
        idx = np.flatnonzero(activated_mask(model, l, out, tau))
        layers.append(np.full(idx.size, l, dtype=np.int64))
        units.append(idx)
        acts.append(out[idx])
    return IPG(model_edges.model_id, input_id if input_id is not None else "0", setting,
               int(np.argmax(logits)), np.concatenate(layers), np.concatenate(units),
               np.concatenate(acts), model_edges.unit_counts, edge_source=model_edges)


def extract_corpus(model: Model, X, setting: str, ids: Optional[Iterable] = None,
                   tau: float = 0.0) -> list:
    X = np.asarray(X, dtype=np.float64)
    ids = list(ids) if ids is not None else [f"{setting}-{i}" for i in range(len(X))]
    shared = ModelEdges(model)
    return [extract_ipg(model, x, setting, i, tau, shared) for x, i in zip(X, ids)]


def validate_against_model(ipg: IPG, model: Model, x=None, tau: float = 0.0) -> list:
    """Return invariant violations (empty when the graph is a faithful subgraph)."""
    problems = []
    counts = model.unit_counts
    if ipg.model_id != model.digest:
        problems.append("model_id mismatch")
    if tuple(counts) != ipg.unit_counts:
        problems.append("layer structure mismatch")
        return problems
    if np.any(ipg.node_layer < 0) or np.any(ipg.node_layer >= len(counts)):
        problems.append("node layer out of range")
        return problems
    if np.any(ipg.node_unit < 0) or np.any(ipg.node_unit >= np.asarray(counts)[ipg.node_layer]):
        problems.append("node unit out of range")
    present = [np.zeros(c, dtype=bool) for c in counts]
    for l in range(len(counts)):
        present[l][ipg.layer_units(l)] = True
    e = ipg.edges
    if len(e):
        if np.any(e.src_layer < 0) or np.any(e.src_layer >= len(counts) - 1):
            problems.append("edge layer out of range")
            return problems
        for l in np.unique(e.src_layer):
            sel = e.src_layer == l
            su, du = e.src_unit[sel], e.dst_unit[sel]
            if np.any(su >= counts[l]) or np.any(du >= counts[l + 1]):
                problems.append(f"edge unit out of range at layer {l}")
                continue
            W = model.edge_weights(int(l) + 1)
            if np.any(W[du, su] != e.weight[sel]):
                problems.append(f"edge weights differ from model at layer {l}")
            if model.is_elementwise(int(l) + 1) and np.any(su != du):
                problems.append(f"non-diagonal edge into elementwise layer {l + 1}")
            if not (present[l][su].all() and present[l + 1][du].all()):
                problems.append(f"edge endpoint missing from nodes at layer {l}")
    if x is not None:
        logits, trace = forward(model, x)
        for l, out in enumerate(trace.per_layer):
            want = np.flatnonzero(activated_mask(model, l, out, tau))
            if not np.array_equal(want, ipg.layer_units(l)):
                problems.append(f"layer {l}: node set differs from activation criterion")
            elif not np.array_equal(out[want], ipg.layer_activations(l)):
                problems.append(f"layer {l}: stored activations differ from trace")
        if int(np.argmax(logits)) != ipg.predicted_label:
            problems.append("predicted label differs")
    return problems


# ----------------------------------------------------------------- persistence


def ipg_digest(ipg: IPG) -> str:
    """SHA-256 over a canonical binary serialization (metadata, sorted nodes, edges)."""
    # node and edge arrays are kept sorted by the IPG constructor
    h = hashlib.sha256()
    meta = [ipg.model_id, ipg.input_id, ipg.setting, ipg.predicted_label, list(ipg.unit_counts)]
    h.update(json.dumps(meta, separators=(",", ":")).encode())
    h.update(struct.pack("<q", ipg.num_nodes))
    h.update(ipg.node_layer.astype("<i8").tobytes())
    h.update(ipg.node_unit.astype("<i8").tobytes())
    h.update(ipg.activation.astype("<f8").tobytes())
    if ipg.has_edges:
        e = ipg.edges
        h.update(struct.pack("<q", len(e)))
        for col, dt in zip(e.arrays(), ("<i8", "<i8", "<i8", "<f8", "<f8")):
            h.update(col.astype(dt).tobytes())
    return h.hexdigest()


def _ipg_to_line(ipg: IPG, explicit: bool) -> str:
    doc = {
        "model_id": ipg.model_id,
        "input_id": ipg.input_id,
        "setting": ipg.setting,
        "predicted_label": ipg.predicted_label,
        "unit_counts": list(ipg.unit_counts),
        "nodes": [[l, u, a] for l, u, a in zip(ipg.node_layer.tolist(), ipg.node_unit.tolist(),
                                                ipg.activation.tolist())],
    }
    if explicit:
        e = ipg.edges
        doc["edges"] = [[l, u, l + 1, v, w, c] for l, u, v, w, c in
                        zip(*(col.tolist() for col in e.arrays()))]
    else:
        doc["edges"] = None
    return json.dumps(doc, separators=(",", ":"))


def save_corpus(ipgs: Sequence[IPG], path, edges: str = "explicit") -> None:
    """Write one JSON document per line.

    ``edges="implicit"`` writes ``"edges": null``; such graphs are re-derived
    from the model weights once bound (see :func:`load_corpus`).
    """
    if edges not in ("explicit", "implicit"):
        raise ValueError("edges must be 'explicit' or 'implicit'")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w") as fh:
        for ipg in ipgs:
            fh.write(_ipg_to_line(ipg, edges == "explicit"))
            fh.write("\n")
    tmp.replace(path)


def _ipg_from_doc(doc: dict, lineno: int, model_edges: Optional[ModelEdges]) -> IPG:
    nodes = doc["nodes"]
    if nodes:
        arr = np.asarray(nodes, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != 3:
            raise ParseError("nodes must be [layer, unit, activation] triples", lineno)
        nl, nu = arr[:, 0].astype(np.int64), arr[:, 1].astype(np.int64)
        na = np.array([n[2] for n in nodes], dtype=np.float64)
    else:
        nl = nu = np.zeros(0, dtype=np.int64)
        na = np.zeros(0)
    order = np.lexsort((nu, nl))
    if not np.array_equal(order, np.arange(len(nl))):
        raise ParseError("nodes must be sorted by (layer, unit)", lineno)
    table = None
    if doc["edges"] is not None:
        raw = doc["edges"]
        if raw:
            ints = np.asarray([r[:4] for r in raw], dtype=np.int64)
            if ints.shape[1] != 4 or any(len(r) != 6 for r in raw):
                raise ParseError("edges must be [l, u, l+1, v, weight, contribution]", lineno)
            if np.any(ints[:, 2] != ints[:, 0] + 1):
                raise ParseError("edge does not span adjacent layers", lineno)
            table = EdgeTable(ints[:, 0], ints[:, 1], ints[:, 3],
                              np.array([r[4] for r in raw], dtype=np.float64),
                              np.array([r[5] for r in raw], dtype=np.float64))
            present = set(zip(nl.tolist(), nu.tolist()))
            for l, u, _, v in ints.tolist():
                if (l, u) not in present or (l + 1, v) not in present:
                    raise ParseError("edge endpoint is not a node", lineno)
        else:
            table = EdgeTable.empty()
    ipg = IPG(doc["model_id"], doc["input_id"], doc["setting"], doc["predicted_label"],
              nl, nu, na, doc["unit_counts"], edge_table=table)
    if table is None and model_edges is not None:
        ipg.bind(model_edges)
    return ipg


def load_corpus(path, model: Optional[Model] = None) -> list:
    """Parse a corpus file; any malformed line aborts the whole load.

    With ``model`` given, every graph's model_id is checked against it and
    implicit-edge graphs are bound to its weights.
    """
    model_edges = ModelEdges(model) if model is not None else None
    out = []
    with open(path) as fh:
        text = fh.read()
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    elif lines:
        raise ParseError("file does not end with a newline (truncated?)", len(lines))
    for lineno, line in enumerate(lines, start=1):
        try:
            doc = json.loads(line)
            ipg = _ipg_from_doc(doc, lineno, model_edges)
        except DataFormatError:
            raise
        except (json.JSONDecodeError, KeyError, TypeError, ValueError, IndexError) as exc:
            raise ParseError(f"malformed graph record: {exc}", lineno) from exc
        if model_edges is not None and ipg.model_id != model_edges.model_id:
            raise ConsistencyError(f"line {lineno}: graph belongs to a different model")
        out.append(ipg)
    return out
