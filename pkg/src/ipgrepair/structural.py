"""Graph classifier over IPGs, its attributions, and influential node/edge sets.

The classifier is two mean-aggregation message-passing layers (self loop
included, edge direction ignored), global mean pooling and a linear head.
Node features are the scalar activations.

Extracted IPGs of dense models are complete bipartite between consecutive
layers, so a node's neighbourhood sum is just the sums of the two adjacent
layers. ``LayeredAggregator`` exploits that; ``SparseAggregator`` handles any
edge set. Both compute the same operator.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ConfigurationError, DomainError
from .ipg import IPG, NodeId

log = logging.getLogger(__name__)


@dataclass
class GnnModel:
    W1: np.ndarray  # (1, hidden)
    b1: np.ndarray
    W2: np.ndarray  # (hidden, hidden)
    b2: np.ndarray
    Wc: np.ndarray  # (hidden, classes)
    bc: np.ndarray
    settings: tuple
    heldout_accuracy: Optional[float] = None
    loss_history: list = field(default_factory=list)

    PARAMS = ("W1", "b1", "W2", "b2", "Wc", "bc")

    @property
    def hidden_dim(self) -> int:
        return self.W1.shape[1]

    @classmethod
    def init(cls, settings: Sequence[str], hidden_dim: int = 16, seed: int = 0) -> "GnnModel":
        rng = np.random.default_rng(seed)

        def glorot(fan_in, fan_out):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-bound, bound, size=(fan_in, fan_out))

        k = len(settings)
        return cls(glorot(1, hidden_dim), np.zeros(hidden_dim), glorot(hidden_dim, hidden_dim),
                   np.zeros(hidden_dim), glorot(hidden_dim, k), np.zeros(k), tuple(settings))

    def class_index(self, setting: str) -> int:
        try:
            return self.settings.index(setting)
        except ValueError:
            raise DomainError(f"unknown setting {setting!r}; model knows {self.settings}") from None

    def to_dict(self) -> dict:
        d = {name: getattr(self, name).tolist() for name in self.PARAMS}
        d.update(settings=list(self.settings), heldout_accuracy=self.heldout_accuracy,
                 loss_history=self.loss_history)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GnnModel":
        arrays = {name: np.asarray(d[name], dtype=np.float64) for name in cls.PARAMS}
        return cls(**arrays, settings=tuple(d["settings"]),
                   heldout_accuracy=d.get("heldout_accuracy"),
                   loss_history=list(d.get("loss_history", [])))


# ------------------------------------------------------------------ aggregators


class SparseAggregator:
    """Row-normalized (A + I) over an explicit undirected edge list."""

    def __init__(self, num_nodes: int, src, dst):
        src = np.asarray(src, dtype=np.int64)
        dst = np.asarray(dst, dtype=np.int64)
        rows = np.concatenate([src, dst, np.arange(num_nodes)])
        cols = np.concatenate([dst, src, np.arange(num_nodes)])
        A = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(num_nodes, num_nodes))
        A.sum_duplicates()
        A.data[:] = 1.0  # parallel duplicates count once
        deg = np.asarray(A.sum(axis=1)).ravel()
        self.S = sp.diags(1.0 / deg) @ A
        self.ST = self.S.T.tocsr()

    def apply(self, H):
        return self.S @ H

    def apply_T(self, G):
        return self.ST @ G


class LayeredAggregator:
    """Same operator for graphs whose consecutive layers are fully connected."""

    def __init__(self, layer_counts: np.ndarray):
        # layer_counts: (num_graphs, num_layers); nodes ordered graph-major, then layer
        counts = np.asarray(layer_counts, dtype=np.int64)
        self.shape = counts.shape
        g, L = counts.shape
        self.group = np.repeat(np.arange(g * L), counts.ravel())
        n = len(self.group)
        self.P = sp.csr_matrix((np.ones(n), (self.group, np.arange(n))), shape=(g * L, n))
        padded = np.pad(counts, ((0, 0), (1, 1)))
        deg = 1 + padded[:, :-2] + padded[:, 2:]
        self.deg = deg.ravel()[self.group].astype(np.float64)

    def _neighbour_sums(self, H):
        g, L = self.shape
        S = np.asarray(self.P @ H).reshape(g, L, -1)
        padded = np.pad(S, ((0, 0), (1, 1), (0, 0)))
        return (padded[:, :-2] + padded[:, 2:]).reshape(g * L, -1)[self.group]

    def apply(self, H):
        return (H + self._neighbour_sums(H)) / self.deg[:, None]

    def apply_T(self, G):
        Q = G / self.deg[:, None]
        return Q + self._neighbour_sums(Q)


@dataclass
class GraphBatch:
    x: np.ndarray  # (N,) node features
    graph_id: np.ndarray  # (N,)
    num_graphs: int
    agg: object

    def pool_matrix(self):
        n = len(self.x)
        sizes = np.bincount(self.graph_id, minlength=self.num_graphs).astype(np.float64)
        if np.any(sizes == 0):
            raise DomainError("empty graph in batch")
        return sp.csr_matrix((1.0 / sizes[self.graph_id], (self.graph_id, np.arange(n))),
                             shape=(self.num_graphs, n))


def batch_from_ipgs(ipgs: Sequence[IPG], force_sparse: bool = False) -> GraphBatch:
    ipgs = list(ipgs)
    if not ipgs:
        raise ConfigurationError("no graphs")
    for g in ipgs:
        if g.num_nodes == 0:
            raise DomainError(f"graph {g.input_id} has no nodes")
    x = np.concatenate([g.activation for g in ipgs])
    sizes = np.array([g.num_nodes for g in ipgs])
    graph_id = np.repeat(np.arange(len(ipgs)), sizes)
    layered = (not force_sparse and all(g.is_layered_complete() for g in ipgs)
               and len({g.num_layers for g in ipgs}) == 1)
    if layered:
        agg = LayeredAggregator(np.stack([g.layer_counts() for g in ipgs]))
    else:
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        src, dst = [], []
        for off, g in zip(offsets, ipgs):
            s, d = _edge_endpoints(g)
            src.append(s + off)
            dst.append(d + off)
        agg = SparseAggregator(len(x), np.concatenate(src), np.concatenate(dst))
    return GraphBatch(x, graph_id, len(ipgs), agg)


def _edge_endpoints(g: IPG):
    """Edges of ``g`` as positions into its node arrays."""
    e = g.edges
    if len(e) == 0:
        z = np.zeros(0, dtype=np.int64)
        return z, z.copy()
    bounds = g._bounds
    src = np.empty(len(e), dtype=np.int64)
    dst = np.empty(len(e), dtype=np.int64)
    for l in np.unique(e.src_layer):
        sel = e.src_layer == l
        src[sel] = bounds[l] + np.searchsorted(g.layer_units(l), e.src_unit[sel])
        dst[sel] = bounds[l + 1] + np.searchsorted(g.layer_units(l + 1), e.dst_unit[sel])
    return src, dst


def graph_batch(x, src, dst) -> GraphBatch:
    """Single generic graph from node features and an edge index."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise DomainError("empty graph")
    return GraphBatch(x, np.zeros(len(x), dtype=np.int64), 1,
                      SparseAggregator(len(x), src, dst))


# -------------------------------------------------------------- forward/backward


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _forward(gnn: GnnModel, batch: GraphBatch):
    c = {}
    c["M1"] = batch.agg.apply(batch.x[:, None])
    c["P1"] = c["M1"] @ gnn.W1 + gnn.b1
    c["H1"] = np.maximum(c["P1"], 0.0)
    c["M2"] = batch.agg.apply(c["H1"])
    c["P2"] = c["M2"] @ gnn.W2 + gnn.b2
    c["H2"] = np.maximum(c["P2"], 0.0)
    c["pool"] = batch.pool_matrix()
    c["g"] = np.asarray(c["pool"] @ c["H2"])
    logits = c["g"] @ gnn.Wc + gnn.bc
    return logits, c


def _backward(gnn: GnnModel, batch: GraphBatch, c, dlogits):
    grads = {"Wc": c["g"].T @ dlogits, "bc": dlogits.sum(axis=0)}
    dH2 = np.asarray(c["pool"].T @ (dlogits @ gnn.Wc.T))
    dP2 = dH2 * (c["P2"] > 0)
    grads["W2"] = c["M2"].T @ dP2
    grads["b2"] = dP2.sum(axis=0)
    dH1 = batch.agg.apply_T(dP2 @ gnn.W2.T)
    dP1 = dH1 * (c["P1"] > 0)
    grads["W1"] = c["M1"].T @ dP1
    grads["b1"] = dP1.sum(axis=0)
    dx = batch.agg.apply_T(dP1 @ gnn.W1.T)[:, 0]
    return grads, dx


def gnn_logits(gnn: GnnModel, batch: GraphBatch) -> np.ndarray:
    return _forward(gnn, batch)[0]


def gnn_forward(gnn: GnnModel, ipg) -> np.ndarray:
    """Class probabilities for one IPG (or a prepared single-graph GraphBatch)."""
    batch = ipg if isinstance(ipg, GraphBatch) else batch_from_ipgs([ipg])
    return _softmax(gnn_logits(gnn, batch))[0]


def gnn_loss_and_grads(gnn: GnnModel, batch: GraphBatch, labels):
    """Mean cross-entropy over the batch's graphs, parameter grads, node-feature grads."""
    labels = np.asarray(labels, dtype=int)
    logits, c = _forward(gnn, batch)
    p = _softmax(logits)
    n = len(labels)
    loss = float(-np.mean(np.log(np.maximum(p[np.arange(n), labels], 1e-12))))
    d = p.copy()
    d[np.arange(n), labels] -= 1.0
    grads, dx = _backward(gnn, batch, c, d / n)
    return loss, grads, dx


# --------------------------------------------------------------------- training


def _stratified_split(labels: np.ndarray, test_fraction: float, rng):
    train, test = [], []
    for k in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == k))
        n_test = int(round(test_fraction * len(idx)))
        test.extend(idx[:n_test])
        train.extend(idx[n_test:])
    return np.sort(np.array(train, dtype=int)), np.sort(np.array(test, dtype=int))


def train_gnn(corpora: Mapping[str, Sequence[IPG]], hidden_dim: int = 16, epochs: int = 200,
              lr: float = 0.01, seed: int = 0, test_fraction: float = 0.2,
              optimizer: str = "adam") -> GnnModel:
    """Full-batch training; reports accuracy on a stratified held-out split."""
    if len(corpora) < 2:
        raise ConfigurationError("need IPG corpora from at least two settings")
    for name, graphs in corpora.items():
        if len(graphs) < 10:
            raise ConfigurationError(f"setting {name!r} has fewer than 10 graphs")
    if optimizer not in ("gd", "adam"):
        raise ConfigurationError(f"unknown optimizer {optimizer!r}")
    settings = tuple(corpora)
    graphs = [g for s in settings for g in corpora[s]]
    labels = np.concatenate([np.full(len(corpora[s]), i) for i, s in enumerate(settings)])
    rng = np.random.default_rng(seed)
    train_idx, test_idx = _stratified_split(labels, test_fraction, rng)
    train_batch = batch_from_ipgs([graphs[i] for i in train_idx])
    gnn = GnnModel.init(settings, hidden_dim, seed)
    m = {k: np.zeros_like(getattr(gnn, k)) for k in gnn.PARAMS}
    v = {k: np.zeros_like(getattr(gnn, k)) for k in gnn.PARAMS}
    b1, b2, eps = 0.9, 0.999, 1e-8
    for t in range(1, epochs + 1):
        loss, grads, _ = gnn_loss_and_grads(gnn, train_batch, labels[train_idx])
        gnn.loss_history.append(loss)
        for k in gnn.PARAMS:
            param = getattr(gnn, k)
            if optimizer == "gd":
                param -= lr * grads[k]
            else:
                m[k] = b1 * m[k] + (1 - b1) * grads[k]
                v[k] = b2 * v[k] + (1 - b2) * grads[k] ** 2
                mhat = m[k] / (1 - b1 ** t)
                vhat = v[k] / (1 - b2 ** t)
                param -= lr * mhat / (np.sqrt(vhat) + eps)
    if len(test_idx):
        test_batch = batch_from_ipgs([graphs[i] for i in test_idx])
        pred = np.argmax(gnn_logits(gnn, test_batch), axis=1)
        gnn.heldout_accuracy = float(np.mean(pred == labels[test_idx]))
    log.info("gnn trained: final loss %.4f, held-out accuracy %s",
             gnn.loss_history[-1] if gnn.loss_history else float("nan"), gnn.heldout_accuracy)
    return gnn


def save_gnn(gnn: GnnModel, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(gnn.to_dict(), sort_keys=True))


def load_gnn(path) -> GnnModel:
    return GnnModel.from_dict(json.loads(Path(path).read_text()))


# ------------------------------------------------------------------ attribution


@dataclass
class Attribution:
    target_class: str
    input_id: str
    node_layer: np.ndarray
    node_unit: np.ndarray
    node_score: np.ndarray
    edge_layer: np.ndarray
    edge_src: np.ndarray
    edge_dst: np.ndarray
    edge_score: np.ndarray

    @property
    def node_scores(self) -> dict:
        return {NodeId(int(l), int(u)): float(s)
                for l, u, s in zip(self.node_layer, self.node_unit, self.node_score)}

    @property
    def edge_scores(self) -> dict:
        return {(NodeId(int(l), int(u)), NodeId(int(l) + 1, int(v))): float(s)
                for l, u, v, s in zip(self.edge_layer, self.edge_src, self.edge_dst,
                                      self.edge_score)}


def node_input_x_gradient(gnn: GnnModel, batch: GraphBatch, target: int) -> np.ndarray:
    logits, c = _forward(gnn, batch)
    d = np.zeros_like(logits)
    d[:, target] = 1.0
    _, dx = _backward(gnn, batch, c, d)
    return np.abs(batch.x * dx)


def occlusion_scores_bruteforce(gnn: GnnModel, x, src, dst, target: int) -> np.ndarray:
    """|logit_t(G) - logit_t(G minus e)| for every edge, one forward per edge."""
    x = np.asarray(x, dtype=np.float64)
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    base = gnn_logits(gnn, graph_batch(x, src, dst))[0, target]
    out = np.empty(len(src))
    keep = np.ones(len(src), dtype=bool)
    for e in range(len(src)):
        keep[e] = False
        out[e] = abs(base - gnn_logits(gnn, graph_batch(x, src[keep], dst[keep]))[0, target])
        keep[e] = True
    return out


def _relu_shift_sum(sorted_cols, suffix, base_sum, shift):
    """Sum over rows of relu(p + shift) minus the unshifted sum, per column.

    ``sorted_cols[j]`` holds the ascending pre-activations of column j and
    ``suffix[j][i]`` the sum of its entries from i on. ``shift`` is (E, h).
    """
    out = np.empty_like(shift)
    for j in range(shift.shape[1]):
        col = sorted_cols[j]
        idx = np.searchsorted(col, -shift[:, j], side="right")
        out[:, j] = suffix[j][idx] + (len(col) - idx) * shift[:, j] - base_sum[j]
    return out


def occlusion_scores_layered(gnn: GnnModel, ipg: IPG, target: int,
                             chunk: int = 64) -> np.ndarray:
    """Exact edge-occlusion scores for a complete-layered IPG, in edge-table order.

    Removing edge (u, v) only changes the first-layer states of u and v; every
    other second-layer change is a uniform shift added to whole layers, whose
    ReLU sum is read off sorted pre-activations with prefix sums.
    """
    L = ipg.num_layers
    counts = ipg.layer_counts()
    batch = batch_from_ipgs([ipg])
    _, c = _forward(gnn, batch)
    x, H1, P2, H2 = batch.x, c["H1"], c["P2"], c["H2"]
    w1, b1, W2, b2 = gnn.W1[0], gnn.b1, gnn.W2, gnn.b2
    N = len(x)
    wc = gnn.Wc[:, target]
    sl = [ipg.layer_slice(l) for l in range(L)]
    X = np.array([x[s].sum() for s in sl])
    S1 = np.stack([H1[s].sum(axis=0) for s in sl])
    pad = np.concatenate([[0], counts, [0]])
    D = (1 + pad[:-2] + pad[2:]).astype(np.float64)

    sorted_cols, suffix, base = [], [], []
    for s in sl:
        cols = np.sort(P2[s], axis=0)
        sorted_cols.append([cols[:, j] for j in range(cols.shape[1])])
        suf = np.concatenate([np.cumsum(cols[::-1], axis=0)[::-1], np.zeros((1, cols.shape[1]))])
        suffix.append([suf[:, j] for j in range(cols.shape[1])])
        base.append(H2[s].sum(axis=0))

    def layer_shift(k, shift):
        if k < 0 or k >= L or counts[k] == 0:
            return 0.0
        return _relu_shift_sum(sorted_cols[k], suffix[k], base[k], shift)

    def lay(k):
        return X[k] if 0 <= k < L else 0.0

    def lay1(k):
        return S1[k] if 0 <= k < L else 0.0

    scores = []
    for l in range(L - 1):
        nu, nv = counts[l], counts[l + 1]
        if nu == 0 or nv == 0:
            continue
        xv = x[sl[l + 1]]
        H1v, P2v, H2v = H1[sl[l + 1]], P2[sl[l + 1]], H2[sl[l + 1]]
        for start in range(0, nu, chunk):
            ui = np.arange(sl[l].start + start, min(sl[l].start + start + chunk, sl[l].stop))
            xu = x[ui][:, None]  # (cu, 1)
            # first-layer states of u and v with the edge removed: (cu, nv, h)
            a1u = (xu + lay(l - 1) + lay(l + 1) - xv[None, :]) / (D[l] - 1)
            h1u = np.maximum(a1u[..., None] * w1 + b1, 0.0)
            dh1u = h1u - H1[ui][:, None, :]
            a1v = (xv[None, :] + lay(l) - xu + lay(l + 2)) / (D[l + 1] - 1)
            h1v = np.maximum(a1v[..., None] * w1 + b1, 0.0)
            dh1v = h1v - H1v[None, :, :]
            # second layer at u and v themselves
            a2u = (h1u + lay1(l - 1) + lay1(l + 1) - H1v[None, :, :]) / (D[l] - 1)
            t_u = np.maximum(a2u @ W2 + b2, 0.0) - H2[ui][:, None, :]
            a2v = (h1v + lay1(l) - H1[ui][:, None, :] + lay1(l + 2)) / (D[l + 1] - 1)
            t_v = np.maximum(a2v @ W2 + b2, 0.0) - H2v[None, :, :]
            cu, h = len(ui), W2.shape[1]
            du = (dh1u @ W2).reshape(-1, h)
            dv = (dh1v @ W2).reshape(-1, h)
            total = (t_u + t_v).reshape(-1, h)
            if l - 1 >= 0:
                total += layer_shift(l - 1, du / D[l - 1])
            # layer l+1 minus v, which was handled exactly above
            shift = du / D[l + 1]
            total += layer_shift(l + 1, shift)
            total -= (np.maximum(np.broadcast_to(P2v, (cu, nv, h)).reshape(-1, h) + shift, 0.0)
                      - np.broadcast_to(H2v, (cu, nv, h)).reshape(-1, h))
            # layer l minus u
            shift = dv / D[l]
            total += layer_shift(l, shift)
            total -= (np.maximum(np.repeat(P2[ui], nv, axis=0) + shift, 0.0)
                      - np.repeat(H2[ui], nv, axis=0))
            if l + 2 < L:
                total += layer_shift(l + 2, dv / D[l + 2])
            scores.append(np.abs(total @ wc) / N)
    return np.concatenate(scores) if scores else np.zeros(0)


def attribute(gnn: GnnModel, ipg: IPG, target: str, edges: bool = True) -> Attribution:
    """Input-times-gradient node scores and occlusion edge scores for ``target``."""
    t = gnn.class_index(target)
    batch = batch_from_ipgs([ipg])
    node_score = node_input_x_gradient(gnn, batch, t)
    e = ipg.edges if edges else None
    if e is None or len(e) == 0:
        edge_score = np.zeros(0)
        el = es = ed = np.zeros(0, dtype=np.int64)
    else:
        el, es, ed = e.src_layer, e.src_unit, e.dst_unit
        if ipg.is_layered_complete():
            edge_score = occlusion_scores_layered(gnn, ipg, t)
        else:
            src, dst = _edge_endpoints(ipg)
            edge_score = occlusion_scores_bruteforce(gnn, ipg.activation, src, dst, t)
    return Attribution(target, ipg.input_id, ipg.node_layer.copy(), ipg.node_unit.copy(),
                       node_score, el, es, ed, edge_score)


# ------------------------------------------------------------- influential sets


@dataclass
class InfluentialSets:
    benign_only: set
    adversarial_only: set
    shared: set
    threshold_desired: float
    threshold_undesired: float
    percentile: float
    edge_benign_only: set = field(default_factory=set)
    edge_adversarial_only: set = field(default_factory=set)
    edge_shared: set = field(default_factory=set)
    edge_threshold_desired: float = float("nan")
    edge_threshold_undesired: float = float("nan")

    @property
    def desired_nodes(self) -> set:
        return self.benign_only | self.shared

    @property
    def undesired_nodes(self) -> set:
        return self.adversarial_only | self.shared

    @property
    def undesired_edges(self) -> set:
        return self.edge_adversarial_only | self.edge_shared

    def to_dict(self) -> dict:
        def nodes(s):
            return [[n.layer_index, n.unit_index] for n in sorted(s)]

        def edges(s):
            return [[a.layer_index, a.unit_index, b.layer_index, b.unit_index]
                    for a, b in sorted(s)]

        return {
            "percentile": self.percentile,
            "threshold": {"desired": self.threshold_desired,
                          "undesired": self.threshold_undesired},
            "benign_only": nodes(self.benign_only),
            "adversarial_only": nodes(self.adversarial_only),
            "shared": nodes(self.shared),
            "edges": {"benign_only": edges(self.edge_benign_only),
                      "adversarial_only": edges(self.edge_adversarial_only),
                      "shared": edges(self.edge_shared),
                      "threshold": {"desired": self.edge_threshold_desired,
                                    "undesired": self.edge_threshold_undesired}},
            "counts": {"benign_only": len(self.benign_only),
                       "adversarial_only": len(self.adversarial_only),
                       "shared": len(self.shared),
                       "edge_benign_only": len(self.edge_benign_only),
                       "edge_adversarial_only": len(self.edge_adversarial_only),
                       "edge_shared": len(self.edge_shared)},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "InfluentialSets":
        def nodes(rows):
            return {NodeId(l, u) for l, u in rows}

        def edges(rows):
            return {(NodeId(a, b), NodeId(c, e)) for a, b, c, e in rows}

        ed = d.get("edges", {})
        return cls(nodes(d["benign_only"]), nodes(d["adversarial_only"]), nodes(d["shared"]),
                   d["threshold"]["desired"], d["threshold"]["undesired"], d["percentile"],
                   edges(ed.get("benign_only", [])), edges(ed.get("adversarial_only", [])),
                   edges(ed.get("shared", [])),
                   ed.get("threshold", {}).get("desired", float("nan")),
                   ed.get("threshold", {}).get("undesired", float("nan")))


_UNIT_BITS = 24


def mean_node_attribution(attrs: Sequence[Attribution]):
    """(keys, means) with keys = (layer, unit) rows; mean over graphs containing the node."""
    if not attrs:
        return np.zeros((0, 2), dtype=np.int64), np.zeros(0)
    key = np.concatenate([(a.node_layer << _UNIT_BITS) | a.node_unit for a in attrs])
    score = np.concatenate([a.node_score for a in attrs])
    uniq, inv = np.unique(key, return_inverse=True)
    means = np.bincount(inv, weights=score) / np.bincount(inv)
    return np.stack([uniq >> _UNIT_BITS, uniq & ((1 << _UNIT_BITS) - 1)], axis=1), means


def mean_edge_attribution(attrs: Sequence[Attribution]):
    """(keys, means) with keys = (layer, src_unit, dst_unit) rows."""
    attrs = [a for a in attrs if len(a.edge_score)]
    if not attrs:
        return np.zeros((0, 3), dtype=np.int64), np.zeros(0)
    mask = (1 << _UNIT_BITS) - 1
    key = np.concatenate([(a.edge_layer << (2 * _UNIT_BITS)) | (a.edge_src << _UNIT_BITS)
                          | a.edge_dst for a in attrs])
    score = np.concatenate([a.edge_score for a in attrs])
    uniq, inv = np.unique(key, return_inverse=True)
    means = np.bincount(inv, weights=score) / np.bincount(inv)
    keys = np.stack([uniq >> (2 * _UNIT_BITS), (uniq >> _UNIT_BITS) & mask, uniq & mask], axis=1)
    return keys, means


class AttributionSummary:
    """Running per-node and per-edge attribution sums over one setting's graphs.

    Dense over every node and every consecutive-layer unit pair of the model,
    so large corpora can be folded in one graph at a time.
    """

    def __init__(self, unit_counts):
        self.unit_counts = tuple(int(c) for c in unit_counts)
        c = np.asarray(self.unit_counts, dtype=np.int64)
        self.node_offsets = np.concatenate([[0], np.cumsum(c)])
        self.edge_offsets = np.concatenate([[0], np.cumsum(c[:-1] * c[1:])])
        self.node_sum = np.zeros(self.node_offsets[-1])
        self.node_cnt = np.zeros(self.node_offsets[-1], dtype=np.int64)
        self.edge_sum = np.zeros(self.edge_offsets[-1])
        self.edge_cnt = np.zeros(self.edge_offsets[-1], dtype=np.int64)
        self.graphs = 0

    def add(self, a: Attribution) -> None:
        idx = self.node_offsets[a.node_layer] + a.node_unit
        np.add.at(self.node_sum, idx, a.node_score)
        np.add.at(self.node_cnt, idx, 1)
        if len(a.edge_score):
            n_dst = np.asarray(self.unit_counts)[a.edge_layer + 1]
            eidx = self.edge_offsets[a.edge_layer] + a.edge_src * n_dst + a.edge_dst
            np.add.at(self.edge_sum, eidx, a.edge_score)
            np.add.at(self.edge_cnt, eidx, 1)
        self.graphs += 1

    @classmethod
    def of(cls, unit_counts, attrs: Sequence[Attribution]) -> "AttributionSummary":
        s = cls(unit_counts)
        for a in attrs:
            s.add(a)
        return s

    def node_means(self):
        flat = np.flatnonzero(self.node_cnt)
        layer = np.searchsorted(self.node_offsets, flat, side="right") - 1
        keys = np.stack([layer, flat - self.node_offsets[layer]], axis=1)
        return keys, self.node_sum[flat] / self.node_cnt[flat]

    def edge_means(self):
        flat = np.flatnonzero(self.edge_cnt)
        layer = np.searchsorted(self.edge_offsets, flat, side="right") - 1
        rem = flat - self.edge_offsets[layer]
        n_dst = np.asarray(self.unit_counts, dtype=np.int64)[layer + 1]
        keys = np.stack([layer, rem // n_dst, rem % n_dst], axis=1)
        return keys, self.edge_sum[flat] / self.edge_cnt[flat]


def _node_means(x):
    return x.node_means() if isinstance(x, AttributionSummary) else mean_node_attribution(x)


def _edge_means(x):
    return x.edge_means() if isinstance(x, AttributionSummary) else mean_edge_attribution(x)


def _above(keys, means, percentile):
    if len(means) == 0:
        return set(), float("nan")
    cut = float(np.percentile(means, percentile))
    return {tuple(int(v) for v in k) for k in keys[means >= cut]}, cut


def influential_sets(attrs_desired, attrs_undesired, percentile: float = 90.0) -> InfluentialSets:
    """Nodes/edges whose mean attribution reaches the setting's percentile cutoff.

    Each argument is a sequence of Attribution or an AttributionSummary.
    """
    if not 0 < percentile <= 100:
        raise ConfigurationError("percentile must be in (0, 100]")
    d, td = _above(*_node_means(attrs_desired), percentile)
    u, tu = _above(*_node_means(attrs_undesired), percentile)
    ed, etd = _above(*_edge_means(attrs_desired), percentile)
    eu, etu = _above(*_edge_means(attrs_undesired), percentile)

    def nodes(keys):
        return {NodeId(*k) for k in keys}

    def edges(keys):
        return {(NodeId(l, s), NodeId(l + 1, t)) for l, s, t in keys}

    return InfluentialSets(nodes(d - u), nodes(u - d), nodes(d & u), td, tu, percentile,
                           edges(ed - eu), edges(eu - ed), edges(ed & eu), etd, etu)


def write_attribution_csv(attrs_by_setting: Mapping[str, object], path) -> None:
    """Rows (layer, unit, setting, mean_node_score) per setting."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "unit", "setting", "mean_node_score"])
        for setting, attrs in attrs_by_setting.items():
            keys, means = _node_means(attrs)
            for (l, u), m in zip(keys.tolist(), means.tolist()):
                w.writerow([l, u, setting, repr(m)])


def read_attribution_csv(path) -> dict:
    """setting -> {NodeId: mean score}."""
    out: dict = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(row["setting"], {})[NodeId(int(row["layer"]), int(row["unit"]))] = \
                float(row["mean_node_score"])
    return out


def save_influential(sets: InfluentialSets, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(sets.to_dict(), sort_keys=True) + "\n")


def load_influential(path) -> InfluentialSets:
    return InfluentialSets.from_dict(json.loads(Path(path).read_text()))
