"""Per-node and per-layer activation statistics over a setting's IPG corpus."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, ConsistencyError
from .ipg import IPG, NodeId


class CorpusMatrix:
    """Dense (graphs x model units) view of one setting's corpus; NaN = node absent."""

    def __init__(self, ipgs: Sequence[IPG], setting: Optional[str] = None):
        ipgs = list(ipgs)
        if not ipgs:
            raise ConfigurationError("empty corpus")
        settings = {g.setting for g in ipgs}
        if setting is None:
            if len(settings) != 1:
                raise ConfigurationError(f"corpus mixes settings {sorted(settings)}")
            setting = settings.pop()
        if {g.model_id for g in ipgs} != {ipgs[0].model_id}:
            raise ConsistencyError("corpus mixes graphs from different models")
        self.setting = setting
        self.model_id = ipgs[0].model_id
        self.unit_counts = ipgs[0].unit_counts
        self.offsets = np.concatenate([[0], np.cumsum(self.unit_counts)]).astype(np.int64)
        self.values = np.full((len(ipgs), int(self.offsets[-1])), np.nan)
        for i, g in enumerate(ipgs):
            self.values[i, self.offsets[g.node_layer] + g.node_unit] = g.activation
        self.present = ~np.isnan(self.values)

    @classmethod
    def from_values(cls, values, unit_counts, setting: str, model_id: str = "") -> "CorpusMatrix":
        """Build directly from a (graphs x units) matrix with NaN marking absent nodes."""
        cm = cls.__new__(cls)
        cm.setting = setting
        cm.model_id = model_id
        cm.unit_counts = tuple(int(c) for c in unit_counts)
        cm.offsets = np.concatenate([[0], np.cumsum(cm.unit_counts)]).astype(np.int64)
        cm.values = np.array(values, dtype=np.float64, ndmin=2)
        if cm.values.shape[1] != cm.offsets[-1] or cm.values.shape[0] == 0:
            raise ConfigurationError("value matrix does not match unit_counts")
        cm.present = ~np.isnan(cm.values)
        return cm

    def __len__(self):
        return self.values.shape[0]

    @property
    def num_units(self) -> int:
        return self.values.shape[1]

    def flat(self, node: NodeId) -> int:
        return int(self.offsets[node.layer_index] + node.unit_index)

    def node_at(self, flat: int) -> NodeId:
        layer = int(np.searchsorted(self.offsets, flat, side="right") - 1)
        return NodeId(layer, int(flat - self.offsets[layer]))

    def node_values(self, node: NodeId) -> np.ndarray:
        """Activations of ``node`` over the graphs where it is present, corpus order."""
        col = self.flat(node)
        return self.values[self.present[:, col], col]

    def layer_nodes(self, layer: int) -> list:
        return [NodeId(layer, u) for u in range(self.unit_counts[layer])]

    def frequencies(self) -> np.ndarray:
        return self.present.sum(axis=0) / len(self)


@dataclass(frozen=True)
class NodeStats:
    node: NodeId
    setting: str
    mean_activation: float
    activation_frequency: float
    count: int
    stddev: float
    quartiles: tuple  # (q1, median, q3)

    @property
    def absent(self) -> bool:
        """Never present: mean/stddev/quartiles are the 0 convention, not data."""
        return self.count == 0


def _stats_for(node: NodeId, setting: str, values: np.ndarray, total: int) -> NodeStats:
    if values.size == 0:
        return NodeStats(node, setting, 0.0, 0.0, 0, 0.0, (0.0, 0.0, 0.0))
    q1, med, q3 = np.percentile(values, [25, 50, 75])
    return NodeStats(node, setting, float(np.mean(values)), values.size / total,
                     int(values.size), float(np.std(values)), (float(q1), float(med), float(q3)))


def node_stats(corpus) -> dict:
    """NodeId -> NodeStats for every unit of the model (present or not)."""
    cm = corpus if isinstance(corpus, CorpusMatrix) else CorpusMatrix(corpus)
    out = {}
    for flat in range(cm.num_units):
        node = cm.node_at(flat)
        out[node] = _stats_for(node, cm.setting, cm.values[cm.present[:, flat], flat], len(cm))
    return out


def setting_delta(node: NodeId, desired: NodeStats, undesired: NodeStats, p=1) -> float:
    """||mean_undesired - mean_desired||_p; every p agrees for scalar activations."""
    if desired.node != node or undesired.node != node:
        raise ConfigurationError("statistics belong to a different node")
    diff = np.atleast_1d(undesired.mean_activation - desired.mean_activation)
    return float(np.linalg.norm(diff, ord=np.inf if p in ("inf", float("inf")) else p))


@dataclass(frozen=True)
class BoxStats:
    min: float
    q1: float
    median: float
    q3: float
    max: float

    @classmethod
    def of(cls, values) -> Optional["BoxStats"]:
        values = np.asarray(values, dtype=np.float64)
        if values.size == 0:
            return None
        lo, q1, med, q3, hi = np.percentile(values, [0, 25, 50, 75, 100])
        return cls(float(lo), float(q1), float(med), float(q3), float(hi))


@dataclass(frozen=True)
class LayerSummary:
    layer_index: int
    setting: str
    mean_box: Optional[BoxStats]  # over per-node means of nodes present at least once
    frequency_box: BoxStats  # over per-node frequencies of every unit
    node_means: np.ndarray
    node_frequencies: np.ndarray


def layer_summaries(corpora: Mapping[str, object]) -> list:
    if not corpora:
        raise ConfigurationError("need at least one setting")
    out = []
    for setting, corpus in corpora.items():
        cm = corpus if isinstance(corpus, CorpusMatrix) else CorpusMatrix(corpus, setting)
        stats = node_stats(cm)
        for layer, width in enumerate(cm.unit_counts):
            rows = [stats[NodeId(layer, u)] for u in range(width)]
            means = np.array([s.mean_activation for s in rows if s.count > 0])
            freqs = np.array([s.activation_frequency for s in rows])
            out.append(LayerSummary(layer, setting, BoxStats.of(means), BoxStats.of(freqs),
                                    means, freqs))
    return out


NODE_FIELDS = ["layer", "unit", "setting", "mean_activation", "activation_frequency",
               "count", "stddev", "q1", "median", "q3"]
SUMMARY_FIELDS = ["layer", "setting"] + [f"{k}_{s}" for k in ("mean", "freq")
                                         for s in ("min", "q1", "median", "q3", "max")]


def write_node_stats_csv(stats_by_setting: Mapping[str, dict], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(NODE_FIELDS)
        for setting, stats in stats_by_setting.items():
            for node in sorted(stats):
                s = stats[node]
                w.writerow([node.layer_index, node.unit_index, setting, repr(s.mean_activation),
                            repr(s.activation_frequency), s.count, repr(s.stddev),
                            *(repr(q) for q in s.quartiles)])


def write_layer_summaries_csv(summaries: Sequence[LayerSummary], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    def cells(box):
        if box is None:
            return [""] * 5
        return [repr(box.min), repr(box.q1), repr(box.median), repr(box.q3), repr(box.max)]

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_FIELDS)
        for s in summaries:
            w.writerow([s.layer_index, s.setting, *cells(s.mean_box), *cells(s.frequency_box)])


def read_node_stats_csv(path) -> dict:
    """Inverse of :func:`write_node_stats_csv`: setting -> {NodeId: NodeStats}."""
    out: dict = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            node = NodeId(int(row["layer"]), int(row["unit"]))
            out.setdefault(row["setting"], {})[node] = NodeStats(
                node, row["setting"], float(row["mean_activation"]),
                float(row["activation_frequency"]), int(row["count"]), float(row["stddev"]),
                (float(row["q1"]), float(row["median"]), float(row["q3"])))
    return out
