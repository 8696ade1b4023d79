"""Repair-action generation and inference-time application.

Actions never touch weights: they are applied through a forward hook that
patches post-activation values of selected hidden units.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .empirical import CorpusMatrix
from .errors import ConfigurationError, ConsistencyError, DataFormatError, DomainError
from .ipg import NodeId, activated_mask
from .nn_core import ActivationTrace, Model, forward_batch
from .structural import InfluentialSets

NULLIFY = "Nullify"
SHIFT = "ShiftToReference"
PRIORITY_CLASSES = ("N_n", "N_p", "N_r")


@dataclass(frozen=True)
class RepairAction:
    node: NodeId
    kind: str
    reference: Optional[float] = None
    beta: float = 0.0  # unused by Nullify
    alpha: float = 1.0
    priority_class: str = "N_r"

    def __post_init__(self):
        if self.kind not in (NULLIFY, SHIFT):
            raise ConfigurationError(f"unknown action kind {self.kind!r}")
        if self.kind == NULLIFY and self.reference is not None:
            raise ConfigurationError("Nullify actions carry no reference")
        if self.kind == SHIFT and (self.reference is None or not math.isfinite(self.reference)):
            raise ConfigurationError("ShiftToReference needs a finite reference")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError("alpha must lie in [0, 1]")
        if not self.beta >= 0:
            raise ConfigurationError("beta must be >= 0")
        if self.priority_class not in PRIORITY_CLASSES:
            raise ConfigurationError(f"unknown priority class {self.priority_class!r}")

    @property
    def sort_key(self):
        return (self.priority_class, self.node.layer_index, self.node.unit_index)

    def to_dict(self) -> dict:
        return {"layer": self.node.layer_index, "unit": self.node.unit_index, "kind": self.kind,
                "reference": self.reference,
                "beta": self.beta if math.isfinite(self.beta) else "inf",
                "alpha": self.alpha, "priority_class": self.priority_class}

    @classmethod
    def from_dict(cls, d: dict) -> "RepairAction":
        beta = d.get("beta", 0.0)
        return cls(NodeId(int(d["layer"]), int(d["unit"])), d["kind"], d.get("reference"),
                   float("inf") if beta == "inf" else float(beta), float(d.get("alpha", 1.0)),
                   d.get("priority_class", "N_r"))


@dataclass(frozen=True)
class ReferenceAggregator:
    density_std_threshold: float = 0.15
    kde_bandwidth_rule: str = "silverman"
    kde_grid_points: int = 256
    seed: int = 0

    def __post_init__(self):
        if not self.density_std_threshold > 0:
            raise ConfigurationError("density_std_threshold must be > 0")
        if self.kde_grid_points < 16:
            raise ConfigurationError("kde_grid_points must be >= 16")
        if self.kde_bandwidth_rule.lower() != "silverman":
            raise ConfigurationError("only the Silverman bandwidth rule is supported")


# ------------------------------------------------------------ reference values


def normalized_spread(values) -> float:
    """Standard deviation after min-max scaling to [0, 1] over a range that includes 0.

    Anchoring the range at 0 (the floor of a ReLU unit) keeps a tight cluster
    far from 0 tight after scaling; plain min-max would stretch any cluster
    to fill [0, 1].
    """
    v = np.asarray(values, dtype=np.float64)
    lo, hi = min(v.min(), 0.0), max(v.max(), 0.0)
    if hi == lo:
        return 0.0
    return float(np.std((v - lo) / (hi - lo)))


def silverman_bandwidth(values) -> float:
    """0.9 * min(sd, IQR/1.34) * n^(-1/5), falling back to sd when the IQR is 0."""
    v = np.asarray(values, dtype=np.float64)
    sd = float(np.std(v, ddof=1)) if v.size > 1 else 0.0
    q1, q3 = np.percentile(v, [25, 75])
    scale = min(sd, (q3 - q1) / 1.34)
    if scale <= 0:
        scale = sd if sd > 0 else (abs(float(v[0])) or 1.0)
    return 0.9 * scale * v.size ** -0.2


def kde_modes(values, grid_points: int = 256):
    """Local maxima of a Gaussian KDE evaluated on a uniform grid over [min, max].

    Returns (mode locations, their densities, bandwidth). Plateaus count once,
    at their first grid point; grid endpoints qualify when they beat their one
    neighbour.
    """
    v = np.asarray(values, dtype=np.float64)
    h = silverman_bandwidth(v)
    grid = np.linspace(v.min(), v.max(), grid_points)
    z = (grid[:, None] - v[None, :]) / h
    dens = np.exp(-0.5 * z * z).sum(axis=1) / (v.size * h * math.sqrt(2 * math.pi))
    left = np.concatenate([[-np.inf], dens[:-1]])
    right = np.concatenate([dens[1:], [-np.inf]])
    peak = (dens > left) & (dens >= right)
    return grid[peak], dens[peak], h


def reference_dist_agg(values, cfg: ReferenceAggregator = ReferenceAggregator(),
                       rng: Optional[np.random.Generator] = None) -> float:
    """Mean for dense distributions; otherwise a density-weighted random KDE mode."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise DomainError("reference of an empty value set")
    if v.min() == v.max():
        return float(v[0])
    if normalized_spread(v) <= cfg.density_std_threshold:
        return float(np.mean(v))
    modes, dens, _ = kde_modes(v, cfg.kde_grid_points)
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    return float(modes[rng.choice(len(modes), p=dens / dens.sum())])


def compute_beta(desired_values, undesired_values) -> float:
    """Mean over undesired activations of |a - mean(desired)|."""
    d = np.asarray(desired_values, dtype=np.float64)
    u = np.asarray(undesired_values, dtype=np.float64)
    if d.size == 0 or u.size == 0:
        raise DomainError("beta needs activations from both settings")
    return float(np.mean(np.abs(u - np.mean(d))))


# ------------------------------------------------------------ action selection


@dataclass
class ActionSets:
    N_n: list = field(default_factory=list)
    N_p: list = field(default_factory=list)
    N_r: list = field(default_factory=list)

    def all(self) -> list:
        return sorted(self.N_n + self.N_p + self.N_r, key=lambda a: a.sort_key)

    def nodes(self, cls: str) -> set:
        return {a.node for a in getattr(self, cls)}


def _node_mean(cm: CorpusMatrix, node: NodeId) -> float:
    vals = cm.node_values(node)
    return float(np.mean(vals)) if vals.size else 0.0


def generate_actions(desired: CorpusMatrix, undesired: CorpusMatrix,
                     influence: Optional[InfluentialSets] = None, p=1, alpha: float = 1.0,
                     cfg: ReferenceAggregator = ReferenceAggregator(),
                     layers: Optional[Sequence[int]] = None) -> ActionSets:
    """Partition hidden units into N_n / N_p / N_r and build their actions.

    ``layers`` defaults to every hidden layer (neither input nor logits).
    Without ``influence`` every unit whose mean activation differs across the
    settings is a regular candidate.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ConfigurationError("alpha must lie in [0, 1]")
    if tuple(desired.unit_counts) != tuple(undesired.unit_counts) or (
            desired.model_id != undesired.model_id):
        raise ConsistencyError("desired and undesired statistics come from different models")
    counts = desired.unit_counts
    if layers is None:
        layers = range(1, len(counts) - 1)
    infl_d = infl_u = None
    if influence is not None:
        infl_d = influence.desired_nodes
        infl_u = set(influence.undesired_nodes)
        for a, b in influence.undesired_edges:
            infl_u.update((a, b))
    freq_d, freq_u = desired.frequencies(), undesired.frequencies()
    out = ActionSets()
    for layer in layers:
        if not 0 <= layer < len(counts):
            raise ConfigurationError(f"layer {layer} out of range")
        for unit in range(counts[layer]):
            node = NodeId(layer, unit)
            flat = desired.flat(node)
            if freq_d[flat] == 0 and freq_u[flat] > 0:
                out.N_n.append(RepairAction(node, NULLIFY, alpha=alpha, priority_class="N_n"))
                continue
            delta = float(np.linalg.norm(
                [_node_mean(undesired, node) - _node_mean(desired, node)],
                ord=np.inf if p in ("inf", float("inf")) else p))
            if delta <= 0:
                continue
            if infl_u is None:
                cls = "N_r"
            elif node not in infl_u:
                continue
            else:
                cls = "N_r" if node in infl_d else "N_p"
            d_vals, u_vals = desired.node_values(node), undesired.node_values(node)
            if d_vals.size == 0 or u_vals.size == 0:
                continue
            rng = np.random.default_rng([cfg.seed, layer, unit])
            ref = reference_dist_agg(d_vals, cfg, rng)
            action = RepairAction(node, SHIFT, ref, compute_beta(d_vals, u_vals), alpha, cls)
            getattr(out, cls).append(action)
    return out


# ---------------------------------------------------------------- application


class _LayerPatch:
    __slots__ = ("null_units", "shift_units", "refs", "betas", "alphas")

    def __init__(self, actions):
        nulls = [a.node.unit_index for a in actions if a.kind == NULLIFY]
        shifts = [a for a in actions if a.kind == SHIFT]
        self.null_units = np.array(nulls, dtype=np.int64)
        self.shift_units = np.array([a.node.unit_index for a in shifts], dtype=np.int64)
        self.refs = np.array([a.reference for a in shifts], dtype=np.float64)
        self.betas = np.array([a.beta for a in shifts], dtype=np.float64)
        self.alphas = np.array([a.alpha for a in shifts], dtype=np.float64)


def make_hook(model: Model, actions: Sequence[RepairAction], tau: float = 0.0):
    """Forward hook applying ``actions``; shifts touch only units that fired for the sample."""
    counts = model.unit_counts
    by_layer: dict = {}
    for a in actions:
        l, u = a.node.layer_index, a.node.unit_index
        if not (0 <= l < len(counts) and 0 <= u < counts[l]):
            raise ConfigurationError(f"action targets nonexistent node ({l}, {u})")
        by_layer.setdefault(l, []).append(a)
    # one unit may carry several actions; apply them as successive patches
    patches = {}
    for l, acts in by_layer.items():
        rounds, seen = [], {}
        for a in acts:
            k = seen.get(a.node.unit_index, 0)
            seen[a.node.unit_index] = k + 1
            while len(rounds) <= k:
                rounds.append([])
            rounds[k].append(a)
        patches[l] = [_LayerPatch(r) for r in rounds]

    def hook(layer: int, out: np.ndarray) -> np.ndarray:
        plist = patches.get(layer)
        if not plist:
            return out
        out = out.copy()
        for p in plist:
            if p.shift_units.size:
                a = out[:, p.shift_units]
                delta = a - p.refs
                admit = activated_mask(model, layer, a, tau) & (p.betas >= np.abs(delta))
                out[:, p.shift_units] = np.where(admit, a - p.alphas * delta, a)
            if p.null_units.size:
                out[:, p.null_units] = 0.0
        return out

    hook.layers = sorted(patches)
    return hook


def apply_actions(model: Model, actions: Sequence[RepairAction], x, tau: float = 0.0):
    """Patched inference: (logits, ActivationTrace) for one input or (logits, outs) for a batch."""
    hook = make_hook(model, actions, tau)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1 or (x.ndim > 1 and x.size == model.input_dim):
        logits, outs = forward_batch(model, x.reshape(1, -1), hook)
        return logits[0], ActivationTrace([o[0] for o in outs])
    return forward_batch(model, x, hook)


# -------------------------------------------------------------------- file I/O


def save_actions(actions: Sequence[RepairAction], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    docs = [a.to_dict() for a in sorted(actions, key=lambda a: a.sort_key)]
    path.write_text(json.dumps(docs, indent=1, sort_keys=True) + "\n")


def load_actions(path) -> list:
    try:
        docs = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: {exc}") from None
    if not isinstance(docs, list):
        raise DataFormatError(f"{path}: expected a JSON array of actions")
    try:
        return [RepairAction.from_dict(d) for d in docs]
    except (KeyError, TypeError, ValueError) as exc:
        raise DataFormatError(f"{path}: bad action record ({exc})") from None
