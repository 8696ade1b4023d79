"""Scoring and selecting repair actions: Tradeoff_Score, cumulative filtering, layer ordering."""
from __future__ import annotations

import csv
import itertools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import ConfigurationError
from .nn_core import Model, forward_batch, run_layers
from .repair import RepairAction, make_hook

log = logging.getLogger(__name__)

CONVERGENCE_TOL = 1e-9
MAX_EXHAUSTIVE_LAYERS = 7


@dataclass(frozen=True)
class TradeoffInput:
    acc_nominal_before: float
    acc_nominal_after: float
    targets: tuple  # ((before, after), ...)


def tradeoff_score(inp: TradeoffInput) -> float:
    """Nominal accuracy change plus the mean accuracy change over target settings."""
    n = len(inp.targets)
    if n == 0:
        raise ConfigurationError("tradeoff score needs at least one target setting")
    gain = sum(after - before for before, after in inp.targets) / n
    return (inp.acc_nominal_after - inp.acc_nominal_before) + gain


# ------------------------------------------------------------------ evaluator


@dataclass
class EvalSet:
    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y)
        if len(self.y) == 0:
            raise ConfigurationError("empty evaluation set")


class RepairEvaluator:
    """Accuracy of a patched model on the nominal and target sets.

    Unpatched layer outputs are cached, so a patch only re-runs the network
    from its first touched layer onwards.
    """

    def __init__(self, model: Model, nominal: EvalSet, targets: Mapping[str, EvalSet],
                 tau: float = 0.0):
        if not targets:
            raise ConfigurationError("need at least one target evaluation set")
        self.model = model
        self.tau = tau
        self.sets = {"nominal": nominal, **{f"target:{k}": v for k, v in targets.items()}}
        self.target_names = list(targets)
        self._outs = {}
        self.base = {}
        for name, s in self.sets.items():
            logits, outs = forward_batch(model, s.X)
            self._outs[name] = outs
            self.base[name] = self._acc(logits, s.y)
        self.calls = 0

    @staticmethod
    def _acc(logits, y) -> float:
        return int(np.sum(np.argmax(logits, axis=1) == y)) / len(y)

    def accuracies(self, actions: Sequence[RepairAction]) -> dict:
        if not actions:
            return dict(self.base)
        self.calls += 1
        hook = make_hook(self.model, actions, self.tau)
        start = hook.layers[0]
        out = {}
        for name, s in self.sets.items():
            h = hook(start, self._outs[name][start])
            logits, _ = run_layers(self.model, h, start + 1, hook, record=False)
            out[name] = self._acc(logits, s.y)
        return out

    def tradeoff(self, accs: dict) -> float:
        targets = tuple((self.base[f"target:{t}"], accs[f"target:{t}"])
                        for t in self.target_names)
        return tradeoff_score(TradeoffInput(self.base["nominal"], accs["nominal"], targets))

    def cum_ts(self, actions: Sequence[RepairAction]) -> float:
        return self.tradeoff(self.accuracies(actions)) if actions else 0.0


def _node_key(a) -> tuple:
    node = getattr(a, "node", None)
    return (node.layer_index, node.unit_index) if node is not None else ()


@dataclass(frozen=True)
class ScoredAction:
    action: RepairAction
    ts: float

    @property
    def rejected(self) -> bool:
        return self.ts <= 0


def sort_by_ts(scored: Sequence[ScoredAction]) -> list:
    """Descending TS; ties broken by (layer, unit)."""
    return sorted(scored, key=lambda s: (-s.ts, _node_key(s.action)))


def evaluate_single_actions(evaluator, actions: Sequence[RepairAction]) -> list:
    """TS of each action applied alone, sorted best first."""
    return sort_by_ts([ScoredAction(a, evaluator.cum_ts([a])) for a in actions])


# ------------------------------------------------------------ cumulative loop


@dataclass
class TraceRow:
    iteration: int
    action_index: int
    action: RepairAction
    ts: float
    cum_ts_after: float
    status: str


@dataclass
class EvaluationTrace:
    single_ts: list = field(default_factory=list)  # ScoredAction, input order
    trajectory: list = field(default_factory=list)  # Cum_TS after each accepted action
    accepted: list = field(default_factory=list)
    queued: list = field(default_factory=list)
    rejected: list = field(default_factory=list)
    iterations: int = 0
    rows: list = field(default_factory=list)

    @property
    def final_cum_ts(self) -> float:
        return self.trajectory[-1] if self.trajectory else 0.0


def cumulative_loop(scored: Sequence, evaluator, max_iters: int = 10) -> EvaluationTrace:
    """Apply actions in order, keeping each only if Cum_TS does not drop.

    ``scored`` holds ScoredAction (or bare actions, then scored here), best
    first. Dropped actions are queued and retried on top of the accepted set
    in later iterations, re-sorted by their marginal TS there.
    """
    if max_iters < 1:
        raise ConfigurationError("max_iters must be >= 1")
    items = [s if isinstance(s, ScoredAction) else ScoredAction(s, evaluator.cum_ts([s]))
             for s in scored]
    trace = EvaluationTrace(single_ts=list(items))
    index = {id(s.action): i for i, s in enumerate(items)}
    pending = []
    for s in items:
        if s.rejected:
            trace.rejected.append(s.action)
            trace.rows.append(TraceRow(1, index[id(s.action)], s.action, s.ts, float("nan"),
                                       "rejected"))
        else:
            pending.append(s)
    cum = 0.0
    while pending and trace.iterations < max_iters:
        trace.iterations += 1
        it = trace.iterations
        if it > 1:
            pending = sort_by_ts([ScoredAction(s.action,
                                               evaluator.cum_ts(trace.accepted + [s.action]) - cum)
                                  for s in pending])
        start = cum
        queue = []
        for s in pending:
            c = evaluator.cum_ts(trace.accepted + [s.action])
            if c >= cum:
                trace.accepted.append(s.action)
                cum = c
                trace.trajectory.append(c)
                status = "accepted"
            else:
                queue.append(s)
                status = "queued"
            trace.rows.append(TraceRow(it, index[id(s.action)], s.action, s.ts, c, status))
        pending = queue
        if it > 1 and cum - start < CONVERGENCE_TOL:
            break
    trace.queued = [s.action for s in pending]
    return trace


# --------------------------------------------------------- layer order search


@dataclass
class LayerSearchResult:
    ordering: tuple
    cum_ts: float
    included: tuple
    actions: list


def _run_order(order, per_layer, evaluator):
    cur, cum, included = [], 0.0, []
    for layer in order:
        c = evaluator.cum_ts(cur + list(per_layer[layer]))
        if c >= cum:
            cur = cur + list(per_layer[layer])
            cum = c
            included.append(layer)
    return cum, tuple(included), cur


def layer_order_search(per_layer: Mapping[int, Sequence[RepairAction]], evaluator,
                       mode: str = "exhaustive") -> LayerSearchResult:
    """Order in which per-layer accepted sets are stacked; a set is kept iff Cum_TS does not drop."""
    layers = sorted(per_layer)
    if mode == "exhaustive":
        if len(layers) > MAX_EXHAUSTIVE_LAYERS:
            raise ConfigurationError(
                f"exhaustive search over {len(layers)} layers; use greedy mode")
        best = None
        for order in itertools.permutations(layers):
            cum, included, acts = _run_order(order, per_layer, evaluator)
            if best is None or cum > best.cum_ts:
                best = LayerSearchResult(order, cum, included, acts)
        return best or LayerSearchResult((), 0.0, (), [])
    if mode == "greedy":
        remaining, order = list(layers), []
        cur, cum, included = [], 0.0, []
        while remaining:
            scores = [(evaluator.cum_ts(cur + list(per_layer[l])), l) for l in remaining]
            c, layer = max(scores, key=lambda t: (t[0], -t[1]))
            remaining.remove(layer)
            order.append(layer)
            if c >= cum:
                cur = cur + list(per_layer[layer])
                cum = c
                included.append(layer)
        return LayerSearchResult(tuple(order), cum, tuple(included), cur)
    raise ConfigurationError(f"unknown search mode {mode!r}")


# ------------------------------------------------------------------- reports


def mre_report(evaluator: RepairEvaluator, actions: Sequence[RepairAction]) -> dict:
    """Accuracy per setting before and after repair, plus action counts per layer."""
    after = evaluator.accuracies(list(actions))
    per_layer: dict = {}
    for a in actions:
        row = per_layer.setdefault(str(a.node.layer_index),
                                   {"N_n": 0, "N_p": 0, "N_r": 0, "total": 0})
        row[a.priority_class] += 1
        row["total"] += 1
    return {
        "nominal": {"before": evaluator.base["nominal"], "after": after["nominal"]},
        "targets": {t: {"before": evaluator.base[f"target:{t}"], "after": after[f"target:{t}"]}
                    for t in evaluator.target_names},
        "cum_ts": evaluator.tradeoff(after) if actions else 0.0,
        "num_actions": len(actions),
        "actions_per_layer": dict(sorted(per_layer.items(), key=lambda kv: int(kv[0]))),
    }


TRACE_FIELDS = ["iteration", "action_index", "layer", "unit", "kind", "TS", "cum_ts_after",
                "status"]


def write_trace_csv(rows: Sequence[TraceRow], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_FIELDS)
        for r in rows:
            w.writerow([r.iteration, r.action_index, r.action.node.layer_index,
                        r.action.node.unit_index, r.action.kind, repr(r.ts),
                        repr(r.cum_ts_after), r.status])


def read_trace_csv(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_report(report: dict, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
