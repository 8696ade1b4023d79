"""Staged pipeline. Every stage reads its inputs from and writes its outputs to
the output directory, so any stage can be re-run on its own."""
from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .attacks import run_attack
from .config import PipelineConfig, format_config
from .data import Dataset, load_dataset, split
from .empirical import CorpusMatrix, layer_summaries, node_stats, write_layer_summaries_csv, \
    write_node_stats_csv
from .errors import ConfigurationError, IpgError, StageError
from .ipg import ModelEdges, extract_corpus, load_corpus, save_corpus
from .nn_core import accuracy, init_mlp, load_model, save_model, train_sgd
from .repair import generate_actions, load_actions, save_actions
from .structural import AttributionSummary, attribute, influential_sets, load_gnn, \
    load_influential, save_gnn, save_influential, train_gnn, write_attribution_csv

log = logging.getLogger(__name__)

STAGES = ("train", "attack", "extract-ipg", "characterize", "train-gnn", "attribute",
          "gen-actions", "eval-actions", "report")

# above this many model edges corpora store edges implicitly (re-derived from weights)
IMPLICIT_EDGE_THRESHOLD = 50_000


class Workspace:
    def __init__(self, root):
        self.root = Path(root)

    def path(self, rel: str) -> Path:
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def save_array(self, rel: str, arr) -> None:
        with open(self.path(rel), "wb") as fh:
            np.save(fh, np.asarray(arr), allow_pickle=False)

    def load_array(self, rel: str) -> np.ndarray:
        return np.load(self.root / rel, allow_pickle=False)

    def dataset(self, split_name: str, setting: str = None) -> Dataset:
        X = self.load_array(f"data/{setting or 'benign'}_{split_name}_X.npy")
        y = self.load_array(f"data/{split_name}_y.npy")
        return Dataset(X, y)

    def model(self):
        return load_model(self.root / "model.json")

    def corpus(self, setting: str, model=None):
        return load_corpus(self.root / "corpora" / f"{setting}.ipgs", model)


# -------------------------------------------------------------------- stages


def stage_train(cfg: PipelineConfig, ws: Workspace) -> dict:
    ds = load_dataset(cfg.dataset)
    limit = cfg["dataset.limit"]
    if limit:
        ds = ds.subset(np.arange(min(limit, len(ds))))
    parts = split(ds, cfg.split, seed=cfg.seed)
    for name, part in zip(("train", "char", "eval"), parts):
        if len(part) == 0:
            raise ConfigurationError(f"split {name!r} is empty")
        ws.save_array(f"data/benign_{name}_X.npy", part.X)
        ws.save_array(f"data/{name}_y.npy", part.y)
    train, _, test = parts
    num_classes = int(max(ds.y.max() + 1, cfg.dataset.num_classes
                          if cfg.dataset.kind != "mnist_idx" else 0))
    if cfg.model_path:
        model = load_model(cfg.model_path)
    else:
        model = init_mlp(ds.X.shape[1], cfg.hidden, num_classes, seed=cfg.seed)
        model = train_sgd(model, train.X, train.y, lr=cfg["model.lr"],
                          batch_size=cfg["model.batch_size"], epochs=cfg["model.epochs"],
                          seed=cfg.seed)
    save_model(model, ws.path("model.json"))
    return {"test_accuracy": accuracy(model, test.X, test.y)}


def stage_attack(cfg: PipelineConfig, ws: Workspace) -> dict:
    model = ws.model()
    out = {}
    for s in cfg.targets:
        for part in ("char", "eval"):
            ds = ws.dataset(part)
            adv = run_attack(s.attack, model, ds.X, ds.y, cfg.attack)
            ws.save_array(f"data/{s.name}_{part}_X.npy", adv)
            if part == "eval":
                out[s.name] = accuracy(model, adv, ds.y)
        meta = {"attack": s.attack, "eps": cfg.attack.eps, "steps": cfg.attack.steps,
                "step_size": cfg.attack.step_size, "seed": cfg.attack.seed}
        ws.path(f"data/{s.name}_meta.json").write_text(json.dumps(meta, sort_keys=True) + "\n")
    return {"attacked_accuracy": out}


def _edge_mode(cfg, model) -> str:
    mode = cfg["ipg.edges"]
    if mode != "auto":
        return mode
    c = model.unit_counts
    total = sum(a * b for a, b in zip(c[:-1], c[1:]))
    return "implicit" if total > IMPLICIT_EDGE_THRESHOLD else "explicit"


def stage_extract(cfg: PipelineConfig, ws: Workspace) -> dict:
    model = ws.model()
    mode = _edge_mode(cfg, model)
    sizes = {}
    for s in cfg.settings:
        ds = ws.dataset("char", s.name)
        ids = [f"{s.name}-{i}" for i in range(len(ds))]
        corpus = extract_corpus(model, ds.X, s.name, ids, cfg["ipg.tau"])
        save_corpus(corpus, ws.path(f"corpora/{s.name}.ipgs"), edges=mode)
        sizes[s.name] = len(corpus)
    return {"corpus_sizes": sizes, "edges": mode}


def _matrices(cfg, ws, model):
    desired = CorpusMatrix(ws.corpus(cfg.nominal.name, model))
    graphs = [g for s in cfg.targets for g in ws.corpus(s.name, model)]
    undesired = CorpusMatrix(graphs, setting="undesired")
    return desired, undesired


def stage_characterize(cfg: PipelineConfig, ws: Workspace) -> dict:
    model = ws.model()
    mats = {s.name: CorpusMatrix(ws.corpus(s.name, model)) for s in cfg.settings}
    write_node_stats_csv({k: node_stats(m) for k, m in mats.items()},
                         ws.path("stats/node_stats.csv"))
    write_layer_summaries_csv(layer_summaries(mats), ws.path("stats/layer_summary.csv"))
    return {}


def stage_train_gnn(cfg: PipelineConfig, ws: Workspace) -> dict:
    model = ws.model()
    n = cfg["gnn.max_graphs"]
    corpora = {s.name: ws.corpus(s.name, model)[:n] for s in cfg.settings}
    gnn = train_gnn(corpora, cfg["gnn.hidden_dim"], cfg["gnn.epochs"], cfg["gnn.lr"], cfg.seed,
                    cfg["gnn.test_fraction"], cfg["gnn.optimizer"])
    save_gnn(gnn, ws.path("attribution/gnn.json"))
    return {"gnn_heldout_accuracy": gnn.heldout_accuracy}


def stage_attribute(cfg: PipelineConfig, ws: Workspace) -> dict:
    model = ws.model()
    gnn = load_gnn(ws.root / "attribution/gnn.json")
    n = cfg["attribution.max_graphs"]
    summaries = {}
    undesired = AttributionSummary(model.unit_counts)
    for s in cfg.settings:
        summary = AttributionSummary(model.unit_counts)
        for g in ws.corpus(s.name, model)[:n]:
            a = attribute(gnn, g, s.name)
            summary.add(a)
            if not s.nominal:
                undesired.add(a)
        summaries[s.name] = summary
    write_attribution_csv(summaries, ws.path("attribution/node_attribution.csv"))
    sets = influential_sets(summaries[cfg.nominal.name], undesired, cfg["characterize.percentile"])
    save_influential(sets, ws.path("attribution/influential.json"))
    return {"influential": sets.to_dict()["counts"]}


def _repair_layers(cfg, model):
    spec = cfg["repair.layers"].strip()
    if spec == "hidden":
        return list(range(1, len(model.layers) - 1))
    layers = [int(t) for t in spec.split(",") if t.strip()]
    for l in layers:
        if not 0 <= l < len(model.layers):
            raise ConfigurationError(f"repair.layers: no layer {l}")
    return layers


def stage_gen_actions(cfg: PipelineConfig, ws: Workspace) -> dict:
    model = ws.model()
    desired, undesired = _matrices(cfg, ws, model)
    influence = load_influential(ws.root / "attribution/influential.json") \
        if cfg["repair.use_influence"] else None
    sets = generate_actions(desired, undesired, influence, cfg.p, cfg["repair.alpha"],
                            cfg.aggregator, _repair_layers(cfg, model))
    save_actions(sets.all(), ws.path("actions.json"))
    return {"actions": {k: len(getattr(sets, k)) for k in ("N_n", "N_p", "N_r")}}


def _evaluator(cfg, ws, model):
    nominal = ws.dataset("eval")
    targets = {s.name: ev.EvalSet(ws.dataset("eval", s.name).X, nominal.y) for s in cfg.targets}
    return ev.RepairEvaluator(model, ev.EvalSet(nominal.X, nominal.y), targets, cfg["ipg.tau"])


def stage_eval_actions(cfg: PipelineConfig, ws: Workspace) -> dict:
    model = ws.model()
    actions = load_actions(ws.root / "actions.json")
    evaluator = _evaluator(cfg, ws, model)
    scored = ev.evaluate_single_actions(evaluator, actions)
    rows, per_layer, loops = [], {}, {}
    for layer in sorted({s.action.node.layer_index for s in scored}):
        trace = ev.cumulative_loop([s for s in scored if s.action.node.layer_index == layer],
                                   evaluator, cfg["evaluation.max_iters"])
        rows.extend(trace.rows)
        loops[str(layer)] = {"accepted": len(trace.accepted), "queued": len(trace.queued),
                             "rejected": len(trace.rejected), "iterations": trace.iterations,
                             "cum_ts": trace.final_cum_ts}
        if trace.accepted:
            per_layer[layer] = trace.accepted
    result = ev.layer_order_search(per_layer, evaluator, cfg["evaluation.search"])
    ev.write_trace_csv(rows, ws.path("eval/trace.csv"))
    save_actions(result.actions, ws.path("eval/selected_actions.json"))
    search = {"mode": cfg["evaluation.search"], "ordering": list(result.ordering),
              "included": list(result.included), "cum_ts": result.cum_ts, "per_layer": loops}
    ws.path("eval/layer_search.json").write_text(json.dumps(search, indent=1, sort_keys=True)
                                                 + "\n")
    return {"cum_ts": result.cum_ts}


def stage_report(cfg: PipelineConfig, ws: Workspace) -> dict:
    model = ws.model()
    evaluator = _evaluator(cfg, ws, model)
    selected = load_actions(ws.root / "eval/selected_actions.json")
    report = {
        "mre": ev.mre_report(evaluator, selected),
        "candidate_actions": len(load_actions(ws.root / "actions.json")),
        "layer_search": json.loads((ws.root / "eval/layer_search.json").read_text()),
        "gnn_heldout_accuracy": load_gnn(ws.root / "attribution/gnn.json").heldout_accuracy,
        "influential": load_influential(ws.root / "attribution/influential.json")
        .to_dict()["counts"],
    }
    ev.write_report(report, ws.path("report.json"))
    write_manifest(cfg, ws)
    return {"cum_ts": report["mre"]["cum_ts"]}


ARTIFACTS = ("model.json", "actions.json", "eval/trace.csv", "eval/selected_actions.json",
             "eval/layer_search.json", "report.json", "stats/node_stats.csv",
             "stats/layer_summary.csv", "attribution/gnn.json",
             "attribution/node_attribution.csv", "attribution/influential.json")


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(cfg: PipelineConfig, ws: Workspace) -> dict:
    files = list(ARTIFACTS) + [f"corpora/{s.name}.ipgs" for s in cfg.settings] + [
        f"data/{s.name}_meta.json" for s in cfg.targets]
    manifest = {
        "config_digest": cfg.digest(),
        "settings": [s.name for s in cfg.settings],
        "artifacts": {f: _sha256(ws.root / f) for f in sorted(files) if (ws.root / f).exists()},
    }
    ws.path("manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


STAGE_FUNCS = {
    "train": stage_train,
    "attack": stage_attack,
    "extract-ipg": stage_extract,
    "characterize": stage_characterize,
    "train-gnn": stage_train_gnn,
    "attribute": stage_attribute,
    "gen-actions": stage_gen_actions,
    "eval-actions": stage_eval_actions,
    "report": stage_report,
}


def run_stage(name: str, cfg: PipelineConfig) -> dict:
    ws = Workspace(cfg.output_dir)
    ws.root.mkdir(parents=True, exist_ok=True)
    ws.path("config.txt").write_text(format_config(cfg.flat))
    log.info("stage %s", name)
    try:
        return STAGE_FUNCS[name](cfg, ws)
    except (ConfigurationError, StageError):
        raise
    except IpgError as exc:
        if exc.exit_code != 4:
            raise
        raise StageError(name, exc) from exc
    except Exception as exc:  # anything unexpected is a stage failure
        raise StageError(name, exc) from exc


def run_pipeline(cfg: PipelineConfig) -> dict:
    results = {}
    for name in STAGES:
        results[name] = run_stage(name, cfg)
    return results
