"""Pipeline configuration: a flat ``key = value`` file with dotted section keys.

Every key has a typed default below; a file or command-line override only
needs to mention the keys it changes.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional

from .attacks import AttackConfig
from .data import DatasetSpec
from .errors import ConfigurationError
from .repair import ReferenceAggregator

ATTACKS = ("benign", "fgsm", "pgd", "spsa", "bit_flip")

DEFAULTS = {
    "seed": 0,
    "output_dir": "out",
    "model.path": "",
    "model.hidden": "350,50",
    "model.epochs": 5,
    "model.lr": 0.005,
    "model.batch_size": 32,
    "dataset.kind": "synthetic_blobs",
    "dataset.images": "",
    "dataset.labels": "",
    "dataset.limit": 0,
    "dataset.num_samples": 3000,
    "dataset.dims": 784,
    "dataset.num_classes": 4,
    "dataset.separation": 0.8,
    "dataset.noise": 0.2,
    "dataset.density": 0.2,
    "settings": "benign:benign,fgsm:fgsm",
    "attack.eps": 0.3,
    "attack.steps": 40,
    "attack.step_size": 0.0,
    "attack.spsa_samples": 64,
    "attack.spsa_iters": 100,
    "attack.flip_budget": 20,
    "ipg.tau": 0.0,
    "ipg.edges": "auto",
    "characterize.percentile": 90.0,
    "gnn.hidden_dim": 16,
    "gnn.epochs": 200,
    "gnn.lr": 0.01,
    "gnn.optimizer": "adam",
    "gnn.max_graphs": 250,
    "gnn.test_fraction": 0.2,
    "attribution.max_graphs": 50,
    "repair.p": "1",
    "repair.alpha": 1.0,
    "repair.density_std_threshold": 0.15,
    "repair.kde_grid_points": 256,
    "repair.use_influence": True,
    "repair.layers": "hidden",
    "evaluation.split": "0.6,0.2,0.2",
    "evaluation.max_iters": 10,
    "evaluation.search": "exhaustive",
}

# keys that do not affect results and are left out of the config digest
NON_SEMANTIC = ("output_dir",)


def _coerce(key: str, raw):
    default = DEFAULTS[key]
    if isinstance(raw, type(default)) and not isinstance(raw, str):
        return raw
    text = str(raw).strip()
    try:
        if isinstance(default, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigurationError(f"{key}: cannot parse {text!r} as {type(default).__name__}") from None
    return text


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"config line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigurationError(f"config line {lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


def resolve(file_values: Optional[Mapping] = None, overrides: Optional[Mapping] = None) -> dict:
    flat = dict(DEFAULTS)
    for source in (file_values or {}, overrides or {}):
        for k, v in source.items():
            if k not in DEFAULTS:
                raise ConfigurationError(f"unknown config key {k!r}")
            flat[k] = _coerce(k, v)
    return flat


def format_config(flat: Mapping) -> str:
    return "".join(f"{k} = {flat[k]}\n" for k in sorted(flat))


@dataclass(frozen=True)
class Setting:
    name: str
    attack: str

    @property
    def nominal(self) -> bool:
        return self.attack == "benign"


def _floats(text: str) -> list:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ConfigurationError(f"expected comma-separated numbers, got {text!r}") from None


@dataclass
class PipelineConfig:
    flat: dict

    def __post_init__(self):
        self.flat = resolve(self.flat)
        f = self.flat
        self.seed = f["seed"]
        self.output_dir = Path(f["output_dir"])
        self.model_path = f["model.path"] or None
        self.hidden = [int(h) for h in _floats(f["model.hidden"])]
        if not self.hidden or min(self.hidden) < 1:
            raise ConfigurationError("model.hidden needs positive layer widths")
        self.dataset = DatasetSpec(
            f["dataset.kind"], f["dataset.images"] or None, f["dataset.labels"] or None,
            f["dataset.num_samples"], f["dataset.dims"], f["dataset.num_classes"],
            f["dataset.separation"], f["dataset.noise"], f["dataset.density"], self.seed)
        self.settings = self._parse_settings(f["settings"])
        self.attack = AttackConfig(f["attack.eps"], f["attack.steps"],
                                   f["attack.step_size"] or None, "Linf", self.seed,
                                   f["attack.spsa_samples"], f["attack.spsa_iters"],
                                   f["attack.flip_budget"])
        self.aggregator = ReferenceAggregator(f["repair.density_std_threshold"], "silverman",
                                              f["repair.kde_grid_points"], self.seed)
        self.split = _floats(f["evaluation.split"])
        if len(self.split) != 3 or any(s < 0 for s in self.split) or (
                abs(sum(self.split) - 1.0) > 1e-9):
            raise ConfigurationError(
                "evaluation.split needs three non-negative fractions (train, characterize, "
                "evaluate) summing to 1")
        if not 0 <= f["repair.alpha"] <= 1:
            raise ConfigurationError("repair.alpha must lie in [0, 1]")
        if f["repair.p"] not in ("1", "2", "inf"):
            raise ConfigurationError("repair.p must be 1, 2 or inf")
        if f["evaluation.search"] not in ("exhaustive", "greedy"):
            raise ConfigurationError("evaluation.search must be exhaustive or greedy")
        if f["ipg.edges"] not in ("auto", "explicit", "implicit"):
            raise ConfigurationError("ipg.edges must be auto, explicit or implicit")
        if not 0 < f["characterize.percentile"] <= 100:
            raise ConfigurationError("characterize.percentile must be in (0, 100]")
        for key in ("gnn.max_graphs", "attribution.max_graphs", "evaluation.max_iters",
                    "gnn.epochs", "model.epochs"):
            if f[key] < 1:
                raise ConfigurationError(f"{key} must be >= 1")

    @staticmethod
    def _parse_settings(text: str) -> list:
        settings = []
        for item in (t.strip() for t in text.split(",")):
            if not item:
                continue
            name, _, attack = item.partition(":")
            name, attack = name.strip(), (attack.strip() or name.strip())
            if attack not in ATTACKS:
                raise ConfigurationError(f"setting {name!r}: unknown attack {attack!r}")
            settings.append(Setting(name, attack))
        names = [s.name for s in settings]
        if len(set(names)) != len(names):
            raise ConfigurationError("setting names must be unique")
        if sum(s.nominal for s in settings) != 1:
            raise ConfigurationError("exactly one setting must be the benign (nominal) one")
        if len(settings) < 2:
            raise ConfigurationError("need at least one target (attack) setting")
        return settings

    @property
    def nominal(self) -> Setting:
        return next(s for s in self.settings if s.nominal)

    @property
    def targets(self) -> list:
        return [s for s in self.settings if not s.nominal]

    @property
    def p(self):
        return float("inf") if self.flat["repair.p"] == "inf" else int(self.flat["repair.p"])

    def __getitem__(self, key):
        return self.flat[key]

    def digest(self) -> str:
        semantic = {k: v for k, v in self.flat.items() if k not in NON_SEMANTIC}
        return hashlib.sha256(json.dumps(semantic, sort_keys=True).encode()).hexdigest()

    @classmethod
    def load(cls, path=None, overrides: Optional[Mapping] = None) -> "PipelineConfig":
        values = {}
        if path is not None:
            try:
                values = parse_config_text(Path(path).read_text())
            except OSError as exc:
                raise ConfigurationError(f"cannot read config {path}: {exc}") from None
        return cls(resolve(values, overrides))
