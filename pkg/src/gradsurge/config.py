"""Experiment configuration: one JSON document, validated on load.

Precedence when resolving a run's settings: explicit CLI flags, then the
config file, then built-in defaults. The seed additionally falls back to
the ``GRADSURGE_SEED`` environment variable when neither the flag nor the
file provides one.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .bilevel import BiLevelConfig
from .errors import ConfigError
from .graphs import DEFAULT_FRACTIONS
from .models import VARIANTS
from .tasks import AUX_TASKS
from .training import METHODS, TrainConfig

SEED_ENV = "GRADSURGE_SEED"

# one line per field, used for the generated reference
FIELD_DOCS = {
    "method": f"training method, one of {', '.join(METHODS)}",
    "seed": f"master seed for data, split, init and sampling (falls back to ${SEED_ENV})",
    "n_graphs": "number of synthetic graphs to generate",
    "n_nodes_min": "smallest graph size (>= 4)",
    "n_nodes_max": "largest graph size (<= 40)",
    "edge_prob": "independent edge probability before a triangle is planted",
    "data_path": "optional JSON-lines dataset to load instead of generating one",
    "fractions": "train / aux-heldout / valid / test proportions",
    "aux_tasks": f"auxiliary tasks, subset of {', '.join(AUX_TASKS)}",
    "variant": f"encoder variant, one of {', '.join(VARIANTS)}",
    "n_layers": "encoder depth",
    "hidden": "encoder width",
    "alpha": "inner step size for parameters",
    "optimizer": "sgd or adam",
    "batch_size": "graphs per step",
    "epochs": "passes over the labeled training graphs",
    "pretrain_epochs": "auxiliary-only warm-up epochs before adaptation",
    "target_train_size": "use only the first N training graphs for the target task (null = all)",
    "mask_ratio": "fraction of nodes masked by the AM task",
    "n_neg_per_pos": "non-edges sampled per edge by the EP task",
    "eta_kappa": "learning rate of the rotation scalars",
    "kappa_max": "upper clamp of the rotation scalars",
    "w_max": "upper clamp of learned task weights",
    "clamp_w": "clamp task weights to [0, w_max] (false allows negative weights)",
    "gradscale_symmetric": "also shrink auxiliary gradients larger than the target gradient",
    "bilevel": "Neumann steps M, Neumann step beta, outer period r, outer rate eta_w",
    "out_dir": "root directory for run outputs",
}


@dataclass(frozen=True)
class ExperimentConfig:
    method: str = "mtl"
    seed: int = 0
    n_graphs: int = 400
    n_nodes_min: int = 6
    n_nodes_max: int = 16
    edge_prob: float = 0.1
    data_path: str | None = None
    fractions: tuple[float, ...] = DEFAULT_FRACTIONS
    aux_tasks: tuple[str, ...] = ("am", "ep", "ig", "mp")
    variant: str = "message-passing"
    n_layers: int = 3
    hidden: int = 32
    alpha: float = 0.001
    optimizer: str = "sgd"
    batch_size: int = 32
    epochs: int = 100
    pretrain_epochs: int = 0
    target_train_size: int | None = None
    mask_ratio: float = 0.15
    n_neg_per_pos: int = 1
    eta_kappa: float = 0.01
    kappa_max: float = 10.0
    w_max: float = 10.0
    clamp_w: bool = True
    gradscale_symmetric: bool = False
    bilevel: BiLevelConfig = field(default_factory=BiLevelConfig)
    out_dir: str = "."

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown encoder variant {self.variant!r}")
        if self.n_graphs < 1 or self.n_layers < 1 or self.hidden < 1:
            raise ConfigError("n_graphs, n_layers and hidden must be positive")
        if not (4 <= self.n_nodes_min <= self.n_nodes_max <= 40):
            raise ConfigError("node range must satisfy 4 <= n_nodes_min <= n_nodes_max <= 40")
        if not 0.0 < self.edge_prob < 1.0:
            raise ConfigError("edge_prob must lie in (0, 1)")
        if len(self.fractions) != 4 or abs(sum(self.fractions) - 1.0) > 1e-9 or min(self.fractions) < 0:
            raise ConfigError("fractions must be four non-negative numbers summing to 1")
        if self.target_train_size is not None and self.target_train_size < 1:
            raise ConfigError("target_train_size must be positive or null")
        self.train_config()  # validates the training fields

    # -- conversions ----------------------------------------------------------------

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            method=self.method, aux_tasks=self.aux_tasks, alpha=self.alpha, optimizer=self.optimizer,
            batch_size=self.batch_size, epochs=self.epochs, seed=self.seed, mask_ratio=self.mask_ratio,
            n_neg_per_pos=self.n_neg_per_pos, eta_kappa=self.eta_kappa, kappa_max=self.kappa_max,
            w_max=self.w_max, clamp_w=self.clamp_w, gradscale_symmetric=self.gradscale_symmetric,
            target_train_size=self.target_train_size, pretrain_epochs=self.pretrain_epochs,
            bilevel=self.bilevel,
        )

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["fractions"] = list(self.fractions)
        d["aux_tasks"] = list(self.aux_tasks)
        return d

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "ExperimentConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        kw: dict[str, Any] = {}
        for name, value in raw.items():
            kw[name] = _coerce(name, value, getattr(cls(), name) if name != "bilevel" else None)
        return cls(**kw)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def hash(self) -> str:
        """Stable digest of everything that affects results (the output directory does not)."""
        d = self.to_dict()
        d.pop("out_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _coerce(name: str, value: Any, default: Any) -> Any:
    if name == "bilevel":
        if not isinstance(value, Mapping):
            raise ConfigError("bilevel must be an object")
        allowed = {f.name for f in dataclasses.fields(BiLevelConfig)}
        bad = sorted(set(value) - allowed)
        if bad:
            raise ConfigError(f"unknown bilevel keys: {', '.join(bad)}")
        try:
            return BiLevelConfig(**{k: (int(v) if k in ("M", "r") else float(v)) for k, v in value.items()})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad bilevel settings: {exc}") from exc
    if name in ("fractions", "aux_tasks"):
        if isinstance(value, str):
            value = [v for v in value.split(",") if v]
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{name} must be a list")
        return tuple(float(v) for v in value) if name == "fractions" else tuple(str(v) for v in value)
    if value is None:
        if name in ("target_train_size", "data_path"):
            return None
        raise ConfigError(f"{name} may not be null")
    try:
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{name} must be true or false")
            return value
        if isinstance(default, int) or name == "target_train_size":
            if isinstance(value, bool) or float(value) != int(value):
                raise ConfigError(f"{name} must be an integer")
            return int(value)
        if isinstance(default, float):
            if isinstance(value, bool):
                raise ConfigError(f"{name} must be a number")
            return float(value)
        return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {name}: {value!r}") from exc


def load_config(path: str | Path | None = None, overrides: Mapping[str, Any] | None = None,
                env: Mapping[str, str] | None = None) -> ExperimentConfig:
    """Resolve a configuration from an optional JSON file plus explicit overrides."""
    raw: dict[str, Any] = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    if "bilevel" in overrides and "bilevel" in raw:
        overrides["bilevel"] = {**raw["bilevel"], **overrides["bilevel"]}
    raw.update(overrides)
    env = os.environ if env is None else env
    if "seed" not in raw and env.get(SEED_ENV):
        try:
            raw["seed"] = int(env[SEED_ENV])
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from exc
    return ExperimentConfig.from_dict(raw)


def config_reference() -> str:
    """Markdown table of every configuration key with its default."""
    defaults = ExperimentConfig().to_dict()
    lines = [
        "# Configuration reference",
        "",
        "Generated by `gradsurge report --config-reference`. Unknown keys are rejected.",
        "",
        "| key | default | meaning |",
        "| --- | --- | --- |",
    ]
    for name, doc in FIELD_DOCS.items():
        lines.append(f"| `{name}` | `{json.dumps(defaults[name], sort_keys=True)}` | {doc} |")
    return "\n".join(lines) + "\n"
