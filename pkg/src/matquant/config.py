"""Versioned JSON run configuration.

A config file looks like::

    {
      "version": 1,
      "model": {"d_model": 64, "d_ff": 256, "n_layers": 4, "seq_len": 32, "seed": 0},
      "pretrain": {"steps": 1000, "lr": 0.003, "lr_schedule": "warmup_cosine", "warmup_steps": 50},
      "train": {"steps": 200, "lr": 0.001},
      "objective": {"kind": "matquant", "spec": "[8,4,2]", "lambdas": {"8": 0.1, "4": 0.1, "2": 1.0},
                    "base": "block_recon"},
      "eval": {"batches": 4, "batch_size": 16, "seq_len": 32}
    }

Every section is optional except ``version``.  ``init`` may name a float
weight file (``.npz`` written by ``pretrain``) to start from instead of
pretraining.  Unknown keys anywhere are rejected.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ContractError
from .model import ModelConfig
from .objectives import Baseline, MatQuantConfig
from .trainer import TrainConfig

SCHEMA_VERSION = 1

MODEL_KEYS = {"vocab", "d_model", "d_ff", "n_layers", "seq_len", "quant_scope", "seed"}
TRAIN_KEYS = {
    "steps", "batch_size", "seq_len", "lr", "lr_schedule", "warmup_steps", "optimizer", "betas", "eps", "seed",
    "eval_every", "eval_batches", "eval_batch_size", "eval_bits", "step_multiplier", "grad_clip", "calib_batches",
    "train_scope",
}
MATQUANT_KEYS = {"kind", "spec", "c", "R", "lambdas", "slice_mode", "base", "combine", "distill_weight", "aux"}
BASELINE_KEYS = {"kind", "bits", "base", "aux"}
EVAL_KEYS = {"batches", "batch_size", "seq_len"}
TOP_KEYS = {"version", "model", "init", "pretrain", "train", "objective", "eval"}


class ConfigError(ContractError):
    pass


def _check_keys(section: dict, allowed: set[str], where: str) -> None:
    if not isinstance(section, dict):
        raise ConfigError(f"{where}: expected an object, got {type(section).__name__}")
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}; allowed: {sorted(allowed)}")


@dataclass
class EvalSettings:
    batches: int = 4
    batch_size: int = 16
    seq_len: int = 32


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    init: str | None = None
    pretrain: TrainConfig | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    objective: MatQuantConfig | Baseline | None = None
    use_aux: bool = False
    eval: EvalSettings = field(default_factory=EvalSettings)
    raw: dict = field(default_factory=dict)

    def with_seed(self, seed: int) -> RunConfig:
        raw = json.loads(json.dumps(self.raw))
        raw.setdefault("model", {})["seed"] = seed
        for key in ("pretrain", "train"):
            if key in raw:
                raw[key]["seed"] = seed
            elif key == "train":
                raw["train"] = {"seed": seed}
        return parse_config(raw)


def _train_config(d: dict, where: str, objective=None) -> TrainConfig:
    _check_keys(d, TRAIN_KEYS, where)
    kw = dict(d)
    if "betas" in kw:
        kw["betas"] = tuple(kw["betas"])
    if kw.get("eval_bits") is not None:
        kw["eval_bits"] = tuple(int(b) for b in kw["eval_bits"])
    try:
        return TrainConfig(objective=objective, **kw)
    except TypeError as err:
        raise ConfigError(f"{where}: {err}") from None


def _objective(d: dict):
    kind = d.get("kind")
    if kind == "matquant":
        _check_keys(d, MATQUANT_KEYS, "objective")
        lambdas = {int(k): float(v) for k, v in d["lambdas"].items()} if "lambdas" in d else None
        kw = {k: d[k] for k in ("slice_mode", "base") if k in d}
        if "spec" in d and "R" in d:
            raise ConfigError("objective: give either 'spec' or 'R', not both")
        if "spec" in d:
            extra = {k: d[k] for k in ("combine", "distill_weight") if k in d}
            cfg = MatQuantConfig.from_string(d["spec"], c=d.get("c", 8), lambdas=lambdas, **extra, **kw)
        else:
            if "combine" in d or "distill_weight" in d:
                raise ConfigError("objective: 'combine'/'distill_weight' need a 'spec' with distillation edges")
            cfg = MatQuantConfig(c=d.get("c", 8), R=tuple(d.get("R", (8, 4, 2))), lambdas=lambdas, **kw)
        cfg.validate()
        return cfg, bool(d.get("aux", False))
    if kind == "baseline":
        _check_keys(d, BASELINE_KEYS, "objective")
        if "bits" not in d:
            raise ConfigError("objective: baseline needs 'bits'")
        b = Baseline(int(d["bits"]), d.get("base", "qat"))
        b.as_matquant().validate()
        return b, bool(d.get("aux", False))
    raise ConfigError(f"objective: 'kind' must be 'matquant' or 'baseline', got {kind!r}")


def parse_config(raw: dict) -> RunConfig:
    """Validate ``raw`` against the schema and build the run objects."""
    _check_keys(raw, TOP_KEYS, "config")
    if raw.get("version") != SCHEMA_VERSION:
        raise ConfigError(f"config: 'version' must be {SCHEMA_VERSION}, got {raw.get('version')!r}")
    try:
        model = raw.get("model", {})
        _check_keys(model, MODEL_KEYS, "model")
        objective, use_aux = (None, False)
        if "objective" in raw:
            objective, use_aux = _objective(raw["objective"])
        ev = raw.get("eval", {})
        _check_keys(ev, EVAL_KEYS, "eval")
        init = raw.get("init")
        if init is not None and not isinstance(init, str):
            raise ConfigError("init: expected a path string")
        return RunConfig(
            model=ModelConfig(**model),
            init=init,
            pretrain=_train_config(raw["pretrain"], "pretrain") if "pretrain" in raw else None,
            train=_train_config(raw.get("train", {}), "train", objective),
            objective=objective,
            use_aux=use_aux,
            eval=EvalSettings(**ev),
            raw=raw,
        )
    except ConfigError:
        raise
    except (ContractError, TypeError, ValueError, KeyError, AttributeError) as err:
        raise ConfigError(f"config: {err}") from None


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as err:
        raise ConfigError(f"{p}: not valid JSON ({err})") from None
    return parse_config(raw)
