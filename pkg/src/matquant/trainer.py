"""Training loops: float pretraining, end-to-end quantized training and
layer-wise auxiliary-parameter training.

All randomness comes from ``TrainConfig.seed``; the same config, seed and
data give identical records (``wall_ms`` aside).
"""

from __future__ import annotations

import json
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Literal, Union

import numpy as np

from .autodiff import Tensor, cross_entropy
from .checkpoint import QuantizedModel
from .data import eval_batches, sample_batch, split
from .errors import ContractError, DivergenceError
from .model import ToyTransformer
from .objectives import Baseline, LayerBatch, MatQuantConfig, QuantAux, combine_terms, matquant_terms

log = logging.getLogger(__name__)

Objective = Union[MatQuantConfig, Baseline, None]

DIVERGENCE_FACTOR = 10.0
DIVERGENCE_PATIENCE = 3


@dataclass
class TrainConfig:
    steps: int = 300
    batch_size: int = 16
    seq_len: int = 32
    lr: float = 1e-3
    lr_schedule: Literal["constant", "warmup_cosine"] = "constant"
    warmup_steps: int = 0
    optimizer: Literal["adam", "sgd"] = "adam"
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    eval_every: int = 0
    eval_batches: int = 4
    eval_batch_size: int = 16
    eval_bits: tuple[int, ...] | None = None
    objective: Objective = None
    step_multiplier: float = 1.0
    grad_clip: float | None = 1.0
    calib_batches: int = 8
    # which model parameters quantized training updates: all of them, or only the quantized weights
    train_scope: Literal["all", "targets"] = "all"

    def __post_init__(self):
        if self.steps < 0:
            raise ContractError("steps must be non-negative")
        if self.lr <= 0:
            raise ContractError("lr must be positive")
        if self.lr_schedule not in ("constant", "warmup_cosine"):
            raise ContractError(f"unknown schedule {self.lr_schedule!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ContractError(f"unknown optimizer {self.optimizer!r}")
        if self.step_multiplier <= 0:
            raise ContractError("step_multiplier must be positive")
        if self.train_scope not in ("all", "targets"):
            raise ContractError(f"unknown train_scope {self.train_scope!r}")

    @property
    def total_steps(self) -> int:
        return int(round(self.steps * self.step_multiplier))

    def lr_at(self, step: int) -> float:
        if self.lr_schedule == "constant":
            return self.lr
        if step < self.warmup_steps:
            return self.lr * (step + 1) / self.warmup_steps
        span = max(1, self.total_steps - self.warmup_steps)
        t = min(1.0, (step - self.warmup_steps) / span)
        return self.lr * 0.5 * (1.0 + math.cos(math.pi * t))

    def matquant(self) -> MatQuantConfig | None:
        obj = self.objective
        return obj.as_matquant() if isinstance(obj, Baseline) else obj


@dataclass
class RunRecord:
    step: int
    train_loss: float
    eval_loss: dict[int, float]
    wall_ms: float

    def to_json(self) -> str:
        d = asdict(self)
        d["eval_loss"] = {str(k): v for k, v in self.eval_loss.items()}
        return json.dumps(d, sort_keys=True)


def write_records(records: list[RunRecord], path) -> None:
    with open(path, "a") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def read_records(path) -> list[RunRecord]:
    out = []
    for line in Path(path).read_text().splitlines():
        d = json.loads(line)
        out.append(RunRecord(d["step"], d["train_loss"], {int(k): v for k, v in d["eval_loss"].items()}, d["wall_ms"]))
    return out


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


class SGD:
    def __init__(self, params: list[Tensor]):
        self.params = params

    def step(self, lr: float) -> None:
        for p in self.params:
            if p.grad is not None:
                p.data -= lr * p.grad


class Adam:
    def __init__(self, params: list[Tensor], betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= self.b1
            m += (1.0 - self.b1) * p.grad
            v *= self.b2
            v += (1.0 - self.b2) * p.grad * p.grad
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(params: list[Tensor], cfg: TrainConfig):
    return Adam(params, cfg.betas, cfg.eps) if cfg.optimizer == "adam" else SGD(params)


def _clip(params: list[Tensor], max_norm: float | None) -> None:
    if not max_norm:
        return
    total = math.sqrt(sum(float((p.grad * p.grad).sum()) for p in params if p.grad is not None))
    if total > max_norm:
        scale = max_norm / total
        for p in params:
            if p.grad is not None:
                p.grad *= scale


# ---------------------------------------------------------------------------
# generic loop
# ---------------------------------------------------------------------------


class _Watchdog:
    """Abort when the loss blows past ``DIVERGENCE_FACTOR`` x its first value or stays non-finite."""

    def __init__(self):
        self.initial: float | None = None
        self.strikes = 0

    def check(self, loss: float, where: str) -> None:
        if not math.isfinite(loss):
            self.strikes += 1
            if self.strikes >= DIVERGENCE_PATIENCE:
                raise DivergenceError(f"{where}: loss non-finite {self.strikes} times in a row")
            return
        self.strikes = 0
        if self.initial is None:
            self.initial = loss
        elif loss > DIVERGENCE_FACTOR * self.initial:
            raise DivergenceError(f"{where}: loss {loss:.4g} exceeds {DIVERGENCE_FACTOR:g}x the initial {self.initial:.4g}")


def _fit(
    params: list[Tensor],
    loss_fn: Callable[[int], Tensor],
    cfg: TrainConfig,
    evaluate: Callable[[], dict[int, float]] | None,
    after_step: Callable[[], None] | None = None,
    where: str = "train",
) -> list[RunRecord]:
    opt = make_optimizer(params, cfg)
    watch = _Watchdog()
    records: list[RunRecord] = []
    t0 = time.perf_counter()
    total = cfg.total_steps
    for step in range(total):
        for p in params:
            p.grad = None
        try:
            loss = loss_fn(step)
            loss.backward()
            value = loss.item()
        except FloatingPointError:
            value = float("nan")
        watch.check(value, where)
        if not math.isfinite(value):
            continue
        _clip(params, cfg.grad_clip)
        opt.step(cfg.lr_at(step))
        if after_step is not None:
            after_step()
        last = step == total - 1
        if evaluate is not None and ((cfg.eval_every and (step + 1) % cfg.eval_every == 0) or last):
            ev = evaluate()
            for v in ev.values():
                watch.check(v, where + " eval")
            records.append(RunRecord(step + 1, value, ev, (time.perf_counter() - t0) * 1000.0))
    for p in params:
        p.grad = None
    return records


def _splits(data):
    if isinstance(data, tuple):
        return data
    return split(np.asarray(data))


def _eval_set(eval_data, cfg: TrainConfig):
    return list(eval_batches(eval_data, cfg.eval_batch_size, cfg.seq_len, cfg.eval_batches))


def float_eval(model: ToyTransformer, batches) -> float:
    return float(np.mean([cross_entropy(model(x), y).item() for x, y in batches]))


# ---------------------------------------------------------------------------
# entry points
# ---------------------------------------------------------------------------


def pretrain_float(model: ToyTransformer, data, cfg: TrainConfig) -> tuple[ToyTransformer, list[RunRecord]]:
    """Train all parameters in float.  ``data`` is a byte array or a ``(train, eval)`` pair."""
    train, held = _splits(data)
    rng = np.random.default_rng(cfg.seed)
    batches = _eval_set(held, cfg)
    params = list(model.params.values())
    model.requires_grad_(True)

    def loss_fn(step):
        x, y = sample_batch(train, cfg.batch_size, cfg.seq_len, rng)
        return cross_entropy(model(x), y)

    records = _fit(params, loss_fn, cfg, lambda: {0: float_eval(model, batches)}, where="pretrain")
    model.requires_grad_(False)
    return model, records


@dataclass
class TrainResult:
    model: ToyTransformer
    quantized: QuantizedModel
    records: list[RunRecord]
    aux: QuantAux | None = None
    diverged_layers: list[int] = field(default_factory=list)

    def final_eval(self) -> dict[int, float]:
        return self.records[-1].eval_loss if self.records else {}


def eval_bits_for(cfg: TrainConfig, mq: MatQuantConfig) -> tuple[int, ...]:
    return tuple(cfg.eval_bits) if cfg.eval_bits else mq.precisions


def evaluate_quantized(model, c, aux, batches, bits, mode) -> dict[int, float]:
    """Held-out cross-entropy per precision, through the exported codes and slicing."""
    qm = QuantizedModel.from_model(model, c, aux)
    shell = qm.build()
    return {r: qm.evaluate(batches, r, mode, shell) for r in bits}


def train_matquant(model: ToyTransformer, data, cfg: TrainConfig, aux: QuantAux | None = None) -> TrainResult:
    """Quantized training under ``cfg.objective`` (a nested config or a single-precision baseline).

    With the QAT base all model parameters are trained (plus ``aux`` when
    given).  With the block-reconstruction base the model is frozen and only
    the auxiliary parameters are learned, layer by layer, on calibration
    activations drawn from the training split.
    """
    mq = cfg.matquant()
    if mq is None:
        raise ContractError("train_matquant needs a MatQuantConfig or Baseline objective")
    train, held = _splits(data)
    batches = _eval_set(held, cfg)
    bits = eval_bits_for(cfg, mq)

    if mq.base == "block_recon":
        calib_rng = np.random.default_rng(cfg.seed + 7919)
        calib = [sample_batch(train, cfg.batch_size, cfg.seq_len, calib_rng)[0] for _ in range(cfg.calib_batches)]
        acts = model.capture_activations(calib)
        aux, diverged = train_omniquant_layerwise(model, acts, cfg, aux)
        t0 = time.perf_counter()
        recon = float(np.mean([layer_recon_error(model, LayerBatch.from_model(model, a.layer, a.X), mq, aux) for a in acts]))
        ev = evaluate_quantized(model, mq.c, aux, batches, bits, mq.slice_mode)
        records = [RunRecord(cfg.total_steps, recon, ev, (time.perf_counter() - t0) * 1000.0)]
        return TrainResult(model, QuantizedModel.from_model(model, mq.c, aux), records, aux, diverged)

    rng = np.random.default_rng(cfg.seed)
    names = set(model.params) if cfg.train_scope == "all" else set(model.quant_targets())
    model.requires_grad_(False)
    model.requires_grad_(True, names)
    params = [t for k, t in model.params.items() if k in names] + (aux.parameters() if aux is not None else [])

    def loss_fn(step):
        return combine_terms(matquant_terms(model, sample_batch(train, cfg.batch_size, cfg.seq_len, rng), mq, aux))

    records = _fit(
        params,
        loss_fn,
        cfg,
        lambda: evaluate_quantized(model, mq.c, aux, batches, bits, mq.slice_mode),
        after_step=aux.project_ if aux is not None else None,
        where="train",
    )
    model.requires_grad_(False)
    return TrainResult(model, QuantizedModel.from_model(model, mq.c, aux), records, aux)


def layer_recon_error(model, layer_batch: LayerBatch, mq: MatQuantConfig, aux: QuantAux | None) -> float:
    return combine_terms(matquant_terms(model, layer_batch, mq, aux)).item()


def train_omniquant_layerwise(model: ToyTransformer, activations, cfg: TrainConfig, aux: QuantAux | None = None):
    """Learn clip scales and shifts for each layer independently on its float inputs.

    Returns ``(aux, diverged_layers)``.  A layer whose optimization diverges
    is reset to the identity initialization and reported.
    """
    mq = cfg.matquant()
    if mq is None:
        mq = MatQuantConfig(base="block_recon")
    if mq.base != "block_recon":
        mq = MatQuantConfig(c=mq.c, R=mq.R, lambdas=mq.lambdas, slice_mode=mq.slice_mode, base="block_recon", codistill=mq.codistill)
    if aux is None:
        aux = QuantAux(model)
    model.requires_grad_(False)
    diverged = []
    for acts in activations:
        l = acts.layer
        names = set(model.quant_targets(l))
        full = LayerBatch.from_model(model, l, acts.X)
        rng = np.random.default_rng(cfg.seed * 1000 + l)
        n = acts.X.shape[0]
        layer_params = [t for name in sorted(names) for t in _aux_tensors(aux, name)]

        def loss_fn(step, full=full, rng=rng, n=n):
            idx = rng.choice(n, size=min(cfg.batch_size, n), replace=False)
            mid = None if full.attn_out is None else full.attn_out[idx]
            return combine_terms(matquant_terms(model, LayerBatch(full.layer, full.X[idx], full.reference[idx], mid), mq, aux))

        try:
            _fit(layer_params, loss_fn, cfg, None, aux.project_, where=f"layer {l}")
        except DivergenceError as err:
            warnings.warn(f"{err}; keeping the initial auxiliary parameters for layer {l}")
            aux.reset(names)
            diverged.append(l)
    return aux, diverged


def _aux_tensors(aux: QuantAux, name: str) -> list[Tensor]:
    out = list(aux.clip[name]) if name in aux.clip else []
    if name in aux.affine:
        out += [aux.affine[name].delta, aux.affine[name].s]
    return out
