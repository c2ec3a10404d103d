"""Training objectives: single-precision QAT, block reconstruction, and the
multi-precision nested objective with optional co-distillation.

Every quantized forward pass goes through a :class:`SharedQuantizer`, which
quantizes each target weight once at ``c`` bits per step and hands out slices
of that one quantization.  The nested loss is then

    sum_r lambda_r * L(model with weights S(Q(W, c), r))  +  distillation terms

where ``L`` is token cross-entropy (``base="qat"``) or the squared error of
one layer's output against its float output (``base="block_recon"``).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .autodiff import Tensor, cross_entropy, soft_cross_entropy
from .errors import ContractError
from .model import FFN_WEIGHTS, QuantContext, ToyTransformer
from .quant import AffineAux, NestedFakeQuant, SliceMode

Combine = Literal["standalone", "with_ground_truth"]
Base = Literal["qat", "block_recon"]

DEFAULT_LAMBDAS = {8: 0.1, 4: 0.1, 2: 1.0}


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DistillEdge:
    teacher_bits: int
    student_bits: int
    combine: Combine = "standalone"
    weight: float = 1.0

    def __post_init__(self):
        if self.teacher_bits <= self.student_bits:
            raise ContractError(f"teacher ({self.teacher_bits}) must have more bits than student ({self.student_bits})")
        if self.student_bits < 1:
            raise ContractError("student bits must be positive")
        if self.combine not in ("standalone", "with_ground_truth"):
            raise ContractError(f"unknown combine mode {self.combine!r}")
        if self.weight < 0:
            raise ContractError("distillation weight must be non-negative")

    @property
    def label(self) -> str:
        return f"{self.teacher_bits}->{self.student_bits}"


@dataclass
class MatQuantConfig:
    """Target precisions, their loss weights and distillation edges.

    ``lambdas`` defaults to 0.1 for 8 and 4 bits and 1.0 for every other
    precision in ``R``.  A weight keyed by a precision outside ``R`` is
    accepted when that precision is a distillation student, but adds no
    standalone term.
    """

    c: int = 8
    R: tuple[int, ...] = (8, 4, 2)
    lambdas: dict[int, float] | None = None
    slice_mode: SliceMode = "plain"
    base: Base = "qat"
    codistill: tuple[DistillEdge, ...] = ()

    def __post_init__(self):
        self.R = tuple(int(r) for r in self.R)
        self.codistill = tuple(self.codistill)
        if self.lambdas is None:
            self.lambdas = {r: DEFAULT_LAMBDAS.get(r, 1.0) for r in self.R}
        self.lambdas = {int(k): float(v) for k, v in self.lambdas.items()}
        self.validate()

    def validate(self) -> None:
        if not (2 <= self.c <= 8):
            raise ContractError(f"c must lie in [2, 8], got {self.c}")
        if len(set(self.R)) != len(self.R):
            raise ContractError(f"duplicate precision in R={self.R}")
        for r in self.R:
            if not (1 <= r <= self.c):
                raise ContractError(f"precision {r} outside [1, c={self.c}]")
        if self.slice_mode not in ("plain", "extra"):
            raise ContractError(f"unknown slice mode {self.slice_mode!r}")
        if self.base not in ("qat", "block_recon"):
            raise ContractError(f"unknown base {self.base!r}")
        students = {e.student_bits for e in self.codistill}
        for e in self.codistill:
            if e.teacher_bits > self.c:
                raise ContractError(f"edge {e.label} exceeds c={self.c}")
        extra = set(self.lambdas) - set(self.R) - students
        if extra:
            raise ContractError(f"weights given for precisions {sorted(extra)} that are neither trained nor distilled")
        if any(v < 0 for v in self.lambdas.values()):
            raise ContractError("loss weights must be non-negative")
        if not any(self.lambdas.get(r, 0.0) > 0 for r in self.R) and not self.codistill:
            raise ContractError("need at least one positive weight or one distillation edge")

    def weight(self, r: int) -> float:
        return self.lambdas.get(r, 0.0) if r in self.R else 0.0

    @property
    def precisions(self) -> tuple[int, ...]:
        """Every precision the loss touches, highest first."""
        bits = set(self.R)
        for e in self.codistill:
            bits.update((e.teacher_bits, e.student_bits))
        return tuple(sorted(bits, reverse=True))

    def term_labels(self) -> list[str]:
        labels = [f"L{r}" for r in self.R if self.weight(r) > 0]
        return labels + [f"L{e.label}" for e in self.codistill]

    @classmethod
    def from_string(
        cls,
        text: str,
        *,
        c: int = 8,
        lambdas: dict[int, float] | None = None,
        combine: Combine = "standalone",
        distill_weight: float = 1.0,
        **kwargs,
    ) -> MatQuantConfig:
        """Parse ``"[8,4,2,8->2]"`` style strings.

        Plain integers are trained precisions.  ``x->y`` (or ``x→y``) adds a
        distillation edge; ``x->y;z`` gives teacher ``x`` two students.
        """
        body = text.strip()
        if not (body.startswith("[") and body.endswith("]")):
            raise ContractError(f"config string must be bracketed: {text!r}")
        body = body[1:-1].replace("→", "->").replace(" ", "")
        if not body:
            raise ContractError("empty config string")
        R: list[int] = []
        edges: list[DistillEdge] = []
        for item in body.split(","):
            m = re.fullmatch(r"(\d+)->(\d+(?:;\d+)*)", item)
            if m:
                teacher = int(m.group(1))
                for s in m.group(2).split(";"):
                    edges.append(DistillEdge(teacher, int(s), combine, distill_weight))
            elif re.fullmatch(r"\d+", item):
                R.append(int(item))
            else:
                raise ContractError(f"cannot parse {item!r} in {text!r}")
        return cls(c=c, R=tuple(R), lambdas=lambdas, codistill=tuple(edges), **kwargs)

    def to_dict(self) -> dict:
        return {
            "c": self.c,
            "R": list(self.R),
            "lambdas": {str(k): v for k, v in self.lambdas.items()},
            "slice_mode": self.slice_mode,
            "base": self.base,
            "codistill": [
                {"teacher": e.teacher_bits, "student": e.student_bits, "combine": e.combine, "weight": e.weight}
                for e in self.codistill
            ],
        }


@dataclass(frozen=True)
class Baseline:
    """A single precision trained with its own ``bits``-wide quantizer."""

    bits: int
    base: Base = "qat"

    def as_matquant(self) -> MatQuantConfig:
        return MatQuantConfig(c=self.bits, R=(self.bits,), lambdas={self.bits: 1.0}, base=self.base)


def single_precision_config(r: int, c: int = 8, **kwargs) -> MatQuantConfig:
    if r > c:
        raise ContractError(f"r={r} exceeds c={c}")
    return MatQuantConfig(c=c, R=(r,), lambdas={r: 1.0}, **kwargs)


# ---------------------------------------------------------------------------
# learnable quantization parameters
# ---------------------------------------------------------------------------


class QuantAux:
    """Learnable clipping scales per target and shift/scale vectors per FFN projection.

    ``clip[name]`` is ``(gamma, beta)`` with one entry per output channel.
    ``affine[name]`` is an :class:`AffineAux` over the projection's input
    features.  At init every quantizer reduces to plain MinMax.
    """

    GAMMA_RANGE = (0.01, 2.0)

    def __init__(self, model: ToyTransformer, layers=None, clip: bool = True, affine: bool = True, requires_grad: bool = True):
        layers = range(model.config.n_layers) if layers is None else layers
        self.clip: dict[str, tuple[Tensor, Tensor]] = {}
        self.affine: dict[str, AffineAux] = {}
        for l in layers:
            for name in model.quant_targets(l):
                W = model.params[name]
                if clip:
                    n_out = W.shape[-1]
                    self.clip[name] = (Tensor(np.ones(n_out), requires_grad), Tensor(np.ones(n_out), requires_grad))
                if affine and name.rsplit(".", 1)[-1] in FFN_WEIGHTS:
                    self.affine[name] = AffineAux.identity(W.shape[0], requires_grad)

    def parameters(self) -> list[Tensor]:
        out: list[Tensor] = []
        for g, b in self.clip.values():
            out += [g, b]
        for a in self.affine.values():
            out += [a.delta, a.s]
        return out

    def project_(self) -> None:
        """Keep the clip scales positive and bounded and ``s`` positive after an update."""
        lo, hi = self.GAMMA_RANGE
        for g, b in self.clip.values():
            np.clip(g.data, lo, hi, out=g.data)
            np.clip(b.data, lo, hi, out=b.data)
        for a in self.affine.values():
            np.maximum(a.s.data, 1e-3, out=a.s.data)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for name, (g, b) in self.clip.items():
            out[name + ".gamma"] = g.data.copy()
            out[name + ".beta"] = b.data.copy()
        for name, a in self.affine.items():
            out[name + ".delta"] = a.delta.data.copy()
            out[name + ".s"] = a.s.data.copy()
        return out

    def load_state_dict(self, state: dict[str, np.ndarray], names=None) -> None:
        for name, (g, b) in self.clip.items():
            if names is None or name in names:
                g.data = np.array(state[name + ".gamma"], dtype=float)
                b.data = np.array(state[name + ".beta"], dtype=float)
        for name, a in self.affine.items():
            if names is None or name in names:
                a.delta.data = np.array(state[name + ".delta"], dtype=float)
                a.s.data = np.array(state[name + ".s"], dtype=float)

    def reset(self, names) -> None:
        for name in names:
            if name in self.clip:
                for t in self.clip[name]:
                    t.data = np.ones_like(t.data)
            if name in self.affine:
                self.affine[name].delta.data[:] = 0.0
                self.affine[name].s.data[:] = 1.0

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None


# ---------------------------------------------------------------------------
# shared quantization
# ---------------------------------------------------------------------------


class SharedQuantizer:
    """Quantize each target once at ``c`` bits and serve slices of it.

    Build one per optimization step: the first forward pass that touches a
    target records its c-bit quantization and every later pass, at any
    precision, slices the same codes.
    """

    def __init__(self, c: int, mode: SliceMode = "plain", aux: QuantAux | None = None, axis: int = -1):
        self.c, self.mode, self.aux, self.axis = c, mode, aux, axis
        self._cache: dict[str, NestedFakeQuant] = {}

    def nested(self, name: str, W: Tensor) -> NestedFakeQuant:
        if name not in self._cache:
            gamma, beta = self.aux.clip[name] if (self.aux is not None and name in self.aux.clip) else (None, None)
            self._cache[name] = NestedFakeQuant(W, self.c, gamma, beta, self.axis)
        return self._cache[name]

    def context(self, r: int | dict[str, int] | None = None) -> QuantContext:
        """A forward context at precision ``r`` (or per-target precisions)."""

        def qfn(name: str, W: Tensor) -> Tensor:
            bits = r.get(name, self.c) if isinstance(r, dict) else r
            return self.nested(name, W).slice(bits, self.mode)

        aux = dict(self.aux.affine) if self.aux is not None else {}
        return QuantContext(qfn=qfn, aux=aux)


def float_context(aux: QuantAux | None = None) -> QuantContext:
    return QuantContext(aux=dict(aux.affine) if aux is not None else {})


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


@dataclass
class LayerBatch:
    """Inputs to one layer and that layer's float outputs on them."""

    layer: int
    X: np.ndarray
    reference: np.ndarray
    # float output of the attention half, reusable when no attention weight is quantized
    attn_out: np.ndarray | None = None

    @classmethod
    def from_model(cls, model: ToyTransformer, layer: int, X: np.ndarray) -> LayerBatch:
        mid = model.attention_forward(layer, Tensor(X))
        ref = model.ffn_forward(layer, mid).data
        return cls(layer, X, ref, None if model.attention_quantized(layer) else mid.data)

    def forward(self, model: ToyTransformer, ctx) -> Tensor:
        if self.attn_out is not None:
            return model.ffn_forward(self.layer, Tensor(self.attn_out), ctx)
        return model.layer_forward(self.layer, Tensor(self.X), ctx)


def squared_error(a: Tensor, b) -> Tensor:
    """Mean over elements of the squared difference; ``b`` is treated as constant."""
    d = a - (b if isinstance(b, Tensor) else Tensor(b))
    return (d * d).mean()


def qat_loss(model: ToyTransformer, batch, c: int | None, mode: SliceMode = "plain", r: int | None = None, aux: QuantAux | None = None) -> Tensor:
    """Cross-entropy with weights quantized at ``c`` bits (sliced to ``r`` if given).

    ``c=None`` runs the float model.
    """
    x, y = batch
    ctx = float_context(aux) if c is None else SharedQuantizer(c, mode, aux).context(r)
    return cross_entropy(model(x, ctx), y)


def block_recon_loss(
    model: ToyTransformer, layer: int, X, aux: QuantAux | None, c: int | None = 8, r: int | None = None,
    mode: SliceMode = "plain", reference=None,
) -> Tensor:
    """Squared error between the float layer output and the quantized one on the same inputs.

    ``c=None`` bypasses the quantizer.
    """
    X = np.asarray(X.data if isinstance(X, Tensor) else X)
    if reference is None:
        reference = model.layer_forward(layer, Tensor(X)).data
    ctx = float_context(aux) if c is None else SharedQuantizer(c, mode, aux).context(r)
    return squared_error(model.layer_forward(layer, Tensor(X), ctx), reference)


def codistill_term(teacher_logits, student_logits: Tensor, ground_truth, combine: Combine = "standalone") -> Tensor:
    """Cross-entropy of the student against the teacher's softmax.

    The teacher is taken as a constant.  ``with_ground_truth`` averages this
    with the student's cross-entropy on ``ground_truth``.
    """
    t = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits, dtype=float)
    shifted = t - t.max(axis=-1, keepdims=True)
    p = np.exp(shifted)
    p /= p.sum(axis=-1, keepdims=True)
    distill = soft_cross_entropy(student_logits, p)
    if combine == "standalone":
        return distill
    if combine == "with_ground_truth":
        return distill * 0.5 + cross_entropy(student_logits, ground_truth) * 0.5
    raise ContractError(f"unknown combine mode {combine!r}")


def _recon_distill(teacher_out, student_out: Tensor, reference, combine: Combine) -> Tensor:
    distill = squared_error(student_out, np.asarray(teacher_out.data))
    if combine == "standalone":
        return distill
    return distill * 0.5 + squared_error(student_out, reference) * 0.5


def matquant_terms(model: ToyTransformer, batch, cfg: MatQuantConfig, aux: QuantAux | None = None) -> dict[str, tuple[float, Tensor]]:
    """Each weighted term of the nested objective as ``label -> (weight, loss)``.

    ``batch`` is ``(tokens, targets)`` for the QAT base and a
    :class:`LayerBatch` for block reconstruction.
    """
    cfg.validate()
    quantizer = SharedQuantizer(cfg.c, cfg.slice_mode, aux)
    needed = {r for r in cfg.R if cfg.weight(r) > 0}
    for e in cfg.codistill:
        needed.update((e.teacher_bits, e.student_bits))

    outputs: dict[int, Tensor] = {}
    if cfg.base == "qat":
        x, y = batch
        for r in sorted(needed, reverse=True):
            outputs[r] = model(x, quantizer.context(r))
        terms = {f"L{r}": (cfg.weight(r), cross_entropy(outputs[r], y)) for r in cfg.R if cfg.weight(r) > 0}
        for e in cfg.codistill:
            terms[f"L{e.label}"] = (e.weight, codistill_term(outputs[e.teacher_bits].detach(), outputs[e.student_bits], y, e.combine))
        return terms

    if not isinstance(batch, LayerBatch):
        raise ContractError("block reconstruction needs a LayerBatch")
    for r in sorted(needed, reverse=True):
        outputs[r] = batch.forward(model, quantizer.context(r))
    terms = {f"L{r}": (cfg.weight(r), squared_error(outputs[r], batch.reference)) for r in cfg.R if cfg.weight(r) > 0}
    for e in cfg.codistill:
        terms[f"L{e.label}"] = (e.weight, _recon_distill(outputs[e.teacher_bits].detach(), outputs[e.student_bits], batch.reference, e.combine))
    return terms


def combine_terms(terms: dict[str, tuple[float, Tensor]]) -> Tensor:
    total: Tensor | None = None
    for weight, loss in terms.values():
        part = loss * weight
        total = part if total is None else total + part
    if total is None:
        raise ContractError("objective has no terms")
    return total


def matquant_loss(model: ToyTransformer, batch, cfg: MatQuantConfig, aux: QuantAux | None = None) -> Tensor:
    """Weighted sum over precisions of the base loss on sliced weights, plus distillation terms."""
    return combine_terms(matquant_terms(model, batch, cfg, aux))


def single_precision_loss(model: ToyTransformer, batch, r: int, c: int = 8, aux: QuantAux | None = None, **kwargs) -> Tensor:
    """Loss on the r-bit slice only, with the quantizer still built at ``c`` bits."""
    return matquant_loss(model, batch, single_precision_config(r, c, **kwargs), aux)
