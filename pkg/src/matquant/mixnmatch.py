"""Layer-wise precision plans over the trained precisions {2, 4, 8}.

Strategy shapes, for a plan that mixes precisions:

* ``pyramid``: bits rise to a peak and fall again, both ends below the peak
* ``reverse_pyramid``: bits fall to a valley and rise again, both ends above it
* ``increasing`` / ``decreasing``: monotone across layers, not constant

A mixed plan must use all three precisions, so int4 always sits between int2
and int8.  The uniform all-2 and all-8 plans belong to every strategy, which
makes both extremes reachable.  For a target bit budget the plans nearest to
it are returned; ties in distance go to fewer bits.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from .errors import ContractError

Strategy = Literal["pyramid", "reverse_pyramid", "increasing", "decreasing"]
STRATEGIES: tuple[str, ...] = ("pyramid", "reverse_pyramid", "increasing", "decreasing")
LEVELS = (2, 4, 8)


@dataclass
class MixPlan:
    per_layer_bits: tuple[int, ...]
    strategy: str
    params_per_layer: tuple[int, ...] | None = None
    eval_loss: float | None = None

    def __post_init__(self):
        self.per_layer_bits = tuple(int(b) for b in self.per_layer_bits)
        if self.params_per_layer is not None:
            self.params_per_layer = tuple(int(p) for p in self.params_per_layer)
            if len(self.params_per_layer) != len(self.per_layer_bits):
                raise ContractError("params_per_layer must match the number of layers")

    @property
    def n_layers(self) -> int:
        return len(self.per_layer_bits)

    @property
    def effective_bits(self) -> float:
        return effective_bits(self.per_layer_bits, self.params_per_layer)

    def to_dict(self) -> dict:
        d = {"strategy": self.strategy, "per_layer_bits": list(self.per_layer_bits), "effective_bits": self.effective_bits}
        if self.eval_loss is not None:
            d["eval_loss"] = self.eval_loss
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict, params_per_layer=None) -> MixPlan:
        plan = cls(tuple(d["per_layer_bits"]), d["strategy"], params_per_layer, d.get("eval_loss"))
        if "effective_bits" in d and abs(plan.effective_bits - d["effective_bits"]) > 1e-9:
            raise ContractError("stored effective_bits does not match the assignment")
        return plan


def effective_bits(bits: Sequence[int], params: Sequence[int] | None = None) -> float:
    """Parameter-weighted mean bit-width."""
    b = np.asarray(bits, dtype=np.float64)
    w = np.ones_like(b) if params is None else np.asarray(params, dtype=np.float64)
    return float((b * w).sum() / w.sum())


def effective_bits_extra(plan: MixPlan, overflow_fractions: Sequence[float]) -> float:
    """Effective bits when each overflowed weight pays one extra bit.

    The cost of locating overflowed weights (a sparse index) is not counted.
    """
    f = np.asarray(overflow_fractions, dtype=np.float64)
    if f.shape != (plan.n_layers,):
        raise ContractError(f"need one overflow fraction per layer, got {f.shape}")
    if np.any(f < 0) or np.any(f > 1):
        raise ContractError("overflow fractions must lie in [0, 1]")
    b = np.asarray(plan.per_layer_bits, dtype=np.float64) + f
    w = np.ones_like(b) if plan.params_per_layer is None else np.asarray(plan.params_per_layer, dtype=np.float64)
    return float((b * w).sum() / w.sum())


# ---------------------------------------------------------------------------
# shapes
# ---------------------------------------------------------------------------


def _nondecreasing(seq) -> bool:
    return all(a <= b for a, b in zip(seq, seq[1:]))


def _nonincreasing(seq) -> bool:
    return all(a >= b for a, b in zip(seq, seq[1:]))


def is_unimodal(bits: Sequence[int]) -> bool:
    """Non-decreasing up to some point and non-increasing after it."""
    bits = list(bits)
    peak = bits.index(max(bits))
    return _nondecreasing(bits[: peak + 1]) and _nonincreasing(bits[peak:])


def is_valley(bits: Sequence[int]) -> bool:
    return is_unimodal([-b for b in bits])


def matches(bits: Sequence[int], strategy: str) -> bool:
    bits = tuple(bits)
    if len(set(bits)) == 1:
        return bits[0] in (min(LEVELS), max(LEVELS))
    if set(bits) != set(LEVELS):
        return False
    if strategy == "pyramid":
        return is_unimodal(bits) and bits[0] < max(bits) and bits[-1] < max(bits)
    if strategy == "reverse_pyramid":
        return is_valley(bits) and bits[0] > min(bits) and bits[-1] > min(bits)
    if strategy == "increasing":
        return _nondecreasing(bits)
    if strategy == "decreasing":
        return _nonincreasing(bits)
    raise ContractError(f"unknown strategy {strategy!r}")


def candidate_shapes(n_layers: int, strategy: str) -> list[tuple[int, ...]]:
    if strategy not in STRATEGIES:
        raise ContractError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")
    if n_layers <= 0:
        raise ContractError("n_layers must be positive")
    return [s for s in itertools.product(LEVELS, repeat=n_layers) if matches(s, strategy)]


def generate_plans(n_layers: int, target_bits: float, strategy: str, params_per_layer=None) -> list[MixPlan]:
    """All plans of ``strategy`` whose effective bits are nearest to ``target_bits``."""
    if not (min(LEVELS) <= target_bits <= max(LEVELS)):
        raise ContractError(f"target {target_bits} outside [{min(LEVELS)}, {max(LEVELS)}]")
    shapes = candidate_shapes(n_layers, strategy)
    if params_per_layer is not None and len(params_per_layer) != n_layers:
        raise ContractError("params_per_layer must have one entry per layer")
    scored = [(abs(effective_bits(s, params_per_layer) - target_bits), effective_bits(s, params_per_layer), s) for s in shapes]
    best_dist = min(d for d, _, _ in scored)
    # equal distance on both sides of the target: take the cheaper side
    best_bits = min(b for d, b, _ in scored if np.isclose(d, best_dist, rtol=0, atol=1e-12))
    chosen = [s for d, b, s in scored if np.isclose(b, best_bits, rtol=0, atol=1e-12)]
    return [MixPlan(s, strategy, params_per_layer) for s in sorted(chosen)]


# ---------------------------------------------------------------------------
# evaluation and frontier
# ---------------------------------------------------------------------------


def evaluate_plan(qmodel, plan: MixPlan, batches, mode: str = "plain", model=None) -> float:
    if plan.n_layers != qmodel.config.n_layers:
        raise ContractError(f"plan has {plan.n_layers} layers, model has {qmodel.config.n_layers}")
    loss = qmodel.evaluate(batches, list(plan.per_layer_bits), mode, model)
    plan.eval_loss = loss
    return loss


def pareto_front(plans: Sequence[MixPlan]) -> list[MixPlan]:
    """Plans no other plan beats on both effective bits and loss (lower is better), sorted by bits."""
    if any(p.eval_loss is None for p in plans):
        raise ContractError("every plan needs an eval_loss")
    ordered = sorted(plans, key=lambda p: (p.effective_bits, p.eval_loss))
    front: list[MixPlan] = []
    for p in ordered:
        # sorting puts the best plan of each bit budget first, so strict
        # improvement also drops equal-bits duplicates
        if not front or p.eval_loss < front[-1].eval_loss:
            front.append(p)
    return front
