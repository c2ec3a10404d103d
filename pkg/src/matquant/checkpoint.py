"""Quantized model export: integer codes for the target weights, float for the rest.

A :class:`QuantizedModel` is what evaluation, Mix'n'Match and the packed file
format work with.  Every precision is served from the same c-bit codes by
slicing; nothing is re-quantized.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, cross_entropy
from .errors import ContractError
from .model import ModelConfig, QuantContext, ToyTransformer
from .quant import (
    AffineAux,
    QuantizedTensor,
    SliceMode,
    dequantize,
    omni_quantize,
    overflow_fraction,
    slice_tensor,
)


@dataclass
class QuantizedModel:
    config: ModelConfig
    c: int
    tensors: dict[str, QuantizedTensor]
    float_params: dict[str, np.ndarray]
    # shift/scale around FFN projections: name -> (delta, s, delta @ W with the float W)
    affine: dict[str, tuple[np.ndarray, np.ndarray, np.ndarray]] = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: ToyTransformer, c: int, aux=None) -> QuantizedModel:
        """Quantize every target of ``model`` at ``c`` bits, folding in learned clip scales and shifts."""
        tensors, affine = {}, {}
        for name in model.quant_targets():
            W = model.params[name].data
            if aux is not None and name in aux.affine:
                a = aux.affine[name]
                affine[name] = (a.delta.data.copy(), a.s.data.copy(), a.delta.data @ W)
                W = W * a.s.data[:, None]
            gamma, beta = (1.0, 1.0)
            if aux is not None and name in aux.clip:
                gamma, beta = (t.data for t in aux.clip[name])
            tensors[name] = omni_quantize(W, c, gamma=gamma, beta=beta, axis=-1)
        floats = {k: t.data.copy() for k, t in model.params.items() if k not in tensors}
        return cls(model.config, c, tensors, floats, affine)

    # --------------------------------------------------------------- access
    def layer_of(self, name: str) -> int:
        return int(name.split(".")[1])

    def layer_targets(self, layer: int) -> list[str]:
        return [n for n in self.tensors if self.layer_of(n) == layer]

    def params_per_layer(self) -> list[int]:
        return [sum(self.tensors[n].codes.size for n in self.layer_targets(l)) for l in range(self.config.n_layers)]

    def n_quantized(self) -> int:
        return sum(q.codes.size for q in self.tensors.values())

    def sliced(self, name: str, r: int, mode: SliceMode = "plain") -> QuantizedTensor:
        q = self.tensors[name]
        return q if r == self.c and mode == "plain" else slice_tensor(q, r, mode)

    def overflow_fractions(self, r: int) -> list[float]:
        """Per-layer share of target weights in the overflow bucket of an extra-mode r-bit slice."""
        out = []
        for l in range(self.config.n_layers):
            names = self.layer_targets(l)
            total = sum(self.tensors[n].codes.size for n in names)
            over = sum(overflow_fraction(self.sliced(n, r, "extra")) * self.tensors[n].codes.size for n in names)
            out.append(over / total if total else 0.0)
        return out

    # ---------------------------------------------------------------- model
    def bits_for(self, bits: int | list[int] | dict[str, int]) -> dict[str, int]:
        if isinstance(bits, dict):
            return bits
        if np.ndim(bits) == 0:
            return {n: int(bits) for n in self.tensors}
        bits = list(bits)
        if len(bits) != self.config.n_layers:
            raise ContractError(f"plan has {len(bits)} layers, model has {self.config.n_layers}")
        return {n: int(bits[self.layer_of(n)]) for n in self.tensors}

    def context(self, bits, mode: SliceMode = "plain") -> QuantContext:
        """Forward context with every target replaced by its dequantized slice.

        ``bits`` is one precision, a per-layer list, or a per-target dict.
        """
        per = self.bits_for(bits)
        overrides, aux, shift = {}, {}, {}
        for name, r in per.items():
            if r > self.c:
                raise ContractError(f"cannot slice {r} bits from a {self.c}-bit model")
            overrides[name] = dequantize(self.sliced(name, r, mode)).data
            if name in self.affine:
                delta, s, shift[name] = self.affine[name]
                aux[name] = AffineAux(Tensor(delta), Tensor(s))
        return QuantContext(overrides=overrides, aux=aux, shift_bias=shift)

    def build(self) -> ToyTransformer:
        """A model shell holding the float parameters; target weights come from contexts."""
        model = ToyTransformer(self.config)
        for k, v in self.float_params.items():
            if k in model.params:
                model.params[k].data = np.array(v, dtype=np.float64)
        for name, q in self.tensors.items():
            W = dequantize(q).data
            if name in self.affine:
                W = W / self.affine[name][1][:, None]
            model.params[name].data = W
        return model

    def evaluate(self, batches, bits, mode: SliceMode = "plain", model: ToyTransformer | None = None) -> float:
        """Mean held-out cross-entropy with targets sliced to ``bits``."""
        model = model or self.build()
        ctx = self.context(bits, mode)
        losses = [cross_entropy(model(x, ctx), y).item() for x, y in batches]
        return float(np.mean(losses))
