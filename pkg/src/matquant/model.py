"""A small pre-norm transformer over bytes.

Each layer is single-head causal attention followed by a gated FFN, both
wrapped in residual connections with RMSNorm in front.  Weight matrices are
stored ``(in_features, out_features)`` so a projection is ``x @ W + b``;
per-output-channel quantization therefore uses ``axis=-1``.

Quantization hooks live in :class:`QuantContext`, which the forward passes
consult for every projection.

Parameter count for config ``(V, d, f, L, T)``::

    V*d + T*d                      token and position embeddings
    + L * (4*d*d + 2*d              attention projections, two norm gains
           + 3*d*f + 2*f + d)       gate/up/down weights and biases
    + d + d*V                      final norm gain and output head
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Literal

import numpy as np

from .autodiff import Tensor, as_tensor, embedding
from .errors import ContractError, DimensionError
from .quant import AffineAux, apply_affine_aux

FFN_WEIGHTS = ("w_gate", "w_up", "w_down")
ATTN_WEIGHTS = ("wq", "wk", "wv", "wo")
NORM_EPS = 1e-6


@dataclass
class ModelConfig:
    vocab: int = 256
    d_model: int = 64
    d_ff: int = 256
    n_layers: int = 4
    seq_len: int = 64
    quant_scope: Literal["ffn_only", "ffn_and_attention"] = "ffn_only"
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab", "d_model", "d_ff", "n_layers", "seq_len"):
            if getattr(self, name) <= 0:
                raise ContractError(f"{name} must be positive")
        if self.d_ff < self.d_model:
            raise ContractError("d_ff must be at least d_model")
        if self.quant_scope not in ("ffn_only", "ffn_and_attention"):
            raise ContractError(f"unknown quant_scope {self.quant_scope!r}")

    def param_count(self) -> int:
        V, d, f, L, T = self.vocab, self.d_model, self.d_ff, self.n_layers, self.seq_len
        return V * d + T * d + L * (4 * d * d + 2 * d + 3 * d * f + 2 * f + d) + d + d * V


@dataclass
class LayerActivations:
    layer: int
    X: np.ndarray  # [batch, seq, d_model]


@dataclass
class QuantContext:
    """How weights are transformed on their way into a forward pass.

    ``overrides`` replace weights outright (for instance with dequantized
    sliced codes).  ``qfn`` is applied to every quantization target that is
    not overridden.  ``aux`` attaches a learnable shift/scale to FFN
    projections; for exported models ``shift_bias`` holds the precomputed
    ``delta @ W`` term and the override holds the quantized ``W * s``.
    """

    overrides: dict[str, object] = field(default_factory=dict)
    qfn: Callable[[str, Tensor], Tensor] | None = None
    aux: dict[str, AffineAux] = field(default_factory=dict)
    shift_bias: dict[str, np.ndarray] = field(default_factory=dict)


def _rmsnorm(x: Tensor, gain: Tensor) -> Tensor:
    return x * ((x * x).mean(axis=-1, keepdims=True) + NORM_EPS) ** -0.5 * gain


class ToyTransformer:
    def __init__(self, config: ModelConfig):
        self.config = config
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(config.seed)
        V, d, f, L, T = config.vocab, config.d_model, config.d_ff, config.n_layers, config.seq_len

        def normal(shape, std):
            return rng.normal(0.0, std, size=shape)

        self.params["embed"] = Tensor(normal((V, d), 1.0))
        self.params["pos"] = Tensor(normal((T, d), 0.1))
        out_std = 1.0 / np.sqrt(2 * L)
        for l in range(L):
            p = f"layers.{l}."
            self.params[p + "attn_norm"] = Tensor(np.ones(d))
            for name in ATTN_WEIGHTS:
                std = out_std / np.sqrt(d) if name == "wo" else 1.0 / np.sqrt(d)
                self.params[p + name] = Tensor(normal((d, d), std))
            self.params[p + "ffn_norm"] = Tensor(np.ones(d))
            self.params[p + "w_gate"] = Tensor(normal((d, f), 1.0 / np.sqrt(d)))
            self.params[p + "b_gate"] = Tensor(np.zeros(f))
            self.params[p + "w_up"] = Tensor(normal((d, f), 1.0 / np.sqrt(d)))
            self.params[p + "b_up"] = Tensor(np.zeros(f))
            self.params[p + "w_down"] = Tensor(normal((f, d), out_std / np.sqrt(f)))
            self.params[p + "b_down"] = Tensor(np.zeros(d))
        self.params["final_norm"] = Tensor(np.ones(d))
        self.params["head"] = Tensor(normal((d, V), 1.0 / np.sqrt(d)))
        self._mask = np.triu(np.full((T, T), -1e9), k=1)

    # ----------------------------------------------------------- bookkeeping
    def quant_targets(self, layer: int | None = None) -> list[str]:
        """Names of the weight matrices that get quantized, in layer order."""
        names = FFN_WEIGHTS if self.config.quant_scope == "ffn_only" else ATTN_WEIGHTS + FFN_WEIGHTS
        layers = range(self.config.n_layers) if layer is None else [layer]
        return [f"layers.{l}.{n}" for l in layers for n in names]

    def layer_params(self, layer: int) -> list[str]:
        prefix = f"layers.{layer}."
        return [k for k in self.params if k.startswith(prefix)]

    def param_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def requires_grad_(self, flag: bool = True, names=None) -> ToyTransformer:
        for k, t in self.params.items():
            if names is None or k in names:
                t.requires_grad = flag
        return self

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise ContractError(f"state is missing {sorted(missing)}")
        for k, t in self.params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != t.shape:
                raise DimensionError(f"{k}: expected {t.shape}, got {arr.shape}")
            t.data = arr.copy()

    def clone(self) -> ToyTransformer:
        other = ToyTransformer.__new__(ToyTransformer)
        other.config = self.config
        other.params = {k: Tensor(t.data.copy()) for k, t in self.params.items()}
        other._mask = self._mask
        return other

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k].data).tobytes())
        return h.hexdigest()

    # ---------------------------------------------------------------- forward
    def _weight(self, name: str, ctx: QuantContext) -> Tensor:
        if name in ctx.overrides:
            return as_tensor(ctx.overrides[name])
        return self.params[name]

    def _project(self, x: Tensor, w_name: str, b_name: str | None, ctx: QuantContext, quantized: bool) -> Tensor:
        b = self.params[b_name] if b_name else None
        if w_name in ctx.aux:
            aux = ctx.aux[w_name]
            if w_name in ctx.overrides:
                out = ((x - aux.delta) / aux.s) @ as_tensor(ctx.overrides[w_name]) + ctx.shift_bias[w_name]
                return out + b if b is not None else out
            q = (lambda t: ctx.qfn(w_name, t)) if (ctx.qfn and quantized) else (lambda t: t)
            return apply_affine_aux(x, self.params[w_name], b, aux, q)
        W = self._weight(w_name, ctx)
        if quantized and ctx.qfn is not None and w_name not in ctx.overrides:
            W = ctx.qfn(w_name, W)
        out = x @ W
        return out + b if b is not None else out

    def layer_forward(self, layer: int, X, ctx: QuantContext | None = None) -> Tensor:
        """One attention + FFN block applied to explicit inputs ``X`` of shape [batch, seq, d]."""
        return self.ffn_forward(layer, self.attention_forward(layer, X, ctx), ctx)

    def attention_forward(self, layer: int, X, ctx: QuantContext | None = None) -> Tensor:
        """The attention half of a block, residual included."""
        if not (0 <= layer < self.config.n_layers):
            raise ContractError(f"layer {layer} out of range")
        X = as_tensor(X)
        if X.ndim != 3 or X.shape[-1] != self.config.d_model or X.shape[1] > self.config.seq_len:
            raise DimensionError(f"layer input must be [batch, seq<={self.config.seq_len}, {self.config.d_model}], got {X.shape}")
        ctx = ctx or QuantContext()
        targets = set(self.quant_targets(layer))
        p = f"layers.{layer}."
        T = X.shape[1]

        h = _rmsnorm(X, self.params[p + "attn_norm"])
        proj = lambda name, src: self._project(src, p + name, None, ctx, p + name in targets)  # noqa: E731
        q, k, v = proj("wq", h), proj("wk", h), proj("wv", h)
        scores = (q @ k.swap_last()) * (1.0 / np.sqrt(self.config.d_model)) + self._mask[:T, :T]
        attn = scores.softmax(axis=-1) @ v
        return X + proj("wo", attn)

    def ffn_forward(self, layer: int, X, ctx: QuantContext | None = None) -> Tensor:
        """The FFN half of a block, residual included."""
        X = as_tensor(X)
        ctx = ctx or QuantContext()
        targets = set(self.quant_targets(layer))
        p = f"layers.{layer}."
        h = _rmsnorm(X, self.params[p + "ffn_norm"])
        gate = self._project(h, p + "w_gate", p + "b_gate", ctx, p + "w_gate" in targets)
        up = self._project(h, p + "w_up", p + "b_up", ctx, p + "w_up" in targets)
        down = self._project(gate.gelu() * up, p + "w_down", p + "b_down", ctx, p + "w_down" in targets)
        return X + down

    def attention_quantized(self, layer: int) -> bool:
        return any(n.rsplit(".", 1)[-1] in ATTN_WEIGHTS for n in self.quant_targets(layer))

    def embed(self, tokens) -> Tensor:
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise DimensionError(f"tokens must be [batch, seq], got shape {tokens.shape}")
        if tokens.shape[1] > self.config.seq_len:
            raise ContractError(f"sequence length {tokens.shape[1]} exceeds {self.config.seq_len}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.config.vocab):
            raise ContractError("token id out of range")
        T = tokens.shape[1]
        return embedding(self.params["embed"], tokens) + self.params["pos"][:T]

    def head(self, X: Tensor) -> Tensor:
        return _rmsnorm(X, self.params["final_norm"]) @ self.params["head"]

    def forward(self, tokens, ctx: QuantContext | None = None) -> Tensor:
        """Logits of shape [batch, seq, vocab]."""
        X = self.embed(tokens)
        for layer in range(self.config.n_layers):
            X = self.layer_forward(layer, X, ctx)
        return self.head(X)

    __call__ = forward

    def capture_activations(self, calibration_tokens) -> list[LayerActivations]:
        """Float inputs to every layer over all calibration batches.

        ``calibration_tokens`` is a [batch, seq] array or a list of them.
        """
        batches = [calibration_tokens] if np.ndim(calibration_tokens) == 2 else list(calibration_tokens)
        per_layer: list[list[np.ndarray]] = [[] for _ in range(self.config.n_layers)]
        for tokens in batches:
            X = self.embed(tokens).detach()
            for layer in range(self.config.n_layers):
                per_layer[layer].append(X.data.copy())
                X = self.layer_forward(layer, X).detach()
        return [LayerActivations(l, np.concatenate(xs, axis=0)) for l, xs in enumerate(per_layer)]
