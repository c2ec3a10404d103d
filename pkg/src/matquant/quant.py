"""Integer weight quantizers, MSB slicing and code statistics.

Codes are unsigned.  A c-bit tensor holds codes in ``[0, 2**c - 1]`` with one
scale ``alpha`` and zero-point ``z`` per channel, and dequantizes as
``alpha * (code - z)``.  Slicing keeps the c-bit scale and zero-point and
moves the codes onto the coarser ``2**(c - r)``-spaced grid, so every sliced
model lives inside the same value domain as its parent.

Scales and zero-points are rounded to float32 when they are created, which is
the precision they are serialized with; everything else runs in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Literal

import numpy as np

from .autodiff import DTYPE, Tensor, as_tensor
from .errors import ContractError, DimensionError

SliceMode = Literal["plain", "extra"]

ALPHA_EPS = 1e-12
MIN_BITS, MAX_BITS = 2, 8


def _check_bits(c: int) -> None:
    if not (MIN_BITS <= int(c) <= MAX_BITS):
        raise ContractError(f"bit-width must lie in [{MIN_BITS}, {MAX_BITS}], got {c}")


def _reduce_axes(ndim: int, axis: int | None) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axis = axis % ndim
    return tuple(a for a in range(ndim) if a != axis)


def _channel_shape(shape: tuple[int, ...], axis: int | None) -> tuple[int, ...]:
    """Broadcast shape for per-channel vectors."""
    if axis is None:
        return (1,) * len(shape)
    out = [1] * len(shape)
    out[axis % len(shape)] = shape[axis % len(shape)]
    return tuple(out)


def _as_channel(v, shape: tuple[int, ...], axis: int | None) -> np.ndarray:
    return np.asarray(v, dtype=DTYPE).reshape(_channel_shape(shape, axis))


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------


@dataclass
class QuantParams:
    """Dequantization parameters for one tensor.

    ``alpha`` and ``z`` are flat per-channel arrays (length 1 when
    ``axis is None``).  ``gamma`` and ``beta`` record the clipping scales the
    parameters were derived from; both are 1 for plain MinMax.
    """

    alpha: np.ndarray
    z: np.ndarray
    c: int
    axis: int | None = None
    gamma: np.ndarray | float = 1.0
    beta: np.ndarray | float = 1.0
    collapsed_channels: int = 0

    def __post_init__(self):
        _check_bits(self.c)
        self.alpha = np.asarray(self.alpha, dtype=np.float32).reshape(-1)
        self.z = np.asarray(self.z, dtype=np.float32).reshape(-1)
        if self.alpha.shape != self.z.shape:
            raise ContractError("alpha and z must have one entry per channel")
        if not np.all(self.alpha > 0):
            raise ContractError("alpha must be positive in every channel")

    @property
    def n_levels(self) -> int:
        return 2**self.c


@dataclass
class AffineAux:
    """Per-input-feature shift ``delta`` and positive scale ``s`` around an affine projection."""

    delta: Tensor
    s: Tensor

    def __post_init__(self):
        self.delta = as_tensor(self.delta)
        self.s = as_tensor(self.s)
        if self.delta.shape != self.s.shape or self.s.ndim != 1:
            raise DimensionError("delta and s must be vectors of the same length")
        if not np.all(np.isfinite(self.delta.data)):
            raise ContractError("delta must be finite")
        if not np.all(self.s.data > 0):
            raise ContractError("s must be strictly positive")

    @classmethod
    def identity(cls, n: int, requires_grad: bool = False) -> AffineAux:
        return cls(Tensor(np.zeros(n), requires_grad), Tensor(np.ones(n), requires_grad))


@dataclass(frozen=True)
class SliceSpec:
    c: int
    r: int
    mode: SliceMode = "plain"

    def __post_init__(self):
        if not (0 < self.r <= self.c <= MAX_BITS):
            raise ContractError(f"slice needs 0 < r <= c <= {MAX_BITS}, got c={self.c}, r={self.r}")
        if self.mode not in ("plain", "extra"):
            raise ContractError(f"unknown slice mode {self.mode!r}")


@dataclass
class QuantizedTensor:
    codes: np.ndarray
    params: QuantParams
    slice_state: tuple[int, SliceMode] | None = None
    shape: tuple[int, ...] = field(init=False)

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.uint16)
        self.shape = self.codes.shape
        top = 2**self.params.c if self.slice_state and self.slice_state[1] == "extra" else 2**self.params.c - 1
        if self.codes.size and int(self.codes.max()) > top:
            raise ContractError(f"codes exceed {top} for a {self.params.c}-bit tensor")

    @property
    def bits(self) -> int:
        """Bit-width the codes currently represent."""
        return self.slice_state[0] if self.slice_state else self.params.c


# ---------------------------------------------------------------------------
# quantizers
# ---------------------------------------------------------------------------


def _affine_params(lo: np.ndarray, hi: np.ndarray, c: int, storage: bool = True):
    """Scale/zero-point for the range [lo, hi] plus a degeneracy mask.

    With ``storage`` the values are rounded to float32 first, so that codes
    are computed against exactly the parameters that get serialized.
    """
    top = 2**c - 1
    raw = (hi - lo) / top
    degenerate = raw <= ALPHA_EPS
    alpha = np.where(degenerate, ALPHA_EPS, raw)
    if storage:
        alpha = alpha.astype(np.float32).astype(DTYPE)
    z = -lo / alpha
    if storage:
        z = z.astype(np.float32).astype(DTYPE)
    return alpha, z, degenerate


def _codes(w: np.ndarray, alpha: np.ndarray, z: np.ndarray, degenerate: np.ndarray, c: int):
    """Rounded pre-clamp codes and their clamped version (half-to-even rounding)."""
    pre = np.rint(w / alpha + z)
    pre = np.where(degenerate, 0.0, pre)
    return pre, np.clip(pre, 0, 2**c - 1)


def _minmax(w: np.ndarray, axis: int | None):
    if w.size == 0:
        raise ContractError("cannot quantize an empty tensor")
    axes = _reduce_axes(w.ndim, axis)
    if axis is not None and w.shape[axis % w.ndim] == 0:
        raise ContractError("cannot quantize an empty channel")
    return w.min(axis=axes, keepdims=True), w.max(axis=axes, keepdims=True)


def _to_array(w) -> np.ndarray:
    data = np.asarray(w.data if isinstance(w, Tensor) else w, dtype=DTYPE)
    if not np.all(np.isfinite(data)):
        raise ContractError("cannot quantize non-finite values")
    return data


def minmax_quantize(w, c: int, axis: int | None = None) -> QuantizedTensor:
    """MinMax quantization: the channel range maps onto ``[0, 2**c - 1]``.

    ``axis`` selects the channel axis (one scale per index along it);
    ``None`` quantizes the whole tensor with a single scale.
    """
    return omni_quantize(w, c, axis=axis)


def omni_quantize(w, c: int, gamma=1.0, beta=1.0, axis: int | None = None) -> QuantizedTensor:
    """MinMax quantization with learnable clipping of the range to ``[beta*min, gamma*max]``.

    ``gamma``/``beta`` are scalars or per-channel vectors (Tensor or array).
    Channels whose clipped range collapses are epsilon-guarded; their count is
    reported in ``params.collapsed_channels``.
    """
    _check_bits(c)
    data = _to_array(w)
    mn, mx = _minmax(data, axis)
    g, b = _to_array(gamma), _to_array(beta)
    lo = b.reshape(mn.shape if b.size > 1 else ()) * mn
    hi = g.reshape(mx.shape if g.size > 1 else ()) * mx
    alpha, z, degenerate = _affine_params(lo, hi, c)
    _, codes = _codes(data, alpha, z, degenerate, c)
    # a constant channel is not a collapse; only the clipped range inverting is
    collapsed = int(np.count_nonzero((hi - lo <= 0) & (mx - mn > 0)))
    params = QuantParams(
        alpha=alpha,
        z=z,
        c=c,
        axis=axis,
        gamma=g,
        beta=b,
        collapsed_channels=collapsed,
    )
    return QuantizedTensor(codes.astype(np.uint16), params)


def dequantize(q: QuantizedTensor) -> Tensor:
    """``alpha * (code - z)`` per channel, always with the source c-bit scale and zero-point."""
    p = q.params
    alpha = _as_channel(p.alpha, q.shape, p.axis)
    z = _as_channel(p.z, q.shape, p.axis)
    return Tensor(alpha * (q.codes.astype(DTYPE) - z))


# ---------------------------------------------------------------------------
# slicing
# ---------------------------------------------------------------------------


def slice_codes(codes: np.ndarray, c: int, r: int, mode: SliceMode = "plain") -> np.ndarray:
    """Keep the ``r`` most significant of ``c`` bits, rounding on bit ``r + 1``.

    The result stays in the c-bit value domain (multiples of ``2**(c - r)``).
    A code rounds up exactly when the first dropped bit is set, so ties go
    up.  ``plain`` clamps to the ``2**r`` representable buckets; ``extra``
    keeps the overflow bucket ``2**r`` (stored value ``2**c``).
    """
    if not (0 < r <= c):
        raise ContractError(f"slice needs 0 < r <= c, got c={c}, r={r}")
    codes = np.asarray(codes, dtype=np.int64)
    shift = c - r
    if shift == 0:
        return codes.astype(np.uint16)
    k = (codes + (1 << (shift - 1))) >> shift
    if mode == "plain":
        k = np.minimum(k, 2**r - 1)
    elif mode != "extra":
        raise ContractError(f"unknown slice mode {mode!r}")
    return (k << shift).astype(np.uint16)


def _spec_for(q: QuantizedTensor, spec: SliceSpec | int, mode: SliceMode) -> SliceSpec:
    if isinstance(spec, SliceSpec):
        if spec.mode != mode:
            raise ContractError(f"expected a {mode} slice spec, got {spec.mode}")
        if spec.c != q.params.c:
            raise ContractError(f"slice spec is for c={spec.c}, tensor has c={q.params.c}")
        out = spec
    else:
        if int(spec) > q.params.c:
            raise ContractError(f"cannot slice {spec} bits out of a {q.params.c}-bit tensor")
        out = SliceSpec(q.params.c, int(spec), mode)
    if q.slice_state is not None:
        raise ContractError("tensor is already sliced; slice from the source codes")
    return out


def slice_msb(q: QuantizedTensor, spec: SliceSpec | int) -> QuantizedTensor:
    """Plain MSB slice: round on the first dropped bit, then clamp into ``2**r`` buckets."""
    spec = _spec_for(q, spec, "plain")
    return QuantizedTensor(slice_codes(q.codes, spec.c, spec.r, "plain"), q.params, (spec.r, "plain"))


def slice_extra(q: QuantizedTensor, spec: SliceSpec | int) -> QuantizedTensor:
    """MSB slice without the clamp, so values near the top may land in an extra bucket."""
    spec = _spec_for(q, spec, "extra")
    return QuantizedTensor(slice_codes(q.codes, spec.c, spec.r, "extra"), q.params, (spec.r, "extra"))


def slice_tensor(q: QuantizedTensor, r: int, mode: SliceMode = "plain") -> QuantizedTensor:
    return slice_extra(q, r) if mode == "extra" else slice_msb(q, r)


def code_histogram(q: QuantizedTensor, at_bits: int, mode: SliceMode | None = None) -> np.ndarray:
    """Counts per r-bit bucket; bucket ``k`` holds the value ``k * 2**(c - r)``.

    Unsliced tensors are sliced first (``plain`` unless ``mode`` says
    otherwise).  Extra-mode histograms carry a trailing overflow bucket.
    """
    c = q.params.c
    if at_bits > c:
        raise ContractError(f"cannot histogram {at_bits} bits of a {c}-bit tensor")
    if q.slice_state is None:
        mode = mode or "plain"
        codes = slice_codes(q.codes, c, at_bits, mode)
    else:
        r, state_mode = q.slice_state
        if r != at_bits or (mode is not None and mode != state_mode):
            raise ContractError(f"tensor was sliced to {q.slice_state}, not ({at_bits}, {mode})")
        mode = state_mode
        codes = q.codes
    n_buckets = 2**at_bits + (1 if mode == "extra" else 0)
    buckets = codes.astype(np.int64).reshape(-1) >> (c - at_bits)
    return np.bincount(buckets, minlength=n_buckets)


def overflow_fraction(q: QuantizedTensor) -> float:
    """Share of entries sitting in the overflow bucket of an extra-mode slice."""
    if q.slice_state is None or q.slice_state[1] != "extra":
        raise ContractError("overflow_fraction needs an extra-mode slice")
    if q.codes.size == 0:
        return 0.0
    return float(np.count_nonzero(q.codes == 2**q.params.c)) / q.codes.size


# ---------------------------------------------------------------------------
# differentiable quantize-dequantize for training
# ---------------------------------------------------------------------------


class NestedFakeQuant:
    """One c-bit quantization of ``w`` inside the tape, sliceable to any ``r <= c``.

    The channel min/max are constants and scales stay in float64 (the
    float32 export from :func:`omni_quantize` agrees to float32 precision).
    Every slice shares the same c-bit codes.  Gradients reach ``w`` through a
    clipped straight-through estimator, blocked where the c-bit code had to be
    clamped, and reach ``gamma``/``beta`` through the exact derivative of the
    dequantized value with the integer code held fixed.
    """

    def __init__(self, w: Tensor, c: int, gamma: Tensor | None = None, beta: Tensor | None = None, axis: int | None = -1):
        _check_bits(c)
        self.w, self.c, self.axis = w, c, axis
        self.gamma, self.beta = gamma, beta
        data = w.data
        self.mn, self.mx = _minmax(data, axis)
        shape = self.mx.shape
        g = 1.0 if gamma is None else gamma.data.reshape(shape if gamma.size > 1 else ())
        b = 1.0 if beta is None else beta.data.reshape(shape if beta.size > 1 else ())
        self.alpha, self.z, degenerate = _affine_params(b * self.mn, g * self.mx, c, storage=False)
        pre, self.codes = _codes(data, self.alpha, self.z, degenerate, c)
        self.in_range = ((pre >= 0) & (pre <= 2**c - 1)).astype(DTYPE)
        self.live = (~degenerate).astype(DTYPE)

    def slice(self, r: int | None = None, mode: SliceMode = "plain") -> Tensor:
        r = self.c if r is None else r
        if r > self.c:
            raise ContractError(f"cannot slice {r} bits out of {self.c}")
        sliced = slice_codes(self.codes, self.c, r, mode).astype(DTYPE)
        out = self.alpha * (sliced - self.z)
        in_range = self.in_range
        if self.gamma is None and self.beta is None:
            return Tensor.from_op(out, (self.w,), lambda g: (g * in_range,), "fake_quantize")

        gamma, beta = self.gamma, self.beta
        frac = sliced / (2**self.c - 1)
        live, mn, mx = self.live, self.mn, self.mx
        axes = _reduce_axes(out.ndim, self.axis)
        parents = [self.w] + [t for t in (gamma, beta) if t is not None]

        def reduce_to(v, like):
            v = v.reshape(-1)
            return v.sum().reshape(like.shape) if like.size == 1 else v.reshape(like.shape)

        def backward(grad):
            grads = [grad * in_range]
            if gamma is not None:
                grads.append(reduce_to((grad * frac * live).sum(axis=axes, keepdims=True) * mx, gamma))
            if beta is not None:
                grads.append(reduce_to((grad * (1.0 - frac) * live).sum(axis=axes, keepdims=True) * mn, beta))
            return grads

        return Tensor.from_op(out, parents, backward, "omni_fake_quantize")


def fake_quantize(
    w: Tensor,
    c: int,
    r: int | None = None,
    mode: SliceMode = "plain",
    gamma: Tensor | None = None,
    beta: Tensor | None = None,
    axis: int | None = -1,
) -> Tensor:
    """Quantize ``w`` at ``c`` bits, slice to ``r`` and dequantize; see :class:`NestedFakeQuant`."""
    return NestedFakeQuant(w, c, gamma, beta, axis).slice(r, mode)


def apply_affine_aux(
    X: Tensor,
    W: Tensor,
    b: Tensor | None,
    aux: AffineAux,
    qfn: Callable[[Tensor], Tensor],
) -> Tensor:
    """Shifted/scaled affine projection ``((X - delta) / s) @ qfn(W * s) + b + delta @ W``.

    ``s`` scales the rows (input features) of ``W``.  With ``qfn`` the
    identity the shift and scale cancel and the result is ``X @ W + b``.
    """
    X, W = as_tensor(X), as_tensor(W)
    if not np.all(aux.s.data > 0):
        raise ContractError("s must be strictly positive")
    if W.ndim != 2 or aux.s.shape[0] != W.shape[0] or X.shape[-1] != W.shape[0]:
        raise DimensionError(f"aux of length {aux.s.shape[0]} does not fit X {X.shape} and W {W.shape}")
    s_col = aux.s.reshape(-1, 1)
    out = ((X - aux.delta) / aux.s) @ qfn(W * s_col) + aux.delta.reshape(1, -1) @ W
    if b is not None:
        out = out + b
    return out


def identity_q(w: Tensor) -> Tensor:
    return w
