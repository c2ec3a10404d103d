import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from matquant.autodiff import Tensor
from matquant.errors import ContractError
from matquant.quant import (
    AffineAux,
    QuantizedTensor,
    QuantParams,
    SliceSpec,
    apply_affine_aux,
    code_histogram,
    dequantize,
    fake_quantize,
    minmax_quantize,
    omni_quantize,
    overflow_fraction,
    slice_codes,
    slice_extra,
    slice_msb,
)


def raw_tensor(codes, c=8):
    codes = np.asarray(codes)
    return QuantizedTensor(codes, QuantParams(alpha=[1.0], z=[0.0], c=c))


def oracle_slice(code, c, r, extra):
    """Bit-level reading: keep r MSBs, add one if bit r+1 is set, clamp unless extra."""
    shift = c - r
    if shift == 0:
        return code
    k = code >> shift
    if (code >> (shift - 1)) & 1:
        k += 1
    if not extra:
        k = min(k, 2**r - 1)
    return k << shift


# ----------------------------------------------------------------- minmax


def test_minmax_endpoints():
    q = minmax_quantize([0.0, 3.0], 2)
    assert q.params.alpha[0] == 1.0 and q.params.z[0] == 0.0
    np.testing.assert_array_equal(q.codes, [0, 3])
    np.testing.assert_array_equal(dequantize(q).data, [0.0, 3.0])


def test_minmax_symmetric_three_points():
    q = minmax_quantize([-1.0, 0.0, 1.0], 2)
    np.testing.assert_allclose(q.params.alpha, 2 / 3, rtol=1e-7)
    np.testing.assert_allclose(q.params.z, 1.5, rtol=1e-7)
    # 0/alpha + 1.5 is a tie, half-to-even gives 2
    np.testing.assert_array_equal(q.codes, [0, 2, 3])
    np.testing.assert_allclose(dequantize(q).data, [-1.0, 1 / 3, 1.0], rtol=1e-6)


def test_minmax_constant_channel():
    q = minmax_quantize(np.full(7, 5.0), 4)
    np.testing.assert_array_equal(q.codes, 0)
    np.testing.assert_allclose(dequantize(q).data, 5.0, rtol=1e-6)


def test_minmax_rejects_empty_and_bad_bits():
    with pytest.raises(ContractError):
        minmax_quantize(np.zeros((0,)), 4)
    with pytest.raises(ContractError):
        minmax_quantize([1.0, 2.0], 9)


def test_per_channel_axis():
    w = np.array([[0.0, -2.0], [3.0, 2.0]])
    q = minmax_quantize(w, 2, axis=1)
    np.testing.assert_allclose(q.params.alpha, [1.0, 4 / 3], rtol=1e-7)
    np.testing.assert_array_equal(q.codes, [[0, 0], [3, 3]])


@pytest.mark.parametrize("c", [2, 4, 8])
def test_minmax_round_trip_on_grid(c):
    rng = np.random.default_rng(c)
    lo, step = -0.75, 0.125
    k = rng.integers(0, 2**c, size=200)
    k[:2] = [0, 2**c - 1]
    w = lo + step * k
    back = dequantize(minmax_quantize(w, c)).data
    np.testing.assert_allclose(back, w, rtol=1e-6, atol=1e-6 * step)


# --------------------------------------------------------------- omniquant


def test_omni_reduces_to_minmax():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        w = rng.normal(size=int(rng.integers(2, 40))) * rng.uniform(0.01, 10)
        c = int(rng.integers(2, 9))
        a, b = minmax_quantize(w, c), omni_quantize(w, c, gamma=1.0, beta=1.0)
        np.testing.assert_array_equal(a.codes, b.codes)


def test_omni_worked_example():
    q = omni_quantize([-1.0, 0.0, 1.0], 2, gamma=0.5, beta=1.0)
    np.testing.assert_allclose(q.params.alpha, 0.5)
    np.testing.assert_allclose(q.params.z, 2.0)
    np.testing.assert_array_equal(q.codes, [0, 2, 3])


def test_omni_inverted_range_is_guarded():
    q = omni_quantize([-1.0, 1.0], 4, gamma=-1.0, beta=1.0)
    assert q.params.collapsed_channels == 1
    assert np.all(np.isfinite(dequantize(q).data))


def test_dalpha_dgamma_matches_finite_differences():
    """The derivative of the dequantized output in gamma, away from rounding ties."""
    rng = np.random.default_rng(3)
    w = rng.normal(size=(8, 3))
    c = 4
    gamma0 = np.array([0.8, 0.9, 0.95])
    upstream = rng.normal(size=w.shape)

    g = Tensor(gamma0, requires_grad=True)
    (fake_quantize(Tensor(w), c, gamma=g, axis=-1) * Tensor(upstream)).sum().backward()

    def f(gv):
        return (fake_quantize(Tensor(w), c, gamma=Tensor(gv), axis=-1).data * upstream).sum()

    # the derivative is taken with codes fixed, so stay clear of rounding ties
    for gv in (gamma0 - 1e-4, gamma0 + 1e-4):
        other = fake_quantize(Tensor(w), c, gamma=Tensor(gv), axis=-1).data
        base = fake_quantize(Tensor(w), c, gamma=Tensor(gamma0), axis=-1).data
        assert np.max(np.abs(other - base)) < 1e-2

    h = 1e-4
    num = np.zeros(3)
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        num[i] = (f(gamma0 + e) - f(gamma0 - e)) / (2 * h)
    rel = np.abs(g.grad - num) / np.maximum(1.0, np.abs(g.grad))
    assert rel.max() < 1e-3

    # and the scale itself moves by max(w) / (2^c - 1) per unit gamma; alpha is
    # linear in gamma, so a wide step only fights float32 storage noise
    wide = 1e-2
    a_plus = omni_quantize(w, c, gamma=gamma0 + wide, axis=-1).params.alpha.astype(float)
    a_minus = omni_quantize(w, c, gamma=gamma0 - wide, axis=-1).params.alpha.astype(float)
    np.testing.assert_allclose((a_plus - a_minus) / (2 * wide), w.max(axis=0) / (2**c - 1), rtol=1e-3)


# ------------------------------------------------------------------ slicing


@pytest.mark.parametrize(
    "code,expected",
    [(234, 192), (53, 64), (240, 192)],
)
def test_plain_slice_worked_values(code, expected):
    assert slice_msb(raw_tensor([code]), SliceSpec(8, 2)).codes[0] == expected


def test_extra_slice_worked_values():
    assert slice_extra(raw_tensor([234]), SliceSpec(8, 2, "extra")).codes[0] == 256
    assert slice_extra(raw_tensor([53]), 2).codes[0] == 64
    for r in range(1, 9):
        assert slice_extra(raw_tensor([0]), r).codes[0] == 0


def test_slice_identity_when_r_equals_c():
    codes = np.arange(256)
    np.testing.assert_array_equal(slice_msb(raw_tensor(codes), 8).codes, codes)


def test_slice_contract_errors():
    q = raw_tensor([1, 2], c=4)
    with pytest.raises(ContractError):
        slice_msb(q, 5)
    with pytest.raises(ContractError):
        SliceSpec(4, 5)
    with pytest.raises(ContractError):
        slice_msb(slice_msb(q, 2), 2)
    with pytest.raises(ContractError):
        slice_msb(q, SliceSpec(8, 2))


@pytest.mark.parametrize("c", [4, 8])
def test_slicing_exhaustive_properties(c):
    codes = np.arange(2**c)
    for r in range(1, c + 1):
        step = 2 ** (c - r)
        plain = slice_codes(codes, c, r, "plain").astype(int)
        extra = slice_codes(codes, c, r, "extra").astype(int)
        assert np.all(plain % step == 0) and plain.max() <= (2**r - 1) * step
        assert np.all(extra % step == 0) and extra.max() <= 2**c
        assert np.all(np.diff(plain) >= 0) and np.all(np.diff(extra) >= 0)
        np.testing.assert_array_equal(slice_codes(plain, c, r, "plain"), plain)
        np.testing.assert_array_equal(plain, [oracle_slice(int(x), c, r, False) for x in codes])
        np.testing.assert_array_equal(extra, [oracle_slice(int(x), c, r, True) for x in codes])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 255), min_size=1, max_size=50), st.integers(1, 8))
def test_dequantized_slice_lies_on_coarse_grid(codes, r):
    q = QuantizedTensor(np.array(codes), QuantParams(alpha=[0.01], z=[100.5], c=8))
    deq = dequantize(slice_msb(q, r)).data
    grid = float(np.float32(0.01)) * (np.arange(2**r) * 2 ** (8 - r) - 100.5)
    assert np.all(np.min(np.abs(deq[:, None] - grid[None, :]), axis=1) < 1e-9)


# --------------------------------------------------------------- histograms


def test_histogram_simple_cases():
    np.testing.assert_array_equal(code_histogram(raw_tensor(np.zeros(10, int)), 2), [10, 0, 0, 0])
    np.testing.assert_array_equal(code_histogram(raw_tensor([0, 64, 128, 192]), 2), [1, 1, 1, 1])


def test_histogram_exhaustive_bucket_masses():
    # brute-force oracle over the whole int8 domain
    expected = np.zeros(4, int)
    for code in range(256):
        expected[oracle_slice(code, 8, 2, False) // 64] += 1
    np.testing.assert_array_equal(code_histogram(raw_tensor(np.arange(256)), 2), expected)
    np.testing.assert_array_equal(expected, [32, 64, 64, 96])


def test_histogram_uniform_sample_within_four_sigma():
    masses = np.array([32, 64, 64, 96]) / 256
    n = 10_000
    codes = np.random.default_rng(0).integers(0, 256, size=n)
    counts = code_histogram(raw_tensor(codes), 2)
    sigma = np.sqrt(n * masses * (1 - masses))
    assert np.all(np.abs(counts - n * masses) < 4 * sigma)


def test_histogram_extra_has_overflow_bucket():
    counts = code_histogram(slice_extra(raw_tensor([255, 0, 255, 100]), 2), 2)
    np.testing.assert_array_equal(counts, [1, 0, 1, 0, 2])


# ----------------------------------------------------------------- overflow


def test_overflow_fraction_cases():
    assert overflow_fraction(slice_extra(raw_tensor(np.arange(224)), 2)) == 0.0
    assert overflow_fraction(slice_extra(raw_tensor(np.full(9, 255)), 2)) == 1.0
    assert overflow_fraction(slice_extra(raw_tensor(np.arange(256)), 2)) == 32 / 256
    with pytest.raises(ContractError):
        overflow_fraction(slice_msb(raw_tensor([1]), 2))


# ------------------------------------------------------------ affine aux


def test_affine_aux_identity_cases():
    rng = np.random.default_rng(0)
    X, W, b = rng.normal(size=(5, 2)), rng.normal(size=(2, 3)), rng.normal(size=3)
    ref = X @ W + b
    for delta, s in [(np.zeros(2), np.ones(2)), (np.zeros(2), np.full(2, 2.0)), (np.array([1.0, 0.0]), np.ones(2))]:
        out = apply_affine_aux(Tensor(X), Tensor(W), Tensor(b), AffineAux(delta, s), lambda t: t)
        np.testing.assert_allclose(out.data, ref, rtol=1e-12, atol=1e-12)


def test_affine_aux_random_cancellation():
    rng = np.random.default_rng(1)
    for _ in range(50):
        X, W, b = rng.normal(size=(4, 6)), rng.normal(size=(6, 5)), rng.normal(size=5)
        aux = AffineAux(rng.normal(size=6), rng.uniform(0.1, 3.0, size=6))
        out = apply_affine_aux(Tensor(X), Tensor(W), Tensor(b), aux, lambda t: t).data
        ref = X @ W + b
        assert np.max(np.abs(out - ref)) <= 1e-6 * max(1.0, np.max(np.abs(ref)))


def test_affine_aux_rejects_nonpositive_scale():
    with pytest.raises(ContractError):
        AffineAux(np.zeros(2), np.array([1.0, 0.0]))


def test_fake_quantize_matches_export_for_all_slices():
    rng = np.random.default_rng(5)
    w = rng.normal(size=(16, 8))
    q = minmax_quantize(w, 8, axis=-1)
    for r, mode in itertools.product(range(1, 9), ["plain", "extra"]):
        fq = fake_quantize(Tensor(w), 8, r, mode, axis=-1).data
        ref = dequantize(slice_extra(q, r) if mode == "extra" else slice_msb(q, r)).data
        np.testing.assert_allclose(fq, ref, rtol=1e-6, atol=1e-6)
