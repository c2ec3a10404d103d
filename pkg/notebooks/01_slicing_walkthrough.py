"""
Slicing an int8 checkpoint
==========================

A walk through the quantizer and the bit slicing rule on a random weight
matrix.  Run cell by cell (``# %%`` markers) or as a plain script.
"""

# %%
import numpy as np

from matquant.quant import dequantize, minmax_quantize, slice_codes, slice_tensor, overflow_fraction

rng = np.random.default_rng(0)
W = rng.normal(size=(64, 32))

# %% [markdown]
# Per-output-channel MinMax at 8 bits.  Codes live in [0, 255].

# %%
q8 = minmax_quantize(W, 8, axis=-1)
print(q8.codes.min(), q8.codes.max())
print("int8 reconstruction error", np.abs(dequantize(q8).data - W).max())

# %% [markdown]
# Slicing keeps the top r bits, rounding on the first dropped bit.
# A code is mapped back onto the 8-bit grid so the same scale and zero-point apply.

# %%
for code in (53, 234, 240):
    print(code, "->", slice_codes(np.array([code]), 8, 2)[0], "| extra:", slice_codes(np.array([code]), 8, 2, "extra")[0])

# %%
for r in (8, 6, 4, 3, 2):
    err = np.abs(dequantize(slice_tensor(q8, r)).data - W).mean()
    print(f"int{r}: mean abs error {err:.4f}")

# %% [markdown]
# Extra mode lets large codes round up to 2^c, one level past the top.
# The fraction of such codes is what the sidecar stores.

# %%
q2x = slice_tensor(q8, 2, "extra")
print("overflow fraction", overflow_fraction(q2x))
