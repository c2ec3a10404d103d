"""Packed nested checkpoints.

Layout (all multi-byte scalars little-endian)::

    "MATQ"  magic
    u16     version
    u8      c                      bits per stored code
    u32     metadata length, then that many bytes of UTF-8 JSON
            (model config, axis, tensor table, float/aux section table)
    per quantized tensor, in table order:
        f32[n_channels] alpha, f32[n_channels] z
        ceil(n_codes * c / 8) bytes of codes, MSB-first, row-major
    float section: f64 arrays in table order (non-quantized parameters and
        the shift/scale vectors)
    optional overflow sidecar (extra-mode slice at ``sidecar_bits``):
        per tensor: u32 count, u32[count] sorted flat indices

Readers only consume the declared lengths, so trailing bytes are ignored.
Codes are stored whole; a sliced load unpacks them and applies the rounding
slice, because MSB truncation alone rounds 53 -> 0 instead of 64 at 2 bits.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .checkpoint import QuantizedModel
from .errors import ContractError, FormatError
from .model import ModelConfig
from .quant import QuantizedTensor, QuantParams, SliceMode, slice_tensor

MAGIC = b"MATQ"
VERSION = 1


# ---------------------------------------------------------------------------
# bit packing
# ---------------------------------------------------------------------------


def pack_codes(codes: np.ndarray, c: int) -> bytes:
    """``c`` bits per code, most significant bit first, padded with zeros to a byte."""
    flat = np.asarray(codes, dtype=np.uint16).reshape(-1)
    if flat.size and int(flat.max()) >= 2**c:
        raise ContractError(f"code {int(flat.max())} does not fit in {c} bits")
    shifts = np.arange(c - 1, -1, -1, dtype=np.uint16)
    bits = ((flat[:, None] >> shifts) & 1).astype(np.uint8)
    return np.packbits(bits.reshape(-1)).tobytes()


def unpack_codes(payload: bytes, n: int, c: int) -> np.ndarray:
    need = payload_size(n, c)
    if len(payload) < need:
        raise FormatError(f"payload truncated: need {need} bytes, have {len(payload)}")
    bits = np.unpackbits(np.frombuffer(payload[:need], dtype=np.uint8))[: n * c].reshape(n, c)
    weights = (1 << np.arange(c - 1, -1, -1)).astype(np.uint16)
    return (bits.astype(np.uint16) * weights).sum(axis=1).astype(np.uint16)


def payload_size(n: int, c: int) -> int:
    return (n * c + 7) // 8


# ---------------------------------------------------------------------------
# overflow sidecar
# ---------------------------------------------------------------------------


def overflow_indices(q: QuantizedTensor) -> np.ndarray:
    if q.slice_state is None or q.slice_state[1] != "extra":
        raise ContractError("overflow indices need an extra-mode slice")
    return np.flatnonzero(q.codes.reshape(-1) == 2**q.params.c).astype(np.uint32)


def write_overflow_sidecar(q: QuantizedTensor) -> bytes:
    """``u32 count`` followed by the sorted flat indices of overflow entries."""
    idx = overflow_indices(q)
    return struct.pack("<I", idx.size) + idx.astype("<u4").tobytes()


def read_overflow_sidecar(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Indices and the offset just past them."""
    r = _Reader(buf, offset)
    (count,) = r.unpack("<I")
    idx = np.frombuffer(r.take(4 * count), dtype="<u4").astype(np.uint32)
    return idx, r.pos


# ---------------------------------------------------------------------------
# checkpoint
# ---------------------------------------------------------------------------


class _Reader:
    def __init__(self, buf: bytes, pos: int = 0):
        self.buf, self.pos = buf, pos

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"file truncated at byte {self.pos}: need {n} more, have {len(self.buf) - self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def pack(qm: QuantizedModel, sidecar_bits: int | None = None) -> bytes:
    """Serialize a quantized model.  ``sidecar_bits`` adds the overflow index list of that extra-mode slice."""
    c = qm.c
    for name, q in qm.tensors.items():
        if q.params.c != c:
            raise ContractError(f"{name} is {q.params.c}-bit; every tensor must share c={c}")
        if q.slice_state is not None:
            raise ContractError(f"{name} is sliced; pack the source codes")
    if sidecar_bits is not None and not (1 <= sidecar_bits <= c):
        raise ContractError(f"sidecar bits {sidecar_bits} outside [1, {c}]")

    floats = {k: np.asarray(v, dtype="<f8") for k, v in qm.float_params.items()}
    for name, (delta, s, shift) in qm.affine.items():
        floats[name + ".delta"] = np.asarray(delta, dtype="<f8")
        floats[name + ".s"] = np.asarray(s, dtype="<f8")
        floats[name + ".shift"] = np.asarray(shift, dtype="<f8")
    cfg = qm.config
    meta = {
        "config": {
            "vocab": cfg.vocab, "d_model": cfg.d_model, "d_ff": cfg.d_ff, "n_layers": cfg.n_layers,
            "seq_len": cfg.seq_len, "quant_scope": cfg.quant_scope, "seed": cfg.seed,
        },
        "axis": -1,
        "tensors": [
            {"name": n, "shape": list(q.shape), "channels": int(q.params.alpha.size)} for n, q in qm.tensors.items()
        ],
        "floats": [{"name": k, "shape": list(v.shape)} for k, v in floats.items()],
        "affine": sorted(qm.affine),
        "sidecar_bits": sidecar_bits,
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<HBI", VERSION, c, len(meta_bytes)), meta_bytes]
    for name, q in qm.tensors.items():
        parts.append(q.params.alpha.astype("<f4").tobytes())
        parts.append(q.params.z.astype("<f4").tobytes())
        parts.append(pack_codes(q.codes, c))
    for v in floats.values():
        parts.append(v.tobytes())
    if sidecar_bits is not None:
        for q in qm.tensors.values():
            parts.append(write_overflow_sidecar(slice_tensor(q, sidecar_bits, "extra")))
    return b"".join(parts)


def _read(buf: bytes):
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise FormatError("not a packed checkpoint (bad magic)")
    r = _Reader(buf, 4)
    version, c, meta_len = r.unpack("<HBI")
    if version != VERSION:
        raise FormatError(f"unsupported format version {version}")
    if not (2 <= c <= 8):
        raise FormatError(f"invalid bit-width {c} in header")
    try:
        meta = json.loads(r.take(meta_len).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise FormatError(f"corrupt metadata: {err}") from None
    tensors = {}
    for entry in meta["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape))
        ch = entry["channels"]
        alpha = np.frombuffer(r.take(4 * ch), dtype="<f4")
        z = np.frombuffer(r.take(4 * ch), dtype="<f4")
        codes = unpack_codes(r.take(payload_size(n, c)), n, c).reshape(shape)
        tensors[entry["name"]] = QuantizedTensor(codes, QuantParams(alpha, z, c, axis=meta["axis"]))
    floats = {}
    for entry in meta["floats"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape))
        floats[entry["name"]] = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    sidecar = None
    if meta.get("sidecar_bits") is not None:
        sidecar = {}
        for name in tensors:
            idx, r.pos = read_overflow_sidecar(buf, r.pos)
            sidecar[name] = idx
    return c, meta, tensors, floats, sidecar


def unpack(buf: bytes) -> QuantizedModel:
    c, meta, tensors, floats, _ = _read(buf)
    affine = {}
    for name in meta["affine"]:
        affine[name] = tuple(floats.pop(name + k) for k in (".delta", ".s", ".shift"))
    return QuantizedModel(ModelConfig(**meta["config"]), c, tensors, floats, affine)


def read_sidecar(buf: bytes) -> tuple[int | None, dict[str, np.ndarray] | None]:
    _, meta, _, _, sidecar = _read(buf)
    return meta.get("sidecar_bits"), sidecar


def load_sliced(buf: bytes, r: int, mode: SliceMode = "plain") -> dict[str, QuantizedTensor]:
    """Every tensor sliced to ``r`` bits from its full stored codes."""
    c, _, tensors, _, _ = _read(buf)
    if not (1 <= r <= c):
        raise ContractError(f"cannot slice {r} bits from a {c}-bit checkpoint")
    return {name: slice_tensor(q, r, mode) for name, q in tensors.items()}


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------


def atomic_write(path, data: bytes | str) -> None:
    """Write to a temporary file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data.encode() if isinstance(data, str) else data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(qm: QuantizedModel, path, sidecar_bits: int | None = None) -> None:
    atomic_write(path, pack(qm, sidecar_bits))


def load(path) -> QuantizedModel:
    return unpack(Path(path).read_bytes())

