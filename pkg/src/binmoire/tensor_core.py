"""Dense float tensors, bit-packed sign tensors and binarization helpers.

Full-precision activations are plain ``numpy`` arrays of shape
``(batch, channels, height, width)``. Binary tensors are stored as
:class:`BitTensor`, 64-bit words where a set bit means ``+1`` and a clear bit
means ``-1``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

FLOAT = np.float32
WORD_BITS = 64


class DimensionError(ValueError):
    """Raised when tensor shapes are incompatible."""


class DomainError(ValueError):
    """Raised when values fall outside the domain of an operation."""


class ConfigError(ValueError):
    """Raised for configurations that cannot be realised."""


def check_tensor4(x, name="x", dtype=None, allow_nan=False):
    """Validate a rank-4 ``(B, C, H, W)`` array and return it as ndarray.

    Works like ``sklearn.utils.check_array`` for the 4-d layout used here.
    ``dtype=None`` keeps floating inputs as they are and casts everything
    else to float32.
    """
    arr = np.asarray(x)
    if arr.ndim != 4:
        raise DimensionError(f"{name} must be 4-d (B, C, H, W), got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise DimensionError(f"{name} has an empty axis: {arr.shape}")
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(FLOAT)
    if not allow_nan and not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} contains NaN or Inf")
    return arr


@dataclass(frozen=True)
class BitTensor:
    """Bit-packed ±1 tensor.

    ``words`` has shape ``logical_shape[:-inner_dims] + (n_words,)``: the last
    ``inner_dims`` logical axes are flattened into one row and packed
    little-endian into uint64 words. Bits past the row length are zero and
    never counted.
    """

    logical_shape: tuple
    words: np.ndarray
    inner_dims: int = 1

    @property
    def row_bits(self) -> int:
        return int(np.prod(self.logical_shape[-self.inner_dims:]))

    @property
    def n_words(self) -> int:
        return self.words.shape[-1]

    def row_mask(self) -> np.ndarray:
        """Per-word mask of live bits for one packed row."""
        return live_bit_mask(self.row_bits)

    def to_bool(self) -> np.ndarray:
        """Unpack to a boolean array (True = +1) of ``logical_shape``."""
        lead = self.logical_shape[:-self.inner_dims]
        raw = self.words.astype("<u8", copy=False).view(np.uint8)
        raw = raw.reshape(lead + (self.n_words * 8,))
        bits = np.unpackbits(raw, axis=-1, count=self.row_bits, bitorder="little")
        return bits.astype(bool).reshape(self.logical_shape)


def live_bit_mask(n_bits: int) -> np.ndarray:
    n_words = -(-n_bits // WORD_BITS)
    mask = np.full(n_words, np.iinfo(np.uint64).max, dtype=np.uint64)
    tail = n_bits % WORD_BITS
    if tail:
        mask[-1] = np.uint64((1 << tail) - 1)
    return mask


def pack_bool(bits: np.ndarray, inner_dims: int = 1) -> BitTensor:
    """Pack a boolean array (True = +1) along its last ``inner_dims`` axes."""
    bits = np.asarray(bits, dtype=bool)
    shape = tuple(int(s) for s in bits.shape)
    if not 1 <= inner_dims <= len(shape):
        raise DimensionError(f"inner_dims={inner_dims} invalid for shape {shape}")
    lead = shape[:-inner_dims]
    n = int(np.prod(shape[-inner_dims:]))
    n_words = -(-n // WORD_BITS)
    rows = bits.reshape(lead + (n,))
    packed = np.packbits(rows, axis=-1, bitorder="little")
    pad = n_words * 8 - packed.shape[-1]
    if pad:
        packed = np.concatenate(
            [packed, np.zeros(lead + (pad,), dtype=np.uint8)], axis=-1
        )
    words = np.ascontiguousarray(packed).view("<u8").astype(np.uint64, copy=False)
    return BitTensor(shape, words.reshape(lead + (n_words,)), inner_dims)


def pack(x, inner_dims: int = 1) -> BitTensor:
    """Pack a tensor holding only ±1 values.

    Raises:
        DomainError: if any entry is not exactly +1 or -1.
    """
    x = np.asarray(x)
    if not np.all((x == 1) | (x == -1)):
        raise DomainError("pack expects a tensor of ±1 values only")
    return pack_bool(x > 0, inner_dims=inner_dims)


def unpack(b: BitTensor, dtype=FLOAT) -> np.ndarray:
    """Decode a :class:`BitTensor` back to a dense ±1 array."""
    return np.where(b.to_bool(), 1, -1).astype(dtype)


def sign_pm1(x, dtype=None):
    """Dense sign with the ``sign(0) = +1`` convention."""
    x = np.asarray(x)
    return np.where(x >= 0, 1, -1).astype(dtype or x.dtype)


def sign_binarize(x, t=None, inner_dims: int = 1) -> BitTensor:
    """Binarize ``x + t`` channel-wise to a packed sign tensor.

    Args:
        x: Array of shape (B, C, H, W), or weights (C_out, C_in, K, K).
        t: Per-channel thresholds of length C, or None for zero thresholds.
        inner_dims: Packing depth, 1 for activations and 3 for weights.
    """
    x = np.asarray(x)
    if x.ndim != 4:
        raise DimensionError(f"expected a 4-d tensor, got shape {x.shape}")
    if t is None:
        return pack_bool(x >= 0, inner_dims)
    t = np.asarray(t, dtype=x.dtype).reshape(-1)
    if t.shape[0] != x.shape[1]:
        raise DimensionError(
            f"threshold length {t.shape[0]} != channel count {x.shape[1]}"
        )
    return pack_bool(x + t[None, :, None, None] >= 0, inner_dims)


def compute_alpha(w) -> np.ndarray:
    """Per-output-channel scale ``mean(|w[o]|)`` for weights (C_out, C_in, K, K)."""
    w = np.asarray(w)
    if w.ndim != 4:
        raise DimensionError(f"weights must be 4-d, got shape {w.shape}")
    return np.abs(w).reshape(w.shape[0], -1).mean(axis=1)
