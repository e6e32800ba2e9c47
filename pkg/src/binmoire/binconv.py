"""XNOR-popcount convolution, gated binary convolution and RPReLU."""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .tensor_core import (
    BitTensor,
    DimensionError,
    DomainError,
    check_tensor4,
    compute_alpha,
    pack_bool,
    sign_binarize,
)

# Binary inputs are padded with logical -1 (a cleared bit).
BINARY_PAD_VALUE = -1.0


@dataclass(frozen=True)
class ConvSpec:
    c_in: int
    c_out: int
    k: int = 3
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.k < 1 or self.stride < 1 or self.padding < 0:
            raise ValueError(f"invalid conv spec {self}")
        if self.c_in < 1 or self.c_out < 1:
            raise ValueError(f"invalid channel counts in {self}")

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        oh = (h + 2 * self.padding - self.k) // self.stride + 1
        ow = (w + 2 * self.padding - self.k) // self.stride + 1
        if oh < 1 or ow < 1:
            raise DimensionError(f"{self} gives empty output for input {h}x{w}")
        return oh, ow

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.c_out, self.c_in, self.k, self.k)


@dataclass
class RpreluParams:
    gamma: np.ndarray
    zeta: np.ndarray
    slope: np.ndarray

    @classmethod
    def identity(cls, channels: int, dtype=np.float32) -> "RpreluParams":
        return cls(
            np.zeros(channels, dtype), np.zeros(channels, dtype), np.ones(channels, dtype)
        )


def _fault_enabled() -> bool:
    return os.environ.get("BINMOIRE_FAULT", "") == "popcount"


def _channel_packed(bits: np.ndarray) -> BitTensor:
    # (B, C, H, W) -> words (B, H, W, n_words), channels packed innermost
    return pack_bool(np.moveaxis(bits, 1, -1), inner_dims=1)


def xnor_conv2d(xb: BitTensor, wb: BitTensor, spec: ConvSpec) -> np.ndarray:
    """Binary convolution computed as ``2 * popcount(XNOR) - N`` per window.

    Args:
        xb: Activations, logical shape (B, C_in, H, W).
        wb: Weights, logical shape (C_out, C_in, K, K).
        spec: Convolution geometry. Padding uses logical -1.

    Returns:
        float32 array (B, C_out, H', W') with integer values.
    """
    B, C, H, W = xb.logical_shape
    if C != spec.c_in:
        raise DimensionError(f"input has {C} channels, spec expects {spec.c_in}")
    if tuple(wb.logical_shape) != spec.weight_shape:
        raise DimensionError(
            f"weight shape {wb.logical_shape} does not match {spec.weight_shape}"
        )
    oh, ow = spec.out_hw(H, W)
    p = spec.padding
    xbits = xb.to_bool()
    if p:
        xbits = np.pad(xbits, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=False)
    xw = _channel_packed(xbits)
    ww = _channel_packed(wb.to_bool())
    _kernels.configure_threads()
    out = _kernels.xnor_popcount_conv(
        xw.words, ww.words, xw.row_mask(), spec.stride, oh, ow
    )
    if _fault_enabled():
        # test hook: one window miscounts a single bit
        out.flat[0] += 2
    return out


def pad_nchw(x, padding: int, value: float):
    if not padding:
        return x
    return np.pad(
        x, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=value
    )


def conv2d(x, w, stride: int = 1, padding: int = 0, pad_value: float = 0.0):
    """Direct float convolution (cross-correlation), one GEMM per kernel tap."""
    B, C, H, W = x.shape
    O, Cw, K, _ = w.shape
    if C != Cw:
        raise DimensionError(f"input has {C} channels, weights expect {Cw}")
    oh = (H + 2 * padding - K) // stride + 1
    ow = (W + 2 * padding - K) // stride + 1
    xp = pad_nchw(x, padding, pad_value)
    taps = np.ascontiguousarray(w.transpose(2, 3, 0, 1))
    out = np.zeros((B, O, oh * ow), dtype=np.result_type(x, w))
    for u in range(K):
        for v in range(K):
            tap = xp[:, :, u : u + stride * oh : stride, v : v + stride * ow : stride]
            out += np.matmul(taps[u, v], tap.reshape(B, C, oh * ow))
    return out.reshape(B, O, oh, ow)


def conv2d_backward(dout, xp, w, stride: int, padding: int):
    """Gradients of :func:`conv2d` given the padded input ``xp``.

    Returns:
        (d_xpadded, d_w); the caller crops the padding off ``d_xpadded``.
    """
    B, O, oh, ow = dout.shape
    _, C, K, _ = w.shape
    d2 = dout.reshape(B, O, oh * ow)
    taps_t = np.ascontiguousarray(w.transpose(2, 3, 1, 0))
    dxp = np.zeros_like(xp)
    dw = np.zeros((K, K, O, C), dtype=w.dtype)
    for u in range(K):
        for v in range(K):
            sl = (slice(None), slice(None),
                  slice(u, u + stride * oh, stride), slice(v, v + stride * ow, stride))
            tap = xp[sl].reshape(B, C, oh * ow)
            dw[u, v] = np.matmul(d2, tap.transpose(0, 2, 1)).sum(axis=0)
            dxp[sl] += np.matmul(taps_t[u, v], d2).reshape(B, C, oh, ow)
    return dxp, dw.transpose(2, 3, 0, 1).copy()


def naive_pm1_conv2d(x_pm1, w_pm1, spec: ConvSpec) -> np.ndarray:
    """Float convolution of dense ±1 operands with -1 padding.

    This is the unpacked reference the XNOR kernel is checked and benchmarked
    against.
    """
    return conv2d(
        np.asarray(x_pm1, np.float32), np.asarray(w_pm1, np.float32),
        spec.stride, spec.padding, BINARY_PAD_VALUE,
    )


def _check_beta(beta, batch: int, channels: int) -> np.ndarray:
    beta = np.asarray(beta, dtype=np.float32)
    if beta.shape != (batch, channels):
        raise DimensionError(f"gate shape {beta.shape} != ({batch}, {channels})")
    if not np.all((beta > 0) & (beta <= 1)):
        raise DomainError("gate values must lie in (0, 1]")
    return beta


def gated_binary_conv(xf, wf, t, beta, spec: ConvSpec, method: str = "literal"):
    """Gated binary convolution ``alpha * sum_c beta_c (Xb_c * Wb_c)``.

    ``method="literal"`` runs one single-channel XNOR convolution per input
    channel and sums the gated responses in ascending channel order. The
    ``"packed"`` path packs all channels together and is only valid when the
    gate is constant across channels for each sample.

    Gated sums are accumulated in float64; with float32 gates every partial
    sum is exact, so both paths agree bit-for-bit under a uniform gate.
    """
    xf = check_tensor4(xf, "xf")
    wf = check_tensor4(wf, "wf")
    B, C, H, W = xf.shape
    if wf.shape != spec.weight_shape or C != spec.c_in:
        raise DimensionError(f"shapes {xf.shape}, {wf.shape} do not match {spec}")
    beta = _check_beta(beta, B, C).astype(np.float64)
    xb = sign_binarize(xf, t)
    wb = sign_binarize(wf, inner_dims=3)
    alpha = compute_alpha(wf).astype(np.float64)

    if method == "packed":
        if not np.all(beta == beta[:, :1]):
            raise DomainError("packed path needs a gate that is uniform per sample")
        acc = xnor_conv2d(xb, wb, spec).astype(np.float64) * beta[:, :1, None, None]
    elif method == "literal":
        xbits = xb.to_bool()
        wbits = wb.to_bool()
        one = ConvSpec(1, spec.c_out, spec.k, spec.stride, spec.padding)
        acc = None
        for c in range(C):
            xc = pack_bool(xbits[:, c : c + 1])
            wc = pack_bool(wbits[:, c : c + 1], inner_dims=3)
            term = xnor_conv2d(xc, wc, one).astype(np.float64) * beta[:, c, None, None, None]
            acc = term if acc is None else acc + term
    else:
        raise ValueError(f"unknown method {method!r}")
    return (alpha[None, :, None, None] * acc).astype(xf.dtype)


def rprelu(x, p: RpreluParams):
    """Shifted PReLU: ``(x - g) + z`` above the knee, ``a * (x - g) + z`` below."""
    x = np.asarray(x)
    C = x.shape[1]
    for name in ("gamma", "zeta", "slope"):
        if np.shape(getattr(p, name)) != (C,):
            raise DimensionError(f"rprelu {name} must have length {C}")
    g = p.gamma[None, :, None, None]
    shifted = x - g
    out = np.where(shifted > 0, shifted, p.slope[None, :, None, None] * shifted)
    return out + p.zeta[None, :, None, None]


def rprelu_backward(dout, x, p: RpreluParams):
    """Returns ``(dx, dgamma, dzeta, dslope)``."""
    shifted = x - p.gamma[None, :, None, None]
    pos = shifted > 0
    local = np.where(pos, 1.0, p.slope[None, :, None, None]).astype(x.dtype)
    dx = dout * local
    dzeta = dout.sum(axis=(0, 2, 3))
    dgamma = -dx.sum(axis=(0, 2, 3))
    dslope = np.where(pos, 0.0, dout * shifted).sum(axis=(0, 2, 3)).astype(x.dtype)
    return dx, dgamma, dzeta, dslope
