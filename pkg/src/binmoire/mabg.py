"""Moire-aware binary gate.

Each channel of a full-precision feature map is summarised by five numbers,
``[mean, std, mean_abs, high_freq_ratio, orientation]``, and a single affine
map shared by all channels turns that vector into a sigmoid gate.

The frequency part uses one level of the orthonormal Haar transform. Band
names follow ``<row filter><column filter>``, so ``lh`` is low-pass along
rows and high-pass along columns.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .tensor_core import DimensionError, check_tensor4

EPS = 1e-8
DESCRIPTOR_ORDER = ("mu", "sigma", "m_abs", "r_hf", "s_orient")


@dataclass
class SubBands:
    ll: np.ndarray
    lh: np.ndarray
    hl: np.ndarray
    hh: np.ndarray

    def as_tuple(self):
        return self.ll, self.lh, self.hl, self.hh


@dataclass
class BandEnergies:
    e_ll: np.ndarray
    e_lh: np.ndarray
    e_hl: np.ndarray
    e_hh: np.ndarray


@dataclass
class FreqDescriptors:
    r_hf: np.ndarray
    s_orient: np.ndarray


@dataclass
class StatsDescriptors:
    mu: np.ndarray
    sigma: np.ndarray
    m_abs: np.ndarray


@dataclass
class GateHead:
    """Shared FC layer: 5 weights in :data:`DESCRIPTOR_ORDER` plus a bias."""

    weight: np.ndarray = field(default_factory=lambda: np.zeros(5, np.float32))
    bias: float = 0.0

    def __post_init__(self):
        self.weight = np.asarray(self.weight).reshape(-1)
        if self.weight.shape != (5,):
            raise DimensionError("gate head expects exactly 5 input features")


def pad_even(x):
    """Edge-replicate the last row/column so both spatial dims are even."""
    _, _, H, W = x.shape
    ph, pw = H % 2, W % 2
    if not (ph or pw):
        return x
    return np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="edge")


def _unpad_grad(dxp, shape):
    _, _, H, W = shape
    dx = dxp[:, :, :H, :W].copy()
    if dxp.shape[2] > H:
        dx[:, :, H - 1, :] += dxp[:, :, H, :W]
    if dxp.shape[3] > W:
        dx[:, :, :, W - 1] += dxp[:, :, :H, W]
        if dxp.shape[2] > H:
            dx[:, :, H - 1, W - 1] += dxp[:, :, H, W]
    return dx


def haar_dwt(x) -> SubBands:
    """Single-level orthonormal 2-D Haar transform of an even-sized tensor."""
    x = np.asarray(x)
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise DimensionError(f"haar_dwt needs even spatial dims, got {x.shape[2:]}")
    a = x[:, :, 0::2, 0::2]
    b = x[:, :, 0::2, 1::2]
    c = x[:, :, 1::2, 0::2]
    d = x[:, :, 1::2, 1::2]
    return SubBands(
        ll=(a + b + c + d) / 2,
        lh=(a - b + c - d) / 2,
        hl=(a + b - c - d) / 2,
        hh=(a - b - c + d) / 2,
    )


def haar_idwt(sb: SubBands):
    """Inverse of :func:`haar_dwt` (also its adjoint, the transform is orthonormal)."""
    ll, lh, hl, hh = sb.as_tuple()
    B, C, h, w = ll.shape
    x = np.empty((B, C, 2 * h, 2 * w), dtype=np.result_type(ll, lh, hl, hh))
    x[:, :, 0::2, 0::2] = (ll + lh + hl + hh) / 2
    x[:, :, 0::2, 1::2] = (ll - lh + hl - hh) / 2
    x[:, :, 1::2, 0::2] = (ll + lh - hl - hh) / 2
    x[:, :, 1::2, 1::2] = (ll - lh - hl + hh) / 2
    return x


def subband_energies(sb: SubBands) -> BandEnergies:
    # mean over each band's own grid; a global factor would cancel in the ratios
    e = [np.abs(band).mean(axis=(2, 3)) for band in sb.as_tuple()]
    return BandEnergies(*e)


def freq_descriptors(e: BandEnergies, eps: float = EPS) -> FreqDescriptors:
    high = e.e_lh + e.e_hl + e.e_hh
    r_hf = high / (e.e_ll + high + eps)
    s = np.maximum(e.e_lh, e.e_hl) / (e.e_lh + e.e_hl + eps)
    return FreqDescriptors(r_hf, s)


def stats_descriptors(x) -> StatsDescriptors:
    """Per-sample, per-channel mean, population std and mean |x|."""
    x = np.asarray(x)
    mu = x.mean(axis=(2, 3))
    sigma = np.sqrt(((x - mu[:, :, None, None]) ** 2).mean(axis=(2, 3)))
    return StatsDescriptors(mu, sigma, np.abs(x).mean(axis=(2, 3)))


def gate_features(x) -> np.ndarray:
    """Stack the five descriptors into an array of shape (B, C, 5)."""
    x = np.asarray(x)
    stats = stats_descriptors(x)
    freq = freq_descriptors(subband_energies(haar_dwt(pad_even(x))))
    return np.stack(
        [stats.mu, stats.sigma, stats.m_abs, freq.r_hf, freq.s_orient], axis=-1
    )


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def predict_gate(x, head: GateHead) -> np.ndarray:
    """Channel gates in (0, 1), shape (B, C)."""
    x = check_tensor4(x)
    beta, _ = gate_forward(x, head.weight, head.bias)
    return beta


def gate_forward(x, weight, bias):
    feats = gate_features(x)
    z = feats @ np.asarray(weight, dtype=x.dtype) + np.asarray(bias, dtype=x.dtype)
    beta = _sigmoid(z).astype(x.dtype)
    return beta, (x, feats, beta, np.asarray(weight, dtype=x.dtype))


def gate_backward(dbeta, cache):
    """Backpropagate through the gate, including the descriptor path into ``x``.

    Returns:
        (dx, dweight, dbias)
    """
    x, feats, beta, weight = cache
    dz = dbeta * beta * (1 - beta)
    dweight = np.einsum("bc,bcf->f", dz, feats)
    dbias = dz.sum()
    dfeat = dz[..., None] * weight
    d_mu, d_sigma, d_m, d_r, d_s = np.moveaxis(dfeat, -1, 0)

    B, C, H, W = x.shape
    n = H * W
    mu, sigma = feats[..., 0], feats[..., 1]
    centered = x - mu[:, :, None, None]
    safe = np.where(sigma > 0, sigma, 1)
    dx = (d_mu / n)[:, :, None, None] + np.sign(x) * (d_m / n)[:, :, None, None]
    dx = dx + centered * np.where(sigma > 0, d_sigma / (n * safe), 0)[:, :, None, None]

    xp = pad_even(x)
    sb = haar_dwt(xp)
    e = subband_energies(sb)
    high = e.e_lh + e.e_hl + e.e_hh
    tot = e.e_ll + high + EPS
    d_ll = -d_r * high / tot**2
    d_high = d_r * (tot - high) / tot**2
    den = e.e_lh + e.e_hl + EPS
    top = np.maximum(e.e_lh, e.e_hl)
    lh_wins = e.e_lh >= e.e_hl
    d_lh = d_high + d_s * (lh_wins / den - top / den**2)
    d_hl = d_high + d_s * (~lh_wins / den - top / den**2)
    d_hh = d_high

    m = sb.ll.shape[2] * sb.ll.shape[3]
    dbands = [
        np.sign(band) * (g / m)[:, :, None, None]
        for band, g in zip(sb.as_tuple(), (d_ll, d_lh, d_hl, d_hh))
    ]
    dxp = haar_idwt(SubBands(*dbands))
    dx = dx + _unpad_grad(dxp, x.shape)
    return dx.astype(x.dtype), dweight.astype(x.dtype), x.dtype.type(dbias)


class MoireGate(TransformerMixin, BaseEstimator):
    """Estimator wrapper that maps feature maps (B, C, H, W) to gates (B, C).

    The head is given, not learned, by ``fit``; fitting only records the
    channel count so ``transform`` can reject mismatched inputs.
    """

    def __init__(self, weight=None, bias=0.0):
        self.weight = weight
        self.bias = bias

    def fit(self, X, y=None):
        X = check_tensor4(X, "X")
        self.head_ = GateHead(
            np.zeros(5, np.float32) if self.weight is None else np.asarray(self.weight, np.float32),
            float(self.bias),
        )
        self.n_channels_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "head_")
        X = check_tensor4(X, "X")
        if X.shape[1] != self.n_channels_in_:
            raise DimensionError(
                f"X has {X.shape[1]} channels, gate was fitted on {self.n_channels_in_}"
            )
        return predict_gate(X, self.head_)

    def descriptors(self, X):
        """Raw (B, C, 5) descriptor vectors in :data:`DESCRIPTOR_ORDER`."""
        return gate_features(check_tensor4(X, "X"))
