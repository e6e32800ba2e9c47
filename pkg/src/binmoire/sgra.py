"""Shuffle-grouped residual adapter.

A shortcut for blocks whose input and output shapes differ: ``g`` independent
1x1 projections on contiguous channel partitions, spatial stride (or 2x
nearest upsampling) to match resolution, then an interleaving permutation
that alternates channels from different partitions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils import check_random_state
from sklearn.utils.validation import check_is_fitted

from .tensor_core import ConfigError, DimensionError, check_tensor4


def choose_groups(c_in: int, c_out: int, divisor: int = 1) -> int:
    """Partition count ``gcd(c_in, c_out) / divisor``."""
    if c_in < 1 or c_out < 1:
        raise ConfigError("channel counts must be positive")
    g = math.gcd(c_in, c_out)
    if divisor < 1 or g % divisor:
        raise ConfigError(f"divisor {divisor} does not divide gcd({c_in}, {c_out}) = {g}")
    return g // divisor


def weight_count(c_in: int, c_out: int, g: int) -> int:
    return c_in * c_out // g


@dataclass
class SgraParams:
    """``weights`` has shape (g, c_out/g, c_in/g)."""

    weights: np.ndarray
    stride: int = 1
    upsample: int = 1

    def __post_init__(self):
        if self.weights.ndim != 3:
            raise DimensionError("SGRA weights must have shape (g, c_out, c_in)")
        if self.stride < 1 or self.upsample not in (1, 2):
            raise ConfigError(f"stride={self.stride}, upsample={self.upsample} unsupported")
        if self.stride > 1 and self.upsample > 1:
            raise ConfigError("stride and upsample are mutually exclusive")

    @property
    def g(self) -> int:
        return self.weights.shape[0]

    @property
    def c_in(self) -> int:
        return self.g * self.weights.shape[2]

    @property
    def c_out(self) -> int:
        return self.g * self.weights.shape[1]

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        if self.upsample > 1:
            return h * self.upsample, w * self.upsample
        return -(-h // self.stride), -(-w // self.stride)


def init_sgra(c_in, c_out, stride=1, upsample=1, divisor=1, random_state=None,
              dtype=np.float32) -> SgraParams:
    """Uniform fan-in initialisation, ``U(-1/sqrt(c_in/g), 1/sqrt(c_in/g))``."""
    g = choose_groups(c_in, c_out, divisor)
    rng = check_random_state(random_state)
    bound = 1.0 / math.sqrt(c_in // g)
    w = rng.uniform(-bound, bound, size=(g, c_out // g, c_in // g)).astype(dtype)
    return SgraParams(w, stride, upsample)


def _resample(x, p: SgraParams):
    if p.upsample > 1:
        return x.repeat(p.upsample, axis=2).repeat(p.upsample, axis=3)
    if p.stride > 1:
        return x[:, :, :: p.stride, :: p.stride]
    return x


def partition_project(x, p: SgraParams):
    """Per-partition 1x1 projection; partitions are contiguous channel blocks."""
    x = np.asarray(x)
    B, C, _, _ = x.shape
    if C != p.c_in:
        raise DimensionError(f"input has {C} channels, adapter expects {p.c_in}")
    xs = _resample(x, p)
    _, _, H, W = xs.shape
    parts = xs.reshape(B, p.g, C // p.g, H * W)
    u = np.matmul(p.weights.astype(x.dtype, copy=False)[None], parts)
    return u.reshape(B, p.c_out, H, W)


def interleave_perm(channels: int, g: int) -> np.ndarray:
    """Source index for every destination channel: ``dst = t*g + k <- src = k*m + t``."""
    if channels % g:
        raise DimensionError(f"{channels} channels not divisible by g={g}")
    m = channels // g
    return np.arange(channels).reshape(g, m).T.reshape(-1)


def interleave(u, g: int):
    u = np.asarray(u)
    B, C, H, W = u.shape
    if C % g:
        raise DimensionError(f"{C} channels not divisible by g={g}")
    m = C // g
    return u.reshape(B, g, m, H, W).transpose(0, 2, 1, 3, 4).reshape(B, C, H, W)


def deinterleave(y, g: int):
    """Inverse of :func:`interleave`, equal to ``interleave(y, C // g)``."""
    return interleave(y, y.shape[1] // g)


def sgra_forward(x, p: SgraParams | None, target_shape):
    """Shortcut branch. ``p=None`` means identity, valid only for matching shapes.

    ``target_shape`` is (C, H, W) or (B, C, H, W).
    """
    x = np.asarray(x)
    target = tuple(target_shape)[-3:]
    if p is None:
        if x.shape[1:] != target:
            raise ConfigError(f"identity shortcut cannot map {x.shape[1:]} to {target}")
        return x
    if p.c_in != x.shape[1] or (p.c_out, *p.out_hw(*x.shape[2:])) != target:
        raise ConfigError(f"adapter cannot map {x.shape[1:]} to {target}")
    return interleave(partition_project(x, p), p.g)


def sgra_backward(dy, x, p: SgraParams):
    """Returns ``(dx, dweights)`` for :func:`sgra_forward` with adapter ``p``."""
    du = deinterleave(dy, p.g)
    B, C_out, H, W = du.shape
    xs = _resample(x, p)
    parts = xs.reshape(B, p.g, p.c_in // p.g, H * W)
    dparts = du.reshape(B, p.g, C_out // p.g, H * W)
    dweights = np.matmul(dparts, parts.transpose(0, 1, 3, 2)).sum(axis=0)
    dxs = np.matmul(p.weights.transpose(0, 2, 1)[None], dparts).reshape(xs.shape)
    if p.upsample > 1:
        s = p.upsample
        Bx, Cx, Hx, Wx = x.shape
        dx = dxs.reshape(Bx, Cx, Hx, s, Wx, s).sum(axis=(3, 5))
    elif p.stride > 1:
        dx = np.zeros_like(x)
        dx[:, :, :: p.stride, :: p.stride] = dxs
    else:
        dx = dxs
    return dx, dweights.astype(p.weights.dtype)


def group_distribution_report(u_before, y_after, g: int, bins: int = 32):
    """Per-group activation histograms before and after interleaving.

    Group ``k`` is the channel block ``[k*m, (k+1)*m)`` of each tensor. All
    histograms share bin edges spanning both tensors; a constant input
    collapses to a single bin.

    Returns:
        list of records ``{"group", "stage", "bin_edges", "counts"}``.
    """
    if bins < 2:
        raise ValueError("bins must be >= 2")
    u = np.asarray(u_before)
    y = np.asarray(y_after)
    if u.shape != y.shape:
        raise DimensionError(f"shape mismatch {u.shape} vs {y.shape}")
    C = u.shape[1]
    if C % g:
        raise DimensionError(f"{C} channels not divisible by g={g}")
    m = C // g
    lo = float(min(u.min(), y.min()))
    hi = float(max(u.max(), y.max()))
    edges = np.array([lo, hi]) if lo == hi else np.linspace(lo, hi, bins + 1)
    records = []
    for stage, t in (("before", u), ("after", y)):
        for k in range(g):
            vals = t[:, k * m : (k + 1) * m].ravel()
            if lo == hi:
                counts = np.array([vals.size])
            else:
                counts, _ = np.histogram(vals, bins=edges)
            records.append(
                {"group": k, "stage": stage, "bin_edges": edges.tolist(),
                 "counts": counts.astype(int).tolist()}
            )
    return records


class SgraAdapter(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``fit`` draws adapter weights for the input width."""

    def __init__(self, c_out=None, stride=1, upsample=1, group_divisor=1, random_state=None):
        self.c_out = c_out
        self.stride = stride
        self.upsample = upsample
        self.group_divisor = group_divisor
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_tensor4(X, "X")
        c_in = X.shape[1]
        c_out = c_in if self.c_out is None else int(self.c_out)
        self.params_ = init_sgra(
            c_in, c_out, self.stride, self.upsample, self.group_divisor, self.random_state
        )
        self.n_channels_in_ = c_in
        return self

    def transform(self, X):
        check_is_fitted(self, "params_")
        X = check_tensor4(X, "X")
        p = self.params_
        return sgra_forward(X, p, (p.c_out, *p.out_hw(*X.shape[2:])))
