"""scikit-learn style front end for the binarized restoration network."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils import check_random_state
from sklearn.utils.validation import check_is_fitted

from .metrics_io import psnr
from .netblocks import NetworkConfig, build_network, restore
from .tensor_core import DimensionError, check_tensor4
from .train import TrainConfig, fit_network


def check_image_pairs(X, y, crop: int):
    """Validate degraded/clean stacks of shape (N, C, H, W) for training."""
    X = check_tensor4(X, "X", dtype=np.float32)
    y = check_tensor4(y, "y", dtype=np.float32)
    if X.shape != y.shape:
        raise DimensionError(f"X {X.shape} and y {y.shape} differ in shape")
    if min(X.shape[2:]) < crop:
        raise DimensionError(f"images {X.shape[2:]} are smaller than crop={crop}")
    return X, y


class BinaryDemoireRegressor(RegressorMixin, BaseEstimator):
    """Image-to-image regressor backed by the 1-bit encoder-decoder.

    ``fit`` takes degraded images ``X`` and clean targets ``y``, both
    (N, 3, H, W) in [0, 1], and trains on random crops with L1 loss.
    ``predict`` restores full images. ``score`` is mean PSNR in dB rather
    than R^2.
    """

    def __init__(self, scales=2, base_channels=16, blocks_per_scale=2, use_mabg=True,
                 use_sgra=True, group_divisor=1, steps=2000, batch_size=2, crop=64,
                 lr_max=2e-4, lr_period=1000, random_state=0):
        self.scales = scales
        self.base_channels = base_channels
        self.blocks_per_scale = blocks_per_scale
        self.use_mabg = use_mabg
        self.use_sgra = use_sgra
        self.group_divisor = group_divisor
        self.steps = steps
        self.batch_size = batch_size
        self.crop = crop
        self.lr_max = lr_max
        self.lr_period = lr_period
        self.random_state = random_state

    def _configs(self, channels):
        net_cfg = NetworkConfig(
            scales=self.scales, base_channels=self.base_channels,
            blocks_per_scale=self.blocks_per_scale, in_channels=channels,
            out_channels=channels, use_mabg=self.use_mabg, use_sgra=self.use_sgra,
            group_divisor=self.group_divisor,
        )
        seed = int(check_random_state(self.random_state).randint(2**31 - 1))
        tcfg = TrainConfig(steps=self.steps, batch=self.batch_size, crop=self.crop,
                           seed=seed, lr_max=self.lr_max, lr_period=self.lr_period)
        return net_cfg, tcfg

    def fit(self, X, y):
        X, y = check_image_pairs(X, y, self.crop)
        net_cfg, tcfg = self._configs(X.shape[1])
        net = build_network(net_cfg, seed=tcfg.seed)
        N, _, H, W = X.shape
        c = self.crop

        def sampler(step):
            rng = np.random.default_rng([tcfg.seed, step])
            idx = rng.integers(N, size=tcfg.batch)
            top = rng.integers(H - c + 1, size=tcfg.batch)
            left = rng.integers(W - c + 1, size=tcfg.batch)
            xs = np.stack([X[i, :, t : t + c, l : l + c] for i, t, l in zip(idx, top, left)])
            ys = np.stack([y[i, :, t : t + c, l : l + c] for i, t, l in zip(idx, top, left)])
            return xs, ys

        self.history_ = fit_network(net, sampler, tcfg)
        self.network_ = net
        self.n_channels_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "network_")
        X = check_tensor4(X, "X", dtype=np.float32)
        if X.shape[1] != self.n_channels_in_:
            raise DimensionError(
                f"X has {X.shape[1]} channels, model was fitted on {self.n_channels_in_}"
            )
        return np.clip(restore(self.network_, X), 0, 1)

    def score(self, X, y, sample_weight=None):
        pred = self.predict(X)
        y = np.asarray(y, dtype=np.float32)
        vals = np.array([psnr(p, t) for p, t in zip(pred, y)])
        return float(np.average(vals, weights=sample_weight))
