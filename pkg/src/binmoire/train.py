"""Backward rules, optimizer, schedule, synthetic data and the training loop.

The gradient engine is not a general tape: each layer type of the network
has one explicit backward rule. Sign functions are handled with
straight-through estimators, a ``tanh`` surrogate for activations and a
clipped identity for latent weights.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .binconv import conv2d_backward, pad_nchw, rprelu_backward
from .mabg import gate_backward
from .metrics_io import psnr
from .netblocks import (
    ConfigError,
    Network,
    NetworkConfig,
    build_network,
    network_forward,
)
from .sgra import SgraParams, sgra_backward

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
LR_MAX = 2e-4


class TrainingError(RuntimeError):
    """Non-finite loss or gradient during training."""


# --- straight-through rules ------------------------------------------------

def ste_act_backward(grad_out, x, t, slope):
    """Backward of ``sign(x + t)`` through the surrogate ``tanh(slope * (x + t))``.

    Returns:
        (grad_x, grad_t, grad_slope); ``grad_t`` is summed per channel.
    """
    u = x + np.reshape(t, (1, -1, 1, 1))
    sech2 = 1.0 - np.tanh(slope * u) ** 2
    grad_x = grad_out * (slope * sech2)
    grad_t = grad_x.sum(axis=(0, 2, 3))
    grad_slope = np.sum(grad_out * u * sech2)
    return grad_x, grad_t, grad_slope


def ste_weight_backward(grad_out_w, w_latent):
    """Clipped STE: pass the gradient where ``|w| <= 1``, zero elsewhere."""
    return np.where(np.abs(w_latent) <= 1, grad_out_w, 0).astype(grad_out_w.dtype)


# --- backward engine -------------------------------------------------------

def _block_backward(dout, lay, params, cache, grads):
    n, c = lay.name, lay.conv
    P = lambda key: params[f"{n}.{key}"]  # noqa: E731
    x, u = cache["x"], cache["u"]

    dy, dgamma, dzeta, dslope = rprelu_backward(dout, cache["y"], cache["rp"])
    grads[f"{n}.gamma"] = dgamma
    grads[f"{n}.zeta"] = dzeta
    grads[f"{n}.slope"] = dslope

    alpha = cache["alpha"]
    dalpha = (dy * cache["z"]).sum(axis=(0, 2, 3))
    dz = dy * alpha[None, :, None, None]
    dxgp, dwb = conv2d_backward(dz, cache["xgp"], cache["wb"], c.stride, 0)

    w = P("weight")
    n_fan = c.c_in * c.k * c.k
    grads[f"{n}.weight"] = (
        ste_weight_backward(dwb, w)
        + dalpha[:, None, None, None] * np.sign(w) / n_fan
    ).astype(w.dtype)

    beta = cache["beta"]
    if beta is not None:
        dbeta = (dxgp * cache["xbp"]).sum(axis=(2, 3))
        dxbp = dxgp * beta[:, :, None, None]
    else:
        dxbp = dxgp
    p = c.padding
    dxb = dxbp[:, :, p : dxbp.shape[2] - p, p : dxbp.shape[3] - p] if p else dxbp

    slope = P("act_slope")[0]
    du, dt, dact = ste_act_backward(dxb, u, P("threshold"), slope)
    grads[f"{n}.threshold"] = dt
    grads[f"{n}.act_slope"] = np.array([dact], dtype=u.dtype)

    if beta is not None:
        dgx, dgw, dgb = gate_backward(dbeta, cache["gcache"])
        du = du + dgx
        grads[f"{n}.gate_weight"] = dgw
        grads[f"{n}.gate_bias"] = np.array([dgb], dtype=u.dtype)

    if lay.upsample > 1:
        s = lay.upsample
        B, C, H, W = x.shape
        dx = du.reshape(B, C, H, s, W, s).sum(axis=(3, 5))
    else:
        dx = du

    if lay.shortcut == "identity":
        dx = dx + dout
    elif lay.shortcut == "sgra":
        dsx, dws = sgra_backward(dout, x, SgraParams(P("sgra"), c.stride, lay.upsample))
        dx = dx + dsx
        grads[f"{n}.sgra"] = dws
    return dx


def network_backward(net: Network, dout, caches, x=None):
    """Gradients of every parameter given ``dL/d(output)``.

    Returns:
        (grads, dx) where ``grads`` maps parameter names to arrays.
    """
    grads: dict = {}
    dh = dout
    dx_in = dout if net.config.global_residual else None
    skip_grads: list = []
    for kind, lay, cache in reversed(caches):
        if kind == "skip":
            skip_grads.append(dh)
        elif kind == "fp":
            w = net.params[f"{lay.name}.weight"]
            p = lay.conv.padding
            dxp, dw = conv2d_backward(dh, pad_nchw(cache, p, 0.0), w, 1, p)
            grads[f"{lay.name}.weight"] = dw
            dh = dxp[:, :, p : dxp.shape[2] - p, p : dxp.shape[3] - p] if p else dxp
        else:
            dh = _block_backward(dh, lay, net.params, cache, grads)
            if lay.name.startswith("down"):
                dh = dh + skip_grads.pop()
    if dx_in is not None:
        dh = dh + dx_in
    return grads, dh


def l1_loss(out, target):
    """Mean absolute error and its gradient."""
    diff = out - target
    return float(np.abs(diff).mean()), (np.sign(diff) / diff.size).astype(out.dtype)


def loss_and_grads(net: Network, x, target, mode: str = "binary"):
    out, caches = network_forward(net, x, mode=mode)
    loss, dout = l1_loss(out, target)
    grads, _ = network_backward(net, dout, caches)
    return loss, grads


# --- optimizer and schedule ------------------------------------------------

@dataclass
class OptimState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS


def adam_step(params: dict, grads: dict, st: OptimState, lr: float) -> None:
    """In-place Adam update with bias correction.

    Raises:
        TrainingError: naming the first parameter with a non-finite gradient.
    """
    for name in sorted(grads):
        if not np.all(np.isfinite(grads[name])):
            raise TrainingError(f"non-finite gradient in {name}")
    st.step += 1
    c1 = 1.0 - st.beta1**st.step
    c2 = 1.0 - st.beta2**st.step
    for name in sorted(grads):
        g = grads[name].astype(np.float64)
        m = st.m.get(name)
        if m is None:
            m = np.zeros_like(g)
            st.v[name] = np.zeros_like(g)
        m = st.beta1 * m + (1 - st.beta1) * g
        v = st.beta2 * st.v[name] + (1 - st.beta2) * g * g
        st.m[name], st.v[name] = m, v
        upd = lr * (m / c1) / (np.sqrt(v / c2) + st.eps)
        p = params[name]
        params[name] = (p - upd).astype(p.dtype)


@dataclass(frozen=True)
class LrSchedule:
    lr_max: float = LR_MAX
    period: int = 1000


def lr_at(k: int, sched: LrSchedule = LrSchedule()) -> float:
    """Cyclic cosine annealing, restarting every ``period`` steps."""
    if k < 0:
        raise ValueError("step must be non-negative")
    return sched.lr_max * (1 + math.cos(math.pi * (k % sched.period) / sched.period)) / 2


# --- synthetic data --------------------------------------------------------

@dataclass
class MoireSample:
    clean: np.ndarray
    degraded: np.ndarray
    seed: int


def _clean_content(rng, hw):
    yy, xx = np.mgrid[0:hw, 0:hw] / hw
    img = np.empty((3, hw, hw))
    for ch in range(3):
        a, b, c0 = rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4), rng.uniform(0.3, 0.7)
        img[ch] = c0 + a * (xx - 0.5) + b * (yy - 0.5)
    for _ in range(rng.integers(2, 6)):
        color = rng.uniform(0, 1, size=3)
        cx, cy = rng.uniform(0, 1, size=2)
        if rng.random() < 0.5:
            r = rng.uniform(0.08, 0.3)
            mask = (xx - cx) ** 2 + (yy - cy) ** 2 < r * r
        else:
            wx, wy = rng.uniform(0.1, 0.4, size=2)
            mask = (np.abs(xx - cx) < wx / 2) & (np.abs(yy - cy) < wy / 2)
        img[:, mask] = 0.5 * img[:, mask] + 0.5 * color[:, None]
    # faint low-frequency texture
    fx, fy = rng.uniform(1, 3, size=2)
    img += 0.05 * np.sin(2 * np.pi * (fx * xx + fy * yy) + rng.uniform(0, 2 * np.pi))
    return np.clip(img, 0, 1)


def _grating(rng, hw):
    yy, xx = np.mgrid[0:hw, 0:hw] / hw
    f = rng.uniform(4, hw / 4)
    theta = rng.uniform(0, np.pi)
    phase = rng.uniform(0, 2 * np.pi)
    return np.sin(2 * np.pi * f * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)


def synth_moire(seed: int, hw: int = 64, amplitude=None) -> MoireSample:
    """Procedural clean image plus a product-of-gratings moire overlay.

    Args:
        seed: Fully determines the pair.
        hw: Square image size, at least 32.
        amplitude: Overlay amplitude; drawn from [0.1, 0.4] when None.
    """
    if hw < 32:
        raise ValueError("hw must be >= 32")
    rng = np.random.default_rng(seed)
    clean = _clean_content(rng, hw)
    overlay = _grating(rng, hw) * _grating(rng, hw)
    amp = rng.uniform(0.1, 0.4) if amplitude is None else float(amplitude)
    tint = rng.uniform(0.6, 1.0, size=3)
    degraded = np.clip(clean + amp * tint[:, None, None] * overlay, 0, 1)
    return MoireSample(clean.astype(np.float32), degraded.astype(np.float32), seed)


def sample_batch(seed: int, step: int, batch: int, crop: int):
    """Training pairs for one step; seeds are a pure function of (seed, step)."""
    ss = np.random.SeedSequence([seed, step])
    seeds = ss.generate_state(batch)
    pairs = [synth_moire(int(s), crop) for s in seeds]
    return (np.stack([p.degraded for p in pairs]), np.stack([p.clean for p in pairs]))


def heldout_pairs(n: int = 32, hw: int = 64, seed: int = 10_000):
    """Validation pairs drawn from a seed range disjoint from training streams."""
    return [synth_moire(seed + i, hw) for i in range(n)]


# --- training loop ---------------------------------------------------------

@dataclass
class TrainConfig:
    steps: int = 2000
    batch: int = 2
    crop: int = 64
    seed: int = 0
    lr_max: float = LR_MAX
    lr_period: int = 1000
    val_every: int = 100

    def __post_init__(self):
        for name in ("batch", "crop", "lr_period", "val_every"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or v < 1:
                raise ConfigError(f"train.{name} must be a positive integer, got {v!r}")
        if not isinstance(self.steps, int) or self.steps < 0:
            raise ConfigError("train.steps must be a non-negative integer")
        if self.crop < 32:
            raise ConfigError("train.crop must be >= 32")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)

    def schedule(self) -> LrSchedule:
        return LrSchedule(self.lr_max, self.lr_period)


def _grad_norms(grads: dict) -> dict:
    return {k: float(np.sqrt(np.sum(np.square(v, dtype=np.float64)))) for k, v in sorted(grads.items())}


def fit_network(net: Network, sampler, tcfg: TrainConfig, val_pair=None, log_file=None):
    """Optimise ``net`` in place with L1 loss.

    ``sampler(step)`` returns ``(degraded, clean)`` arrays of shape (B, C, H, W).

    Returns:
        list of per-step records ``{step, lr, loss, psnr_val}``.
    """
    st = OptimState()
    sched = tcfg.schedule()
    records = []
    for k in range(tcfg.steps):
        x, y = sampler(k)
        out, caches = network_forward(net, x)
        loss, dout = l1_loss(out, y)
        grads, _ = network_backward(net, dout, caches)
        if not math.isfinite(loss):
            norms = json.dumps(_grad_norms(grads), indent=1)
            raise TrainingError(f"loss is {loss} at step {k}; gradient norms:\n{norms}")
        lr = lr_at(k, sched)
        adam_step(net.params, grads, st, lr)
        pv = None
        if val_pair is not None and ((k + 1) % tcfg.val_every == 0 or k + 1 == tcfg.steps):
            pv = psnr(net.forward(val_pair[0]), val_pair[1])
        rec = {"step": k, "lr": lr, "loss": loss, "psnr_val": pv}
        records.append(rec)
        if log_file is not None:
            log_file.write(json.dumps(rec) + "\n")
        if k % 100 == 0:
            log.info("step %d lr %.3e loss %.5f", k, lr, loss)
    return records


def train_loop(net_cfg: NetworkConfig | None = None, train_cfg: TrainConfig | None = None,
               log_path=None):
    """Train on synthetic moire crops.

    Returns:
        (network, records). When ``log_path`` is given the records are also
        written there as JSON lines.
    """
    net_cfg = net_cfg or NetworkConfig()
    tcfg = train_cfg or TrainConfig()
    net = build_network(net_cfg, seed=tcfg.seed)
    val = heldout_pairs(1, tcfg.crop, seed=20_000 + tcfg.seed)[0]
    val_pair = (val.degraded[None], val.clean[None])

    def sampler(k):
        return sample_batch(tcfg.seed, k, tcfg.batch, tcfg.crop)

    if log_path is None:
        return net, fit_network(net, sampler, tcfg, val_pair)
    with open(log_path, "w") as fh:
        return net, fit_network(net, sampler, tcfg, val_pair, fh)


def evaluate_pairs(net: Network, pairs) -> dict:
    """Mean PSNR of degraded inputs and restored outputs against clean images."""
    from .netblocks import restore

    p_in, p_out = [], []
    for s in pairs:
        out = np.clip(restore(net, s.degraded[None])[0], 0, 1)
        p_in.append(psnr(s.degraded, s.clean))
        p_out.append(psnr(out, s.clean))
    return {"psnr_in": float(np.mean(p_in)), "psnr_out": float(np.mean(p_out))}


def train_config_dict(tcfg: TrainConfig) -> dict:
    return asdict(tcfg)
