"""Binarized residual blocks, a small U-shaped network, and cost accounting.

Every block computes ``rprelu(alpha * sum_c beta_c (Xb_c * Wb_c)) + shortcut(x)``.
The first and last convolutions stay full precision. Forward passes keep
the intermediate values that the backward rules in :mod:`binmoire.train`
need.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction

import numpy as np

from .binconv import BINARY_PAD_VALUE, ConvSpec, RpreluParams, conv2d, pad_nchw, rprelu
from .mabg import gate_forward
from .sgra import SgraParams, choose_groups, init_sgra, sgra_forward
from .tensor_core import ConfigError, check_tensor4

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


@dataclass
class NetworkConfig:
    scales: int = 2
    base_channels: int = 16
    blocks_per_scale: int = 2
    in_channels: int = 3
    out_channels: int = 3
    kernel: int = 3
    use_mabg: bool = True
    use_sgra: bool = True
    group_divisor: int = 1
    global_residual: bool = True

    def __post_init__(self):
        for name in ("scales", "base_channels", "blocks_per_scale", "in_channels",
                     "out_channels", "kernel", "group_divisor"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or v < 1:
                raise ConfigError(f"network.{name} must be a positive integer, got {v!r}")
        if self.kernel % 2 == 0:
            raise ConfigError("network.kernel must be odd")
        for name in ("use_mabg", "use_sgra", "global_residual"):
            if not isinstance(getattr(self, name), bool):
                raise ConfigError(f"network.{name} must be a boolean")
        if self.global_residual and self.in_channels != self.out_channels:
            raise ConfigError("global_residual needs in_channels == out_channels")

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown network keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def channels(self, level: int) -> int:
        return self.base_channels * 2**level


def load_config(path) -> tuple[NetworkConfig, dict]:
    """Read a TOML document with ``[network]`` and optional ``[train]`` sections."""
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    unknown = set(doc) - {"network", "train"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    try:
        net = NetworkConfig.from_dict(doc.get("network", {}))
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return net, dict(doc.get("train", {}))


@dataclass(frozen=True)
class BlockConfig:
    name: str
    conv: ConvSpec
    use_mabg: bool
    shortcut: str  # "identity" | "sgra" | "none"
    upsample: int = 1
    group_divisor: int = 1

    @property
    def binarized(self) -> bool:
        return True


@dataclass(frozen=True)
class FpConvConfig:
    name: str
    conv: ConvSpec

    @property
    def binarized(self) -> bool:
        return False


@dataclass
class Network:
    config: NetworkConfig
    layers: list
    params: dict = field(default_factory=dict)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def layer(self, name: str):
        for lay in self.layers:
            if lay.name == name:
                return lay
        raise KeyError(name)

    def n_params(self) -> int:
        return sum(int(v.size) for v in self.params.values())

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name]).tobytes())
        return h.hexdigest()

    def copy(self) -> "Network":
        return Network(self.config, list(self.layers),
                       {k: v.copy() for k, v in self.params.items()})

    def astype(self, dtype) -> "Network":
        return Network(self.config, list(self.layers),
                       {k: v.astype(dtype) for k, v in self.params.items()})

    def forward(self, x, mode: str = "binary"):
        out, _ = network_forward(self, x, mode=mode, keep=False)
        return out


def layer_graph(cfg: NetworkConfig) -> list:
    """Layers in execution order for the encoder-decoder topology."""
    K, pad = cfg.kernel, cfg.kernel // 2
    ch = cfg.channels
    layers: list = [FpConvConfig("head", ConvSpec(cfg.in_channels, ch(0), K, 1, pad))]

    def block(name, c_in, c_out, stride=1, upsample=1):
        same = c_in == c_out and stride == 1 and upsample == 1
        shortcut = "identity" if same else ("sgra" if cfg.use_sgra else "none")
        return BlockConfig(name, ConvSpec(c_in, c_out, K, stride, pad), cfg.use_mabg,
                           shortcut, upsample, cfg.group_divisor)

    for lvl in range(cfg.scales):
        for j in range(cfg.blocks_per_scale):
            layers.append(block(f"enc{lvl}.{j}", ch(lvl), ch(lvl)))
        if lvl < cfg.scales - 1:
            layers.append(block(f"down{lvl}", ch(lvl), ch(lvl + 1), stride=2))
    for lvl in range(cfg.scales - 2, -1, -1):
        layers.append(block(f"up{lvl}", ch(lvl + 1), ch(lvl), upsample=2))
        for j in range(cfg.blocks_per_scale):
            layers.append(block(f"dec{lvl}.{j}", ch(lvl), ch(lvl)))
    layers.append(FpConvConfig("tail", ConvSpec(ch(0), cfg.out_channels, K, 1, pad)))
    return layers


def _kaiming(rng, shape, gain=1.0):
    fan_in = shape[1] * shape[2] * shape[3]
    bound = gain * math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def build_network(cfg: NetworkConfig | None = None, seed: int = 0, dtype=np.float32) -> Network:
    """Build the layer graph and draw parameters deterministically from ``seed``."""
    cfg = cfg or NetworkConfig()
    layers = layer_graph(cfg)
    rng = np.random.default_rng(seed)
    params: dict = {}
    for lay in layers:
        c = lay.conv
        if isinstance(lay, FpConvConfig):
            gain = 0.1 if lay.name == "tail" and cfg.global_residual else 1.0
            params[f"{lay.name}.weight"] = _kaiming(rng, c.weight_shape, gain)
            continue
        n = lay.name
        params[f"{n}.weight"] = rng.uniform(-0.05, 0.05, size=c.weight_shape)
        params[f"{n}.threshold"] = np.zeros(c.c_in)
        params[f"{n}.gamma"] = np.zeros(c.c_out)
        params[f"{n}.zeta"] = np.zeros(c.c_out)
        params[f"{n}.slope"] = np.full(c.c_out, 0.25)
        params[f"{n}.act_slope"] = np.ones(1)
        if lay.use_mabg:
            params[f"{n}.gate_weight"] = np.zeros(5)
            params[f"{n}.gate_bias"] = np.zeros(1)
        if lay.shortcut == "sgra":
            sp = init_sgra(c.c_in, c.c_out, c.stride, lay.upsample, lay.group_divisor,
                           random_state=int(rng.integers(2**31)))
            params[f"{n}.sgra"] = sp.weights
    params = {k: np.asarray(v, dtype=dtype) for k, v in params.items()}
    return Network(cfg, layers, params)


def sgra_params(net: Network, lay: BlockConfig) -> SgraParams:
    return SgraParams(net.params[f"{lay.name}.sgra"], lay.conv.stride, lay.upsample)


def upsample2(x):
    return x.repeat(2, axis=2).repeat(2, axis=3)


def block_forward(x, lay: BlockConfig, params: dict, mode: str = "binary"):
    """One binarized residual block.

    ``mode="binary"`` binarizes with the sign function. ``mode="surrogate"``
    replaces it by ``tanh(act_slope * (x + t))`` for activations and
    ``clip(w, -1, 1)`` for weights, the smooth functions whose derivatives the
    straight-through rules use.

    Returns:
        (output, cache)
    """
    n, c = lay.name, lay.conv
    P = lambda key: params[f"{n}.{key}"]  # noqa: E731
    u = upsample2(x) if lay.upsample > 1 else x
    w = P("weight")
    pre = u + P("threshold")[None, :, None, None]
    if mode == "binary":
        xb = np.where(pre >= 0, 1, -1).astype(u.dtype)
        wb = np.where(w >= 0, 1, -1).astype(w.dtype)
    elif mode == "surrogate":
        xb = np.tanh(P("act_slope")[0] * pre)
        wb = np.clip(w, -1, 1)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    alpha = np.abs(w).reshape(c.c_out, -1).mean(axis=1)

    gcache = None
    xbp = pad_nchw(xb, c.padding, BINARY_PAD_VALUE)
    if lay.use_mabg:
        beta, gcache = gate_forward(u, P("gate_weight"), P("gate_bias")[0])
        xgp = xbp * beta[:, :, None, None]
    else:
        beta = None
        xgp = xbp
    z = conv2d(xgp, wb, c.stride, 0)
    y = alpha[None, :, None, None] * z
    rp = RpreluParams(P("gamma"), P("zeta"), P("slope"))
    r = rprelu(y, rp)

    if lay.shortcut == "identity":
        sc = x
    elif lay.shortcut == "sgra":
        sc = sgra_forward(x, SgraParams(P("sgra"), c.stride, lay.upsample), r.shape)
    else:
        sc = None
    out = r if sc is None else r + sc
    cache = dict(x=x, u=u, pre=pre, xb=xb, wb=wb, xbp=xbp, xgp=xgp, beta=beta,
                 gcache=gcache, alpha=alpha, z=z, y=y, rp=rp)
    return out, cache


def network_forward(net: Network, x, mode: str = "binary", keep: bool = True):
    """Run the whole network; returns ``(output, caches)``."""
    x = check_tensor4(x, "x", dtype=net.dtype)
    cfg = net.config
    div = 2 ** (cfg.scales - 1)
    if x.shape[2] % div or x.shape[3] % div:
        raise ConfigError(f"spatial dims {x.shape[2:]} must be divisible by {div}")
    caches: list = []
    skips: list = []
    h = x
    for lay in net.layers:
        if isinstance(lay, FpConvConfig):
            inp = h
            h = conv2d(h, net.params[f"{lay.name}.weight"], 1, lay.conv.padding, 0.0)
            caches.append(("fp", lay, inp if keep else None))
            continue
        if lay.name.startswith("down"):
            skips.append(h)
        h, cache = block_forward(h, lay, net.params, mode)
        caches.append(("block", lay, cache if keep else None))
        if lay.name.startswith("up"):
            h = h + skips.pop()
            caches.append(("skip", lay, None))
    if cfg.global_residual:
        h = h + x
    return h, caches


def pad_to_multiple(x, multiple: int):
    """Edge-pad (B, C, H, W) so H and W are multiples of ``multiple``."""
    _, _, H, W = x.shape
    ph, pw = (-H) % multiple, (-W) % multiple
    if not (ph or pw):
        return x
    return np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="edge")


def restore(net: Network, x):
    """Apply the network to arbitrary-size images, padding and cropping as needed."""
    x = check_tensor4(x, "x", dtype=net.dtype)
    _, _, H, W = x.shape
    y = net.forward(pad_to_multiple(x, 2 ** (net.config.scales - 1)))
    return y[:, :, :H, :W]


# --- cost accounting -------------------------------------------------------

@dataclass
class CostRow:
    name: str
    params_f: Fraction
    ops_f: Fraction
    binarized: bool

    @property
    def params_b(self) -> Fraction:
        return self.params_f / 32 if self.binarized else Fraction(0)

    @property
    def ops_b(self) -> Fraction:
        return self.ops_f / 64 if self.binarized else Fraction(0)

    @property
    def params(self) -> Fraction:
        return self.params_b if self.binarized else self.params_f

    @property
    def ops(self) -> Fraction:
        return self.ops_b if self.binarized else self.ops_f

    def as_dict(self) -> dict:
        return {"name": self.name, "params_f": float(self.params_f),
                "params_b": float(self.params_b), "ops_f": float(self.ops_f),
                "ops_b": float(self.ops_b), "binarized": self.binarized}


@dataclass
class CostReport:
    rows: list

    @property
    def params_b(self) -> Fraction:
        return sum((r.params_b for r in self.rows), Fraction(0))

    @property
    def params_f(self) -> Fraction:
        return sum((r.params_f for r in self.rows if not r.binarized), Fraction(0))

    @property
    def ops_b(self) -> Fraction:
        return sum((r.ops_b for r in self.rows), Fraction(0))

    @property
    def ops_f(self) -> Fraction:
        return sum((r.ops_f for r in self.rows if not r.binarized), Fraction(0))

    @property
    def params(self) -> Fraction:
        return self.params_b + self.params_f

    @property
    def ops(self) -> Fraction:
        return self.ops_b + self.ops_f

    def table(self) -> str:
        head = f"{'layer':<18}{'bin':>4}{'params_f':>12}{'params_b':>12}{'ops_f':>16}{'ops_b':>14}"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            lines.append(
                f"{r.name:<18}{'y' if r.binarized else 'n':>4}{float(r.params_f):>12.0f}"
                f"{float(r.params_b):>12.2f}{float(r.ops_f):>16.0f}{float(r.ops_b):>14.2f}"
            )
        lines.append("-" * len(head))
        lines.append(f"Params = {float(self.params_b):.2f} (b) + {float(self.params_f):.0f} (f)"
                     f" = {float(self.params) / 1e6:.4f} M")
        lines.append(f"OPs    = {float(self.ops_b):.2f} (b) + {float(self.ops_f):.0f} (f)"
                     f" = {float(self.ops) / 1e9:.4f} G")
        return "\n".join(lines)


def conv_cost(c_in, c_out, k, out_h, out_w, binarized: bool, name="conv") -> CostRow:
    """Weights ``c_out*c_in*k^2``; MACs ``weights * out_h * out_w``."""
    n_w = c_out * c_in * k * k
    return CostRow(name, Fraction(n_w), Fraction(n_w * out_h * out_w), binarized)


def mabg_cost(channels, h, w, name="mabg") -> CostRow:
    """Gate head (5 weights + bias) and its element ops.

    Counted per input pixel: 4 for the Haar bands, 1 for band energies, 3 for
    the statistics and 1 for applying the gate; plus 6 per channel for the FC.
    """
    return CostRow(name, Fraction(6), Fraction(9 * channels * h * w + 6 * channels), False)


def count_params_ops(net: Network, input_hw) -> CostReport:
    """Per-layer Params/OPs; binarized convs count at 1/32 and 1/64."""
    H, W = (input_hw, input_hw) if np.isscalar(input_hw) else input_hw
    if H < 1 or W < 1:
        raise ValueError("input_hw must be positive")
    rows: list = []
    h, w = H, W
    for lay in net.layers:
        c = lay.conv
        if isinstance(lay, FpConvConfig):
            oh, ow = c.out_hw(h, w)
            rows.append(conv_cost(c.c_in, c.c_out, c.k, oh, ow, False, f"{lay.name}.conv"))
            h, w = oh, ow
            continue
        ih, iw = h * lay.upsample, w * lay.upsample
        oh, ow = c.out_hw(ih, iw)
        rows.append(conv_cost(c.c_in, c.c_out, c.k, oh, ow, True, f"{lay.name}.conv"))
        # thresholds, RPReLU (gamma, zeta, slope) and alpha scaling
        aux_p = c.c_in + 3 * c.c_out
        aux_ops = c.c_in * ih * iw + 3 * c.c_out * oh * ow
        rows.append(CostRow(f"{lay.name}.act", Fraction(aux_p), Fraction(aux_ops), False))
        if lay.use_mabg:
            rows.append(mabg_cost(c.c_in, ih, iw, f"{lay.name}.mabg"))
        if lay.shortcut == "sgra":
            g = choose_groups(c.c_in, c.c_out, lay.group_divisor)
            n_w = c.c_in * c.c_out // g
            rows.append(CostRow(f"{lay.name}.sgra", Fraction(n_w), Fraction(n_w * oh * ow), False))
        h, w = oh, ow
    return CostReport(rows)
