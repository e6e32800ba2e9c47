"""Oracle-equivalence and invariant suites behind ``binmoire verify``.

Every check compares a fast path against an independent slow one. Random
draws use fixed seeds, so a suite gives the same verdict on every run.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .binconv import ConvSpec, conv2d, gated_binary_conv, naive_pm1_conv2d, xnor_conv2d
from .mabg import (
    GateHead,
    freq_descriptors,
    haar_dwt,
    haar_idwt,
    predict_gate,
    subband_energies,
)
from .netblocks import NetworkConfig, build_network, network_forward
from .sgra import (
    choose_groups,
    init_sgra,
    interleave,
    interleave_perm,
    partition_project,
    weight_count,
)
from .tensor_core import compute_alpha, pack, unpack
from .train import network_backward

SUITES = ("kernels", "mabg", "sgra", "grad")


@dataclass
class Check:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail}"


def random_conv_case(rng):
    """Random (input, weight, spec) with ±1 entries and a valid output size."""
    k = int(rng.integers(1, 6))
    stride = int(rng.integers(1, 4))
    padding = int(rng.integers(0, k))
    c_in = int(rng.integers(1, 80))
    c_out = int(rng.integers(1, 9))
    B = int(rng.integers(1, 3))
    H = int(rng.integers(max(1, k - 2 * padding), k + 12))
    W = int(rng.integers(max(1, k - 2 * padding), k + 12))
    x = rng.choice(np.array([-1.0, 1.0], np.float32), size=(B, c_in, H, W))
    w = rng.choice(np.array([-1.0, 1.0], np.float32), size=(c_out, c_in, k, k))
    return x, w, ConvSpec(c_in, c_out, k, stride, padding)


def per_channel_gated_oracle(xf, wf, t, beta, spec):
    """Float reference for the gated conv: one float conv per input channel."""
    xb = np.where(xf + t[None, :, None, None] >= 0, 1.0, -1.0)
    wb = np.where(wf >= 0, 1.0, -1.0)
    alpha = np.abs(wf.astype(np.float64)).mean(axis=(1, 2, 3))
    acc = 0.0
    for c in range(xf.shape[1]):
        r = conv2d(xb[:, c : c + 1], wb[:, c : c + 1], spec.stride, spec.padding, -1.0)
        acc = acc + beta[:, c, None, None, None].astype(np.float64) * r
    return alpha[None, :, None, None] * acc


def check_kernels(n_conv=200, n_gated=100, seed=0):
    rng = np.random.default_rng(seed)
    exact = 0
    for _ in range(n_conv):
        x, w, spec = random_conv_case(rng)
        got = xnor_conv2d(pack(x), pack(w, inner_dims=3), spec)
        exact += bool(np.array_equal(got, naive_pm1_conv2d(x, w, spec)))
    out = [Check("xnor_conv2d", exact == n_conv, f"{exact}/{n_conv} exact")]

    worst, agree = 0.0, 0
    for _ in range(n_gated):
        x, w, spec = random_conv_case(rng)
        xf = rng.normal(size=x.shape).astype(np.float32)
        wf = rng.normal(size=w.shape).astype(np.float32)
        t = rng.normal(scale=0.3, size=spec.c_in).astype(np.float32)
        beta = rng.uniform(0.01, 1.0, size=(x.shape[0], spec.c_in)).astype(np.float32)
        got = gated_binary_conv(xf, wf, t, beta, spec).astype(np.float64)
        ref = per_channel_gated_oracle(xf, wf, t, beta, spec)
        scale = max(np.abs(ref).max(), 1e-12)
        worst = max(worst, float(np.abs(got - ref).max() / scale))
        ones = np.ones_like(beta)
        lit = gated_binary_conv(xf, wf, t, ones, spec, method="literal")
        pk = gated_binary_conv(xf, wf, t, ones, spec, method="packed")
        agree += bool(np.array_equal(lit, pk))
    out.append(Check("gated_binary_conv", worst <= 1e-6, f"max rel err {worst:.2e} over {n_gated}"))
    out.append(Check("gated literal == packed (beta=1)", agree == n_gated, f"{agree}/{n_gated} exact"))

    ok = 0
    for _ in range(100):
        shape = tuple(int(s) for s in rng.integers(1, 7, size=4))
        shape = shape[:3] + (int(rng.integers(1, 140)),)
        x = rng.choice(np.array([-1.0, 1.0], np.float32), size=shape)
        ok += bool(np.array_equal(unpack(pack(x)), x))
    out.append(Check("pack/unpack round trip", ok == 100, f"{ok}/100 exact"))

    w = rng.normal(size=(6, 5, 3, 3))
    loop = np.array([sum(abs(v) for v in w[o].ravel()) / w[o].size for o in range(6)])
    err = float(np.max(np.abs(compute_alpha(w) - loop) / loop))
    out.append(Check("compute_alpha", err <= 1e-12, f"rel err {err:.1e}"))
    return out


def check_mabg(seed=0):
    rng = np.random.default_rng(seed)
    out = []
    x = rng.normal(size=(2, 4, 16, 16)).astype(np.float64)
    sb = haar_dwt(x)
    energy = sum(float(np.sum(b**2)) for b in sb.as_tuple())
    rel = abs(energy - float(np.sum(x**2))) / float(np.sum(x**2))
    out.append(Check("haar energy conservation", rel <= 1e-5, f"rel err {rel:.1e}"))
    rec = float(np.abs(haar_idwt(sb) - x).max())
    out.append(Check("haar reconstruction", rec <= 1e-5, f"abs err {rec:.1e}"))

    xs = rng.normal(size=(8, 6, 10, 12)) * rng.uniform(0, 3, size=(8, 6, 1, 1))
    fd = freq_descriptors(subband_energies(haar_dwt(xs)))
    r_ok = bool(np.all((fd.r_hf >= 0) & (fd.r_hf <= 1 + 1e-6)))
    s_ok = bool(np.all((fd.s_orient >= 0.5 - 1e-6) & (fd.s_orient <= 1 + 1e-6)))
    out.append(Check("r_hf range", r_ok, "[0, 1+1e-6]"))
    out.append(Check("s range", s_ok, "[0.5-1e-6, 1+1e-6]"))

    const = np.full((1, 1, 8, 8), 0.7)
    checker = np.where((np.indices((8, 8)).sum(axis=0) % 2) == 0, 1.0, -1.0)[None, None]
    r_const = float(freq_descriptors(subband_energies(haar_dwt(const))).r_hf.item())
    r_check = float(freq_descriptors(subband_energies(haar_dwt(checker))).r_hf.item())
    out.append(Check("r_hf(constant) = 0", abs(r_const) <= 1e-6, f"{r_const:.2e}"))
    out.append(Check("r_hf(checkerboard) = 1", abs(r_check - 1) <= 1e-6, f"{r_check:.8f}"))

    head = GateHead(rng.normal(size=5), float(rng.normal()))
    beta = predict_gate(xs, head)
    out.append(Check("gate in (0, 1)", bool(np.all((beta > 0) & (beta < 1))), "open interval"))
    perm = rng.permutation(xs.shape[1])
    eq = np.array_equal(predict_gate(xs[:, perm], head), beta[:, perm])
    out.append(Check("gate channel permutation equivariance", bool(eq), "exact"))
    return out


def check_sgra(seed=0):
    rng = np.random.default_rng(seed)
    out = []
    ok_perm = ok_inv = 0
    cases = [(c, g) for c in (1, 2, 6, 12, 16, 24, 32, 48, 64) for g in range(1, c + 1) if c % g == 0]
    for c, g in cases:
        perm = interleave_perm(c, g)
        ok_perm += bool(np.array_equal(np.sort(perm), np.arange(c)))
        u = rng.normal(size=(2, c, 3, 3))
        ok_inv += bool(np.array_equal(interleave(interleave(u, g), c // g), u))
    out.append(Check("interleave bijection", ok_perm == len(cases), f"{ok_perm}/{len(cases)}"))
    out.append(Check("interleave inverse pair", ok_inv == len(cases), f"{ok_inv}/{len(cases)}"))

    ok = 0
    combos = [(64, 32), (32, 64), (48, 36), (16, 16), (24, 40), (12, 18)]
    for c_in, c_out in combos:
        p = init_sgra(c_in, c_out, random_state=int(rng.integers(1 << 30)), dtype=np.float64)
        x = rng.normal(size=(2, c_in, 5, 4))
        dense = np.zeros((c_out, c_in))
        ci, co = c_in // p.g, c_out // p.g
        for k in range(p.g):
            dense[k * co : (k + 1) * co, k * ci : (k + 1) * ci] = p.weights[k]
        ref = np.einsum("oc,bchw->bohw", dense, x)
        got = partition_project(x, p)
        ok += bool(np.allclose(got, ref, rtol=0, atol=1e-12))
    out.append(Check("partition_project == block-diagonal", ok == len(combos), f"{ok}/{len(combos)}"))

    law = mono = 0
    combos = [(64, 32, 8), (32, 64, 8), (64, 64, 8), (128, 64, 8), (48, 96, 8),
              (16, 32, 4), (32, 16, 4), (24, 48, 8), (96, 64, 8), (64, 128, 8),
              (256, 128, 8), (40, 80, 8), (80, 40, 8), (16, 16, 8), (72, 48, 8),
              (128, 128, 8), (56, 112, 8), (112, 56, 8), (32, 32, 8), (192, 64, 8)]
    for c_in, c_out, dmax in combos:
        counts = []
        d = 1
        while d <= dmax:
            g = choose_groups(c_in, c_out, d)
            p = init_sgra(c_in, c_out, divisor=d, random_state=0)
            law += p.weights.size == weight_count(c_in, c_out, g) == c_in * c_out // g
            counts.append(p.weights.size)
            d *= 2
        mono += all(a < b for a, b in zip(counts, counts[1:]))
    n_law = sum(int(math.log2(d)) + 1 for _, _, d in combos)
    out.append(Check("sgra weight count C_in*C_out/g", law == n_law, f"{law}/{n_law}"))
    out.append(Check("params increase as g shrinks", mono == len(combos), f"{mono}/{len(combos)} combos"))
    return out


def tiny_network(seed=0):
    """A <=500-parameter network with every layer type, in float64."""
    cfg = NetworkConfig(scales=2, base_channels=2, blocks_per_scale=1,
                        in_channels=1, out_channels=1)
    net = build_network(cfg, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    for name, v in net.params.items():
        if name.endswith(".weight") and not name.startswith(("head", "tail")):
            # latent weights away from 0 and from the clip points at ±1
            net.params[name] = rng.choice([-1, 1], size=v.shape) * rng.uniform(0.1, 0.9, size=v.shape)
        elif name.endswith(".act_slope"):
            net.params[name] = rng.uniform(0.5, 2.0, size=v.shape)
        elif name.endswith(".slope"):
            net.params[name] = rng.uniform(0.1, 0.5, size=v.shape)
        else:
            net.params[name] = v + rng.normal(0, 0.3, size=v.shape)
    return net


def gradient_check(seed=0, h=1e-6):
    """Analytic gradients vs central differences of the surrogate network.

    Returns:
        dict mapping parameter role to its worst relative error.
    """
    net = tiny_network(seed)
    rng = np.random.default_rng(seed + 2)
    x = rng.uniform(0, 1, size=(2, 1, 8, 8))
    y = rng.uniform(0, 1, size=(2, 1, 8, 8))

    def loss():
        out, _ = network_forward(net, x, mode="surrogate", keep=False)
        return 0.5 * float(np.sum((out - y) ** 2))

    out, caches = network_forward(net, x, mode="surrogate")
    grads, _ = network_backward(net, out - y, caches)
    worst: dict = {}
    for name, v in net.params.items():
        role = name.rsplit(".", 1)[1]
        if name.startswith(("head", "tail")):
            role = "fp_weight"
        for idx in np.ndindex(v.shape):
            old = v[idx]
            v[idx] = old + h
            lp = loss()
            v[idx] = old - h
            lm = loss()
            v[idx] = old
            fd = (lp - lm) / (2 * h)
            an = float(grads[name][idx])
            err = abs(fd - an) / max(abs(fd), abs(an), 1e-6)
            worst[role] = max(worst.get(role, 0.0), err)
    return worst, net.n_params()


def check_grad(seed=0):
    worst, n = gradient_check(seed)
    return [Check(f"grad {role}", err < 1e-4, f"max rel err {err:.1e} ({n} params)")
            for role, err in sorted(worst.items())]


def run_suite(suite: str):
    runners = {"kernels": check_kernels, "mabg": check_mabg, "sgra": check_sgra, "grad": check_grad}
    if suite == "all":
        return [c for s in SUITES for c in runners[s]()]
    if suite not in runners:
        raise ValueError(f"unknown suite {suite!r}")
    return runners[suite]()
