"""Command line entry point: verify, bench, train, eval, count, demo.

Exit codes: 0 success, 1 verification or equality failure, 2 usage or input
error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .binconv import ConvSpec, naive_pm1_conv2d, xnor_conv2d
from .metrics_io import (
    ChecksumError,
    CorruptCheckpointError,
    ImageBuffer,
    ImageFormatError,
    VersionError,
    load_checkpoint,
    psnr,
    read_image,
    save_checkpoint,
    ssim,
    write_image,
)
from .netblocks import ConfigError, NetworkConfig, build_network, count_params_ops, load_config, restore
from .tensor_core import pack
from .train import TrainConfig, synth_moire, train_loop

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _positive(v):
    n = int(v)
    if n < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {v}")
    return n


def _configs(path):
    if path is None:
        return NetworkConfig(), {}
    if not Path(path).is_file():
        raise FileNotFoundError(path)
    return load_config(path)


def cmd_verify(args) -> int:
    from .verify import run_suite

    checks = run_suite(args.suite)
    for c in checks:
        print(c.line())
    failed = sum(not c.passed for c in checks)
    print(f"{len(checks) - failed}/{len(checks)} checks passed")
    return EXIT_FAIL if failed else EXIT_OK


def bench(cin, cout, k, hw, iters, seed=0):
    """Time the packed XNOR path against the unpacked float path.

    Returns:
        dict with per-path seconds, ns per MAC, GOP/s and the speed ratio, or
        None when the two paths disagree.
    """
    rng = np.random.default_rng(seed)
    x = rng.choice(np.array([-1.0, 1.0], np.float32), size=(1, cin, hw, hw))
    w = rng.choice(np.array([-1.0, 1.0], np.float32), size=(cout, cin, k, k))
    spec = ConvSpec(cin, cout, k, 1, k // 2)
    xb, wb = pack(x), pack(w, inner_dims=3)
    if not np.array_equal(xnor_conv2d(xb, wb, spec), naive_pm1_conv2d(x, w, spec)):
        return None
    oh, ow = spec.out_hw(hw, hw)
    macs = cout * cin * k * k * oh * ow

    def timed(fn):
        best = float("inf")
        for _ in range(iters):
            t0 = time.perf_counter()
            fn()
            best = min(best, time.perf_counter() - t0)
        return best

    t_packed = timed(lambda: xnor_conv2d(xb, wb, spec))
    t_naive = timed(lambda: naive_pm1_conv2d(x, w, spec))
    return {
        "macs": macs,
        "packed_s": t_packed, "naive_s": t_naive,
        "packed_ns_per_op": 1e9 * t_packed / macs, "naive_ns_per_op": 1e9 * t_naive / macs,
        "packed_gops": macs / t_packed / 1e9, "naive_gops": macs / t_naive / 1e9,
        "speedup": t_naive / t_packed,
    }


def cmd_bench(args) -> int:
    r = bench(args.cin, args.cout, args.k, args.hw, args.iters)
    if r is None:
        print("FAIL  packed and naive paths disagree; not timing")
        return EXIT_FAIL
    print(f"conv {args.cin}->{args.cout} k={args.k} hw={args.hw}: {r['macs']} MACs, paths equal")
    print(f"packed xnor : {r['packed_s'] * 1e3:9.3f} ms  {r['packed_ns_per_op']:.4f} ns/op  "
          f"{r['packed_gops']:.2f} GOP/s")
    print(f"naive float : {r['naive_s'] * 1e3:9.3f} ms  {r['naive_ns_per_op']:.4f} ns/op  "
          f"{r['naive_gops']:.2f} GOP/s")
    print(f"speedup     : {r['speedup']:.2f}x")
    return EXIT_OK


def cmd_train(args) -> int:
    net_cfg, train_doc = _configs(args.config)
    tcfg = TrainConfig.from_dict(train_doc)
    if args.steps is not None:
        tcfg.steps = args.steps
    if args.seed is not None:
        tcfg.seed = args.seed
    TrainConfig.from_dict(tcfg.__dict__)  # re-validate overrides
    out = Path(args.out)
    log_path = out.with_name(out.name + ".metrics.jsonl")
    net, records = train_loop(net_cfg, tcfg, log_path=log_path)
    save_checkpoint(net, out)
    last = records[-1]["loss"] if records else float("nan")
    print(f"trained {tcfg.steps} steps, final loss {last:.5f}")
    print(f"checkpoint: {out}\nmetrics:    {log_path}")
    return EXIT_OK


def _reference_for(path: Path):
    name = path.name
    if "_degraded" in name:
        cand = path.with_name(name.replace("_degraded", "_clean"))
        if cand.is_file():
            return cand
    return None


def cmd_eval(args) -> int:
    net = load_checkpoint(args.ckpt)
    src = Path(args.inp)
    img = read_image(src)
    restored = np.clip(restore(net, img.data[None])[0], 0, 1)
    write_image(args.out, ImageBuffer(restored))
    ref_path = Path(args.ref) if args.ref else _reference_for(src)
    record = {"input": str(src), "output": str(args.out), "reference": None,
              "psnr_in": None, "psnr_out": None, "ssim_in": None, "ssim_out": None}
    if ref_path is not None:
        ref = read_image(ref_path)
        if ref.data.shape != img.data.shape:
            raise UsageError(f"reference {ref_path} has a different size than {src}")
        # compare what is on disk: the restored image after 8-bit quantization
        out_q = read_image(args.out).data
        record.update(reference=str(ref_path),
                      psnr_in=psnr(img.data, ref.data), psnr_out=psnr(out_q, ref.data),
                      ssim_in=ssim(img.data, ref.data), ssim_out=ssim(out_q, ref.data))
    if args.report:
        with open(args.report, "a") as fh:
            fh.write(json.dumps(record) + "\n")
    for key in ("psnr_in", "psnr_out", "ssim_in", "ssim_out"):
        v = record[key]
        print(f"{key:9s} {'n/a' if v is None else f'{v:.4f}'}")
    return EXIT_OK


def cmd_count(args) -> int:
    net_cfg, _ = _configs(args.config)
    report = count_params_ops(build_network(net_cfg, seed=0), args.hw)
    print(report.table())
    return EXIT_OK


def demo_pairs(seed: int, out_dir, count: int = 4, hw: int = 128):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    paths = []
    for i in range(count):
        s = synth_moire(int(rng.integers(2**31)), hw)
        clean, degraded = out / f"pair{i:03d}_clean.ppm", out / f"pair{i:03d}_degraded.ppm"
        write_image(clean, ImageBuffer(s.clean))
        write_image(degraded, ImageBuffer(s.degraded))
        paths.append((clean, degraded))
    return paths


def cmd_demo(args) -> int:
    for clean, degraded in demo_pairs(args.seed, args.out, args.count, args.hw):
        print(f"{clean}  {degraded}")
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="binmoire", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    v = sub.add_parser("verify", help="run oracle-equivalence and invariant suites")
    v.add_argument("--suite", default="all", choices=["all", "kernels", "mabg", "sgra", "grad"])
    v.set_defaults(func=cmd_verify)

    b = sub.add_parser("bench", help="packed XNOR vs naive float convolution")
    b.add_argument("--cin", type=_positive, default=64)
    b.add_argument("--cout", type=_positive, default=64)
    b.add_argument("--k", type=_positive, default=3)
    b.add_argument("--hw", type=_positive, default=128)
    b.add_argument("--iters", type=_positive, default=10)
    b.set_defaults(func=cmd_bench)

    t = sub.add_parser("train", help="train on synthetic moire crops")
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="restore one PPM image")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--in", dest="inp", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--report")
    e.add_argument("--ref", help="clean reference (default: *_clean.ppm sibling)")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("count", help="print the Params/OPs table")
    c.add_argument("--config")
    c.add_argument("--hw", type=_positive, default=64)
    c.set_defaults(func=cmd_count)

    d = sub.add_parser("demo", help="write synthetic (clean, degraded) PPM pairs")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", required=True)
    d.add_argument("--count", type=_positive, default=4)
    d.add_argument("--hw", type=int, default=128)
    d.set_defaults(func=cmd_demo)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        msg = f"file not found: {exc.filename or exc}"
    except ConfigError as exc:
        msg = f"malformed config: {exc}"
    except ChecksumError as exc:
        msg = f"checkpoint checksum failure: {exc}"
    except VersionError as exc:
        msg = f"checkpoint version mismatch: {exc}"
    except CorruptCheckpointError as exc:
        msg = f"corrupt checkpoint: {exc}"
    except ImageFormatError as exc:
        msg = f"bad image file: {exc}"
    except (UsageError, ValueError) as exc:
        msg = str(exc)
    print(f"binmoire: error: {msg}", file=sys.stderr)
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
