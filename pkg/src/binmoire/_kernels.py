"""Numba kernels for the XNOR-popcount convolution."""
import os

import numba
import numpy as np
from llvmlite import ir
from numba import njit, prange, types
from numba.extending import intrinsic

# Probe OpenMP before TBB; an outdated TBB otherwise warns on first launch.
if "NUMBA_THREADING_LAYER_PRIORITY" not in os.environ:
    numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]


def configure_threads():
    """Cap kernel parallelism with ``BINMOIRE_THREADS`` (default: all cores)."""
    limit = numba.config.NUMBA_NUM_THREADS
    raw = os.environ.get("BINMOIRE_THREADS")
    if raw:
        try:
            limit = max(1, min(limit, int(raw)))
        except ValueError:
            pass
    numba.set_num_threads(limit)
    return limit


@intrinsic
def _popcount64(typingctx, v):
    sig = types.uint64(types.uint64)

    def codegen(context, builder, signature, args):
        fn = builder.module.declare_intrinsic("llvm.ctpop", [ir.IntType(64)])
        return builder.call(fn, args)

    return sig, codegen


@njit(parallel=True, cache=True)
def xnor_popcount_conv(xw, ww, mask, stride, out_h, out_w):
    """Binary window sums ``2 * matches - live_bits``.

    Args:
        xw: Channel-packed activations (B, Hp, Wp, n_words), already padded.
        ww: Channel-packed weights (O, K, K, n_words).
        mask: Live-bit mask per channel word (n_words,).

    Returns:
        float32 array (B, O, out_h, out_w) of exact integer sums.
    """
    B = xw.shape[0]
    O, K, _, nw = ww.shape
    L = K * K * nw
    wflat = ww.reshape(O, L)
    lmask = np.empty(L, np.uint64)
    for tap in range(K * K):
        lmask[tap * nw : (tap + 1) * nw] = mask
    live = 0
    for q in range(nw):
        live += _popcount64(mask[q])
    live *= K * K
    out = np.empty((B, O, out_h, out_w), dtype=np.float32)
    for row in prange(B * out_h):
        b = row // out_h
        i = row % out_h
        # gather each window of this output row into one contiguous word run
        patch = np.empty((out_w, L), np.uint64)
        for j in range(out_w):
            for u in range(K):
                for v in range(K):
                    for q in range(nw):
                        patch[j, (u * K + v) * nw + q] = xw[b, i * stride + u, j * stride + v, q]
        for o in range(O):
            for j in range(out_w):
                acc = np.uint64(0)
                for q in range(L):
                    acc += _popcount64(~(patch[j, q] ^ wflat[o, q]) & lmask[q])
                out[b, o, i, j] = np.float32(2 * np.int64(acc) - np.int64(live))
    return out
