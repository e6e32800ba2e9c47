"""Image metrics, PPM image files and the binary checkpoint format."""
from __future__ import annotations

import hashlib
import json
import math
import re
import struct
from dataclasses import dataclass

import numpy as np

from .tensor_core import DimensionError

# --- metrics ---------------------------------------------------------------


def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``math.inf`` for identical inputs."""
    a = np.asarray(getattr(a, "data", a), dtype=np.float64)
    b = np.asarray(getattr(b, "data", b), dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"psnr shape mismatch {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return math.inf
    return float(10.0 * np.log10(peak * peak / mse))


def _as_planes(x):
    x = np.asarray(getattr(x, "data", x), dtype=np.float64)
    if x.ndim == 2:
        return x[None]
    return x.reshape(-1, x.shape[-2], x.shape[-1])


def ssim(a, b, window: int = 8, data_range: float = 1.0) -> float:
    """Mean SSIM over non-overlapping ``window x window`` uniform windows.

    Leading axes are treated as separate planes; incomplete border windows
    are dropped.
    """
    pa, pb = _as_planes(a), _as_planes(b)
    if pa.shape != pb.shape:
        raise DimensionError(f"ssim shape mismatch {pa.shape} vs {pb.shape}")
    n, H, W = pa.shape
    if H < window or W < window:
        raise DimensionError(f"image {H}x{W} smaller than window {window}")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    hh, ww = H // window, W // window

    def blocks(p):
        p = p[:, : hh * window, : ww * window]
        return p.reshape(n, hh, window, ww, window).transpose(0, 1, 3, 2, 4).reshape(n, hh, ww, -1)

    xa, xb = blocks(pa), blocks(pb)
    mu_a, mu_b = xa.mean(-1), xb.mean(-1)
    da, db = xa - mu_a[..., None], xb - mu_b[..., None]
    var_a, var_b = (da * da).mean(-1), (db * db).mean(-1)
    cov = (da * db).mean(-1)
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


# --- PPM images -------------------------------------------------------------


class ImageFormatError(ValueError):
    """Malformed or truncated binary PPM file."""


@dataclass
class ImageBuffer:
    """RGB image, ``data`` of shape (3, height, width) with values in [0, 1]."""

    data: np.ndarray
    header: bytes | None = None

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


_HEADER = re.compile(rb"P6(?:\s|#[^\n]*\n)+(\d+)(?:\s|#[^\n]*\n)+(\d+)(?:\s|#[^\n]*\n)+(\d+)\s")


def to_bytes(data) -> np.ndarray:
    """Quantize [0, 1] floats to 8-bit with round-half-up."""
    return np.floor(np.clip(np.asarray(data, np.float64), 0, 1) * 255 + 0.5).astype(np.uint8)


def decode_ppm(raw: bytes) -> ImageBuffer:
    m = _HEADER.match(raw)
    if not m:
        raise ImageFormatError("not a binary PPM (P6) header")
    width, height, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ImageFormatError(f"maxval must be 255, got {maxval}")
    if width < 1 or height < 1:
        raise ImageFormatError("image dimensions must be positive")
    start = m.end()
    n = width * height * 3
    body = raw[start : start + n]
    if len(body) < n:
        raise ImageFormatError(f"truncated payload: {len(body)} of {n} bytes")
    if len(raw) > start + n:
        raise ImageFormatError("trailing bytes after pixel payload")
    pix = np.frombuffer(body, dtype=np.uint8).reshape(height, width, 3)
    data = (pix.transpose(2, 0, 1).astype(np.float32) / 255).astype(np.float32)
    return ImageBuffer(data, bytes(raw[:start]))


def encode_ppm(img) -> bytes:
    if not isinstance(img, ImageBuffer):
        img = ImageBuffer(np.asarray(img, np.float32))
    data = img.data
    if data.ndim != 3 or data.shape[0] != 3:
        raise DimensionError(f"expected (3, H, W) image, got {data.shape}")
    header = img.header
    if header is None or decode_header_dims(header) != (img.width, img.height):
        header = b"P6\n%d %d\n255\n" % (img.width, img.height)
    return header + to_bytes(data).transpose(1, 2, 0).tobytes()


def decode_header_dims(header: bytes):
    m = _HEADER.match(header)
    return (int(m.group(1)), int(m.group(2))) if m else None


def read_image(path) -> ImageBuffer:
    with open(path, "rb") as fh:
        return decode_ppm(fh.read())


def write_image(path, img) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_ppm(img))


# --- checkpoints ------------------------------------------------------------

MAGIC = b"BMOIRECK"
FORMAT_VERSION = 1
_DIGEST = 32


class CheckpointError(ValueError):
    """Base class for unreadable checkpoints."""


class CorruptCheckpointError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


def _tensor_role(name: str) -> str:
    return name.rsplit(".", 1)[1]


def checkpoint_bytes(net) -> bytes:
    """Serialize a network.

    Layout: magic, uint32 version, uint32 manifest length, UTF-8 JSON
    manifest, little-endian float32 payloads in manifest order, SHA-256 of
    everything before it.
    """
    from .mabg import DESCRIPTOR_ORDER

    entries, payload = [], []
    for lay in net.layers:
        for name in sorted(k for k in net.params if k.startswith(lay.name + ".")):
            arr = np.ascontiguousarray(net.params[name], dtype="<f4")
            entries.append({
                "name": name,
                "layer": lay.name,
                "role": _tensor_role(name),
                "shape": list(arr.shape),
                "binarized": lay.binarized and name.endswith(".weight"),
                "use_mabg": bool(getattr(lay, "use_mabg", False)),
            })
            payload.append(arr.tobytes())
    manifest = json.dumps({
        "config": net.config.to_dict(),
        "descriptor_order": list(DESCRIPTOR_ORDER),
        "tensors": entries,
    }, sort_keys=True).encode()
    body = MAGIC + struct.pack("<II", FORMAT_VERSION, len(manifest)) + manifest + b"".join(payload)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(net, path) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(net))


def parse_checkpoint(raw: bytes):
    """Validate a checkpoint and return ``(manifest, {name: array})``."""
    head = len(MAGIC) + 8
    if len(raw) < head + _DIGEST or raw[: len(MAGIC)] != MAGIC:
        raise CorruptCheckpointError("not a checkpoint file (bad magic or too short)")
    body, digest = raw[:-_DIGEST], raw[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError("checkpoint checksum mismatch")
    version, mlen = struct.unpack("<II", body[len(MAGIC) : head])
    if version != FORMAT_VERSION:
        raise VersionError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    try:
        manifest = json.loads(body[head : head + mlen].decode())
        tensors = {}
        offset = head + mlen
        for ent in manifest["tensors"]:
            count = int(np.prod(ent["shape"], dtype=np.int64))
            chunk = body[offset : offset + 4 * count]
            if len(chunk) != 4 * count:
                raise CorruptCheckpointError(f"payload for {ent['name']} is truncated")
            tensors[ent["name"]] = np.frombuffer(chunk, dtype="<f4").reshape(ent["shape"]).copy()
            offset += 4 * count
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CorruptCheckpointError(f"malformed manifest: {exc}") from exc
    if offset != len(body):
        raise CorruptCheckpointError("unexpected bytes after the last payload")
    return manifest, tensors


def load_checkpoint(path):
    """Rebuild a network from disk, assigning tensors by name."""
    from .netblocks import ConfigError, NetworkConfig, build_network

    with open(path, "rb") as fh:
        manifest, tensors = parse_checkpoint(fh.read())
    try:
        cfg = NetworkConfig.from_dict(manifest["config"])
    except (ConfigError, TypeError) as exc:
        raise CorruptCheckpointError(f"bad network config in checkpoint: {exc}") from exc
    net = build_network(cfg, seed=0)
    if set(tensors) != set(net.params):
        missing = sorted(set(net.params) - set(tensors))
        extra = sorted(set(tensors) - set(net.params))
        raise CorruptCheckpointError(f"tensor set mismatch: missing {missing}, extra {extra}")
    for name, arr in tensors.items():
        if arr.shape != net.params[name].shape:
            raise CorruptCheckpointError(f"{name}: shape {arr.shape} != {net.params[name].shape}")
        net.params[name] = arr.astype(np.float32)
    return net
