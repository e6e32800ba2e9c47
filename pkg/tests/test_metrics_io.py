import json
import math
import struct

import numpy as np
import pytest

from binmoire.metrics_io import (
    MAGIC,
    ChecksumError,
    CorruptCheckpointError,
    ImageBuffer,
    ImageFormatError,
    VersionError,
    checkpoint_bytes,
    decode_ppm,
    encode_ppm,
    load_checkpoint,
    psnr,
    read_image,
    save_checkpoint,
    ssim,
    write_image,
)
from binmoire.netblocks import NetworkConfig, build_network
from oracles import loop_psnr, loop_ssim

SMALL = NetworkConfig(scales=2, base_channels=4, blocks_per_scale=1)


def test_psnr_examples(rng):
    a = rng.uniform(size=(3, 8, 8))
    assert psnr(a, a) == math.inf
    assert psnr(np.zeros(10), np.full(10, 0.5)) == pytest.approx(6.0206, abs=1e-4)
    b = rng.uniform(size=(3, 8, 8))
    assert abs(psnr(a, b) - loop_psnr(a, b)) < 1e-9
    assert psnr(a, b) == psnr(b, a)


def test_psnr_decreases_with_noise(rng):
    a = rng.uniform(size=(3, 16, 16))
    noise = rng.uniform(-1, 1, size=a.shape)
    vals = [psnr(a, a + s * noise) for s in (0.01, 0.02, 0.05, 0.1, 0.2)]
    assert all(x > y for x, y in zip(vals, vals[1:]))


def test_ssim_examples(rng):
    a = rng.uniform(size=(3, 16, 24))
    assert ssim(a, a) == 1.0
    assert ssim(a, 1 - a) < 1
    b = np.clip(a + rng.normal(scale=0.1, size=a.shape), 0, 1)
    assert abs(ssim(a, b) - loop_ssim(a, b)) < 1e-9
    assert ssim(a, b) == ssim(b, a)


def test_ssim_too_small():
    with pytest.raises(ValueError):
        ssim(np.zeros((4, 4)), np.zeros((4, 4)))


def test_white_pixel(tmp_path):
    f = tmp_path / "w.ppm"
    f.write_bytes(b"P6\n1 1\n255\n\xff\xff\xff")
    np.testing.assert_array_equal(read_image(f).data.ravel(), [1, 1, 1])


def test_rewrite_is_byte_identical(tmp_path, rng):
    raw = b"P6 # odd header\n4 3\n255\n" + rng.integers(0, 256, size=36, dtype=np.uint8).tobytes()
    src, dst = tmp_path / "a.ppm", tmp_path / "b.ppm"
    src.write_bytes(raw)
    write_image(dst, read_image(src))
    assert dst.read_bytes() == raw


def test_half_quantizes_to_128():
    raw = encode_ppm(ImageBuffer(np.full((3, 1, 1), 0.5, np.float32)))
    assert raw.endswith(bytes([128, 128, 128]))


@pytest.mark.parametrize("raw", [
    b"P5\n1 1\n255\n\x00",
    b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00",
    b"P6\n2 2\n255\n\x00\x00\x00",
    b"P6\n1 1\n255\n\x00\x00\x00\x00",
])
def test_bad_ppm(raw):
    with pytest.raises(ImageFormatError):
        decode_ppm(raw)


def test_checkpoint_round_trip(tmp_path):
    net = build_network(SMALL, seed=9)
    p = tmp_path / "n.ckpt"
    save_checkpoint(net, p)
    back = load_checkpoint(p)
    assert back.checksum() == net.checksum()
    assert back.config == net.config
    assert p.read_bytes()[:8] == MAGIC


def test_flipped_byte_is_checksum_error(tmp_path):
    raw = bytearray(checkpoint_bytes(build_network(SMALL)))
    raw[len(raw) // 2] ^= 0x01
    p = tmp_path / "n.ckpt"
    p.write_bytes(bytes(raw))
    with pytest.raises(ChecksumError):
        load_checkpoint(p)


def _reseal(body):
    import hashlib

    return body + hashlib.sha256(body).digest()


def _split(raw):
    body = raw[:-32]
    _, mlen = struct.unpack("<II", body[8:16])
    manifest = json.loads(body[16 : 16 + mlen])
    return manifest, body[16 + mlen :]


def test_version_mismatch(tmp_path):
    raw = checkpoint_bytes(build_network(SMALL))
    body = raw[:8] + struct.pack("<I", 2) + raw[12:-32]
    p = tmp_path / "n.ckpt"
    p.write_bytes(_reseal(body))
    with pytest.raises(VersionError):
        load_checkpoint(p)


def test_bad_magic(tmp_path):
    p = tmp_path / "n.ckpt"
    p.write_bytes(b"NOTACKPT" + bytes(64))
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(p)


def test_permuted_manifest_loads_by_name(tmp_path, rng):
    net = build_network(SMALL, seed=4)
    manifest, payload = _split(checkpoint_bytes(net))
    chunks, off = [], 0
    for ent in manifest["tensors"]:
        n = 4 * int(np.prod(ent["shape"]))
        chunks.append(payload[off : off + n])
        off += n
    order = rng.permutation(len(chunks))
    manifest["tensors"] = [manifest["tensors"][i] for i in order]
    mbytes = json.dumps(manifest).encode()
    body = MAGIC + struct.pack("<II", 1, len(mbytes)) + mbytes + b"".join(chunks[i] for i in order)
    p = tmp_path / "perm.ckpt"
    p.write_bytes(_reseal(body))
    assert load_checkpoint(p).checksum() == net.checksum()


def test_missing_tensor_is_corrupt(tmp_path):
    manifest, payload = _split(checkpoint_bytes(build_network(SMALL)))
    last = manifest["tensors"].pop()
    payload = payload[: len(payload) - 4 * int(np.prod(last["shape"]))]
    mbytes = json.dumps(manifest).encode()
    p = tmp_path / "m.ckpt"
    p.write_bytes(_reseal(MAGIC + struct.pack("<II", 1, len(mbytes)) + mbytes + payload))
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(p)
