"""Corpus files, synthetic image generators, checkpoints, and metrics streams.

Byte layouts are documented in FORMATS.md. Everything is little-endian.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from collections import OrderedDict
from pathlib import Path
from typing import IO

import numpy as np

CORPUS_MAGIC = b"HVC1"
CORPUS_VERSION = 1
CKPT_MAGIC = b"HVCK"
CKPT_VERSION = 1

_CORPUS_FIXED = struct.Struct("<4sHHIHHHH")  # magic, version, flags, count, H, W, C, reserved
_CKPT_PREFIX = struct.Struct("<4sIQI")  # magic, version, total length, crc32 of the body

METRIC_KEYS = ("step", "epoch", "split", "loss", "lr", "throughput_img_s", "wall_ms")


class FormatError(ValueError):
    pass


class IntegrityError(FormatError):
    pass


# -- synthetic images -------------------------------------------------------
# ordered so that any leading subset stays easy to tell apart at 32 px
SHAPES = ("square", "cross", "ring", "bar", "circle", "triangle")


def _blobs(rng, size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    img = np.ones((size, size, 3)) * rng.uniform(0.1, 0.9, 3)
    for _ in range(rng.integers(3, 7)):
        cy, cx = rng.uniform(0, 1, 2)
        sig = rng.uniform(0.06, 0.25)
        amp = rng.uniform(-0.6, 0.6, 3)
        g = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sig * sig))
        img += g[..., None] * amp
    return img


def _textures(rng, size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.ones((size, size, 3)) * rng.uniform(0.3, 0.7, 3)
    for _ in range(rng.integers(2, 4)):
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(0.05, 0.35)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
        img += wave[..., None] * rng.uniform(-0.25, 0.25, 3)
    return img


def _shape(rng, size, cls):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    # one dark and one bright colour, either way round
    bg, fg = rng.uniform(0.0, 0.35, 3), rng.uniform(0.65, 1.0, 3)
    if rng.random() < 0.5:
        bg, fg = fg, bg
    r = rng.uniform(0.28, 0.4) * size
    cy, cx = rng.uniform(r + 1, size - r - 1, 2)
    dy, dx = yy - cy, xx - cx
    name = SHAPES[cls]
    if name == "circle":
        m = dy ** 2 + dx ** 2 <= r * r
    elif name == "square":
        m = (np.abs(dy) <= 0.8 * r) & (np.abs(dx) <= 0.8 * r)
    elif name == "triangle":
        m = (dy <= 0.8 * r) & (dy >= -r + 2 * np.abs(dx))
    elif name == "cross":
        m = ((np.abs(dy) <= 0.25 * r) & (np.abs(dx) <= r)) | ((np.abs(dx) <= 0.25 * r) & (np.abs(dy) <= r))
    elif name == "ring":
        d2 = dy ** 2 + dx ** 2
        m = (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    else:
        m = (np.abs(dy) <= 0.25 * r) & (np.abs(dx) <= r)
    return np.where(m[..., None], fg, bg)


def synth_images(n: int, size: int, kind: str, seed: int, num_classes: int = 4):
    """Deterministic uint8 images ``[n, size, size, 3]`` and labels (or None)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if kind not in ("gaussian-blobs", "textures", "labeled-shapes"):
        raise ValueError(f"unknown synthetic kind {kind!r}")
    if kind == "labeled-shapes" and not 1 <= num_classes <= len(SHAPES):
        raise ValueError(f"labeled-shapes supports 1..{len(SHAPES)} classes")
    rng = np.random.default_rng(seed)
    imgs = np.empty((n, size, size, 3), np.uint8)
    labels = np.empty(n, np.uint16) if kind == "labeled-shapes" else None
    for i in range(n):
        if kind == "gaussian-blobs":
            img = _blobs(rng, size)
        elif kind == "textures":
            img = _textures(rng, size)
        else:
            labels[i] = rng.integers(num_classes)
            img = _shape(rng, size, int(labels[i]))
        # mild pixel noise keeps every unit's variance away from zero
        img = img + rng.normal(0.0, 0.02, img.shape)
        imgs[i] = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    return imgs, labels


# -- corpus -----------------------------------------------------------------
def write_corpus(path, images: np.ndarray, labels: np.ndarray | None = None) -> None:
    images = np.ascontiguousarray(images, dtype=np.uint8)
    n, H, W, C = images.shape
    x = images.reshape(-1, C).astype(np.float64) / 255.0
    mean, std = x.mean(axis=0), x.std(axis=0) + 1e-8
    head = _CORPUS_FIXED.pack(CORPUS_MAGIC, CORPUS_VERSION, int(labels is not None), n, H, W, C, 0)
    head += np.asarray(mean, "<f4").tobytes() + np.asarray(std, "<f4").tobytes()
    rec = np.dtype([("pix", "u1", (H * W * C,))] + ([("label", "<u2")] if labels is not None else []))
    body = np.empty(n, rec)
    body["pix"] = images.reshape(n, -1)
    if labels is not None:
        body["label"] = labels
    _atomic_write(path, head + body.tobytes())


class Corpus:
    """Memory-mapped reader; batches are materialised on demand."""

    def __init__(self, path):
        self.path = Path(path)
        size = self.path.stat().st_size
        with open(self.path, "rb") as f:
            fixed = f.read(_CORPUS_FIXED.size)
            if len(fixed) < _CORPUS_FIXED.size:
                raise IntegrityError(f"{path}: truncated corpus header")
            magic, ver, flags, n, H, W, C, _ = _CORPUS_FIXED.unpack(fixed)
            if magic != CORPUS_MAGIC:
                raise FormatError(f"{path}: bad magic {magic!r}, expected {CORPUS_MAGIC!r}")
            if ver != CORPUS_VERSION:
                raise FormatError(f"{path}: corpus version {ver}, reader supports {CORPUS_VERSION}")
            consts = np.frombuffer(f.read(8 * C), "<f4")
        self.count, self.height, self.width, self.channels = n, H, W, C
        self.has_labels = bool(flags & 1)
        self.mean, self.std = consts[:C].astype(np.float32), consts[C:].astype(np.float32)
        self.header_size = _CORPUS_FIXED.size + 8 * C
        expect = self.header_size + n * (H * W * C + 2 * self.has_labels)
        if size != expect:
            raise IntegrityError(f"{path}: length {size} bytes, header implies {expect}")
        rec = [("pix", "u1", (H * W * C,))] + ([("label", "<u2")] if self.has_labels else [])
        self._rec = np.memmap(self.path, np.dtype(rec), "r", offset=self.header_size, shape=(n,))

    def __len__(self) -> int:
        return self.count

    def raw(self, idx) -> np.ndarray:
        return np.asarray(self._rec["pix"][np.asarray(idx)]).reshape(-1, self.height, self.width, self.channels)

    def labels(self, idx=None) -> np.ndarray | None:
        if not self.has_labels:
            return None
        sel = slice(None) if idx is None else np.asarray(idx)
        return np.asarray(self._rec["label"][sel]).astype(np.int64)

    def batch(self, idx, dtype=np.float32):
        """Normalised ``[n, C, H, W]`` images and labels (None when unlabeled)."""
        x = self.raw(idx).astype(np.float32) / 255.0
        x = (x - self.mean) / self.std
        return np.ascontiguousarray(x.transpose(0, 3, 1, 2), dtype=dtype), self.labels(idx)


def synth_corpus(path, n: int, size: int, kind: str, seed: int, num_classes: int = 4) -> Corpus:
    imgs, labels = synth_images(n, size, kind, seed, num_classes)
    write_corpus(path, imgs, labels)
    return Corpus(path)


# -- checkpoints ------------------------------------------------------------
def _atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
            f.flush()
            os.fsync(f.fileno())
        # mkstemp creates 0600; give the final file ordinary umask permissions
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(tmp, 0o666 & ~umask)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_checkpoint(meta: dict, arrays: "OrderedDict[str, np.ndarray]") -> bytes:
    parts = []
    hdr = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    parts.append(struct.pack("<I", len(hdr)) + hdr)
    parts.append(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        dt = le.dtype.str.encode()
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", len(dt)) + dt
                     + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
                     + struct.pack("<Q", le.nbytes) + np.ascontiguousarray(le).tobytes())
    body = b"".join(parts)
    return _CKPT_PREFIX.pack(CKPT_MAGIC, CKPT_VERSION, _CKPT_PREFIX.size + len(body), zlib.crc32(body)) + body


def decode_checkpoint(buf: bytes, source: str = "<bytes>"):
    if len(buf) < _CKPT_PREFIX.size:
        raise IntegrityError(f"{source}: {len(buf)} bytes is shorter than the checkpoint prefix")
    magic, ver, total, crc = _CKPT_PREFIX.unpack_from(buf)
    if magic != CKPT_MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}, expected {CKPT_MAGIC!r}")
    if ver != CKPT_VERSION:
        raise FormatError(f"{source}: checkpoint version {ver}, reader supports {CKPT_VERSION}")
    if total != len(buf):
        raise IntegrityError(f"{source}: length {len(buf)} bytes, header says {total} (truncated?)")
    body = memoryview(buf)[_CKPT_PREFIX.size:]
    if zlib.crc32(body) != crc:
        raise IntegrityError(f"{source}: checksum mismatch")
    off = 0

    def take(n):
        nonlocal off
        out = body[off:off + n]
        off += n
        return out

    (hlen,) = struct.unpack("<I", take(4))
    meta = json.loads(bytes(take(hlen)))
    (count,) = struct.unpack("<I", take(4))
    arrays = OrderedDict()
    for _ in range(count):
        (nl,) = struct.unpack("<H", take(2))
        name = bytes(take(nl)).decode()
        (dl,) = struct.unpack("<B", take(1))
        dt = np.dtype(bytes(take(dl)).decode())
        (nd,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{nd}Q", take(8 * nd))
        (nbytes,) = struct.unpack("<Q", take(8))
        arr = np.frombuffer(bytes(take(nbytes)), dtype=dt).reshape(shape)
        arrays[name] = arr.astype(dt.newbyteorder("="))
    return meta, arrays


def save_checkpoint(path, meta: dict, arrays) -> None:
    _atomic_write(path, encode_checkpoint(meta, OrderedDict(arrays)))


def load_checkpoint(path):
    """Return ``(meta, arrays)`` after length and checksum checks."""
    buf = Path(path).read_bytes()
    return decode_checkpoint(buf, str(path))


# -- metrics ----------------------------------------------------------------
def metrics_append(stream: IO[str], row: dict) -> None:
    """Write one JSON line with the standard keys (missing ones as null) and flush."""
    full = {k: row.get(k) for k in METRIC_KEYS}
    full.update({k: v for k, v in row.items() if k not in full})
    stream.write(json.dumps(full) + "\n")
    stream.flush()


def read_metrics(path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]
