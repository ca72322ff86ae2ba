"""Datasets and corruption processes.

Images are float64 arrays of shape (N, H, W) with values in [0, 1].
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

IDX_UBYTE = 0x08
IDX_FLOAT64 = 0x0E
_IDX_DTYPES = {IDX_UBYTE: np.dtype(">u1"), IDX_FLOAT64: np.dtype(">f8")}
# (type code, ndim) pairs accepted by read_idx
_IDX_SUPPORTED = {(IDX_UBYTE, 3), (IDX_UBYTE, 1), (IDX_FLOAT64, 3), (IDX_FLOAT64, 2), (IDX_FLOAT64, 1)}


class IdxError(ValueError):
    def __init__(self, msg, offset):
        super().__init__(f"{msg} (at byte offset {offset})")
        self.offset = offset


@dataclass
class ImageSet:
    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3 or self.pixels.shape[0] < 1:
            raise ValueError(f"ImageSet needs shape (N>=1, H, W), got {self.pixels.shape}")

    @property
    def count(self):
        return self.pixels.shape[0]

    @property
    def height(self):
        return self.pixels.shape[1]

    @property
    def width(self):
        return self.pixels.shape[2]

    def flat(self):
        return self.pixels.reshape(self.count, -1)


def read_idx(data: bytes):
    """Parse an IDX container.

    Unsigned-byte payloads (magic 0x00000803 images, 0x00000801 labels) are
    returned as an ``ImageSet`` scaled by 1/255 and an int64 label vector.
    Float64 payloads (type code 0x0E) are returned unscaled as an ndarray.
    """
    data = bytes(data)
    if len(data) < 4:
        raise IdxError("truncated header", len(data))
    zero, dtype_code, ndim = struct.unpack(">HBB", data[:4])
    if zero != 0 or (dtype_code, ndim) not in _IDX_SUPPORTED:
        raise IdxError(f"unsupported magic 0x{int.from_bytes(data[:4], 'big'):08x}", 0)
    hdr_end = 4 + 4 * ndim
    if len(data) < hdr_end:
        raise IdxError("truncated dimension header", len(data))
    dims = struct.unpack(f">{ndim}I", data[4:hdr_end])
    count = 1
    for d in dims:
        count *= d
        if count > 2**40:
            raise IdxError("dimension overflow", 4)
    dt = _IDX_DTYPES[dtype_code]
    need = hdr_end + count * dt.itemsize
    if len(data) < need:
        raise IdxError(f"truncated payload: need {need} bytes, have {len(data)}", len(data))
    if len(data) > need:
        raise IdxError("trailing bytes after payload", need)
    arr = np.frombuffer(data, dtype=dt, count=count, offset=hdr_end).reshape(dims)
    if dtype_code == IDX_FLOAT64:
        return arr.astype(np.float64)
    if ndim == 1:
        return arr.astype(np.int64)
    return ImageSet(arr.astype(np.float64) / 255.0)


def write_idx(arr, *, ubyte: bool = False) -> bytes:
    """Serialize an array as IDX; ``ubyte`` quantizes values in [0, 1] to bytes."""
    arr = np.asarray(arr)
    if ubyte:
        if arr.ndim == 1:
            payload = arr.astype(">u1")
        else:
            payload = np.clip(np.rint(np.asarray(arr, float) * 255.0), 0, 255).astype(">u1")
        code = IDX_UBYTE
    else:
        payload = np.asarray(arr, dtype=">f8")
        code = IDX_FLOAT64
    head = struct.pack(">HBB", 0, code, arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    return head + payload.tobytes()


def load_idx(path):
    with open(path, "rb") as fh:
        return read_idx(fh.read())


def save_idx(path, arr, *, ubyte=False):
    with open(path, "wb") as fh:
        fh.write(write_idx(arr, ubyte=ubyte))


def gen_shapes(rng: np.random.Generator, n: int, h: int, w: int) -> ImageSet:
    """Random rectangles, ellipses and strokes on a black background."""
    if min(n, h, w) < 1:
        raise ValueError("n, h, w must be >= 1")
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yy = (yy + 0.5) / h
    xx = (xx + 0.5) / w
    out = np.zeros((n, h, w))
    for i in range(n):
        img = out[i]
        for _ in range(rng.integers(1, 4)):
            kind = rng.integers(0, 3)
            val = rng.uniform(0.5, 1.0)
            cy, cx = rng.uniform(0.2, 0.8, size=2)
            if kind == 0:
                hy, hx = rng.uniform(0.08, 0.25, size=2)
                m = (np.abs(yy - cy) <= hy) & (np.abs(xx - cx) <= hx)
            elif kind == 1:
                ry, rx = rng.uniform(0.1, 0.3, size=2)
                m = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
            else:
                ang = rng.uniform(0, np.pi)
                half = rng.uniform(0.2, 0.4)
                thick = rng.uniform(0.04, 0.08)
                dy, dx = np.sin(ang), np.cos(ang)
                along = (yy - cy) * dy + (xx - cx) * dx
                across = -(yy - cy) * dx + (xx - cx) * dy
                m = (np.abs(along) <= half) & (np.abs(across) <= thick)
            img[m] = np.maximum(img[m], val)
    return ImageSet(out)


def corrupt_pixels(img: ImageSet, p: float, rng: np.random.Generator, return_mask: bool = False):
    """Zero each pixel independently with probability ``p``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must lie in [0, 1], got {p}")
    keep = rng.random(img.pixels.shape) >= p
    out = ImageSet(np.where(keep, img.pixels, 0.0))
    return (out, keep.astype(np.float64)) if return_mask else out


def corrupt_blocks(img: ImageSet, count: int, size: int, rng: np.random.Generator, return_mask: bool = False):
    """Zero ``count`` random size x size blocks per image; blocks may overlap."""
    if count < 0:
        raise ValueError("count must be >= 0")
    if size < 1 or size > min(img.height, img.width):
        raise ValueError(f"block size {size} does not fit a {img.height}x{img.width} image")
    keep = np.ones(img.pixels.shape)
    for i in range(img.count):
        tops = rng.integers(0, img.height - size + 1, size=count)
        lefts = rng.integers(0, img.width - size + 1, size=count)
        for t, l in zip(tops, lefts):
            keep[i, t : t + size, l : l + size] = 0.0
    out = ImageSet(img.pixels * keep)
    return (out, keep) if return_mask else out


def add_noise_snr(signal, target_db: float, rng: np.random.Generator):
    """Add Gaussian noise rescaled so the realized SNR equals ``target_db``."""
    signal = np.asarray(signal, dtype=np.float64)
    power = float(np.sum(signal**2))
    if power == 0.0:
        raise ValueError("signal has zero norm; SNR is undefined")
    eta = rng.standard_normal(signal.shape)
    eta *= np.sqrt(power / (10.0 ** (target_db / 10.0)) / np.sum(eta**2))
    return signal + eta


def add_noise_snr_rows(signals, target_db: float, rng: np.random.Generator):
    """Per-row ``add_noise_snr`` for a batch of flattened signals."""
    signals = np.asarray(signals, dtype=np.float64)
    return np.stack([add_noise_snr(s, target_db, rng) for s in signals]) if len(signals) else signals.copy()


def snr_db(signal, noisy) -> float:
    signal = np.asarray(signal, dtype=np.float64)
    noise = np.asarray(noisy, dtype=np.float64) - signal
    return 10.0 * np.log10(np.sum(signal**2) / np.sum(noise**2))


@dataclass(frozen=True)
class CorruptionSpec:
    variant: str  # "pixel-bernoulli" | "blocks" | "gaussian-snr"
    p: float = 0.5
    count: int = 5
    size: int = 8
    target_db: float = 30.0
    seed: int = 0

    def __post_init__(self):
        if self.variant not in ("pixel-bernoulli", "blocks", "gaussian-snr"):
            raise ValueError(f"unknown corruption variant {self.variant!r}")
        if not 0.0 <= self.p <= 1.0 or self.count < 0 or self.size < 1:
            raise ValueError("invalid corruption parameters")

    def apply(self, img: ImageSet, rng: np.random.Generator):
        """Return (corrupted images, observation mask); the mask is all ones for noise."""
        if self.variant == "pixel-bernoulli":
            return corrupt_pixels(img, self.p, rng, return_mask=True)
        if self.variant == "blocks":
            return corrupt_blocks(img, self.count, self.size, rng, return_mask=True)
        flat = add_noise_snr_rows(img.flat(), self.target_db, rng)
        return ImageSet(flat.reshape(img.pixels.shape)), np.ones(img.pixels.shape)
