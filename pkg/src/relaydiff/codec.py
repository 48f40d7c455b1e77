"""Exactly invertible latent codec, bilinear resampling and file formats.

The codec folds each ``f x f`` pixel block into channels (space-to-depth) and
mixes them with an orthonormal DCT basis, so ``decode(encode(x)) == x`` up to
rounding and the Euclidean norm is preserved.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import DimensionError, ProtocolError


def _dct_matrix(n: int) -> np.ndarray:
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    m = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    m[0] /= np.sqrt(2.0)
    return m


class PatchCodec:
    """Space-to-depth codec with a fixed orthogonal channel mixing.

    A ``(C, H, W)`` image becomes a ``(C * f * f, H / f, W / f)`` latent.
    Batched ``(N, C, H, W)`` inputs are supported.
    """

    def __init__(self, factor: int = 2, channels: int = 1):
        if factor < 1:
            raise DimensionError("codec factor must be positive")
        self.factor = factor
        self.channels = channels
        d = _dct_matrix(factor)
        self.mix = np.kron(np.eye(channels), np.kron(d, d))

    @property
    def latent_channels(self) -> int:
        return self.channels * self.factor**2

    def latent_shape(self, image_shape):
        c, h, w = image_shape[-3:]
        return (c * self.factor**2, h // self.factor, w // self.factor)

    def encode(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        *lead, c, h, w = x.shape
        f = self.factor
        if c != self.channels:
            raise DimensionError(f"expected {self.channels} image channels, got {c}")
        if h % f or w % f:
            raise DimensionError(f"image dims {h}x{w} not divisible by factor {f}")
        blocks = x.reshape(*lead, c, h // f, f, w // f, f)
        n = len(lead)
        blocks = blocks.transpose(*range(n), n, n + 2, n + 4, n + 1, n + 3)  # (..., c, f, f, h/f, w/f)
        blocks = blocks.reshape(*lead, c * f * f, h // f, w // f)
        return np.einsum("ij,...jhw->...ihw", self.mix, blocks)

    def decode(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        *lead, cz, hz, wz = z.shape
        f = self.factor
        if cz != self.latent_channels:
            raise DimensionError(f"expected {self.latent_channels} latent channels, got {cz}")
        blocks = np.einsum("ji,...jhw->...ihw", self.mix, z)
        blocks = blocks.reshape(*lead, self.channels, f, f, hz, wz)
        n = len(lead)
        blocks = blocks.transpose(*range(n), n, n + 3, n + 1, n + 4, n + 2)  # (..., c, hz, f, wz, f)
        return blocks.reshape(*lead, self.channels, hz * f, wz * f)


def _linear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Half-pixel aligned linear interpolation with edge clamping."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), lo] += 1 - frac
    m[np.arange(n_out), hi] += frac
    return m


def _area_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Each output pixel averages the source interval it covers."""
    scale = n_in / n_out
    m = np.zeros((n_out, n_in))
    for j in range(n_out):
        a, b = j * scale, (j + 1) * scale
        for i in range(int(np.floor(a)), min(int(np.ceil(b)), n_in)):
            m[j, i] = min(b, i + 1) - max(a, i)
    return m / scale


def resize(x: np.ndarray, size, mode: str | None = None) -> np.ndarray:
    """Resample the last two axes of ``x`` to ``size = (height, width)``.

    ``bilinear_up`` interpolates at half-pixel-aligned positions;
    ``bilinear_down`` is the area-consistent variant (box average over each
    output footprint), which equals plain bilinear sampling for a factor of 2.
    ``mode=None`` picks by comparing sizes.
    """
    x = np.asarray(x, dtype=np.float64)
    h_out, w_out = int(size[0]), int(size[1])
    if h_out < 1 or w_out < 1:
        raise DimensionError(f"target size must be positive, got {size}")
    h_in, w_in = x.shape[-2:]
    if (h_in, w_in) == (h_out, w_out):
        return x.copy()
    if mode is None:
        mode = "bilinear_down" if h_out * w_out < h_in * w_in else "bilinear_up"
    if mode == "bilinear_up":
        mh, mw = _linear_matrix(h_in, h_out), _linear_matrix(w_in, w_out)
    elif mode == "bilinear_down":
        mh, mw = _area_matrix(h_in, h_out), _area_matrix(w_in, w_out)
    else:
        raise ValueError(f"unknown resize mode {mode!r}")
    return np.einsum("ah,...hw,bw->...ab", mh, x, mw)


def downsample(x: np.ndarray, factor: int = 2) -> np.ndarray:
    h, w = x.shape[-2:]
    return resize(x, (h // factor, w // factor), "bilinear_down")


def upsample(x: np.ndarray, factor: int = 2) -> np.ndarray:
    h, w = x.shape[-2:]
    return resize(x, (h * factor, w * factor), "bilinear_up")


def write_ppm(path, image: np.ndarray):
    """Write a ``(C, H, W)`` image in [0, 1] as binary PPM (P6).

    Single-channel images are replicated to RGB.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise DimensionError(f"expected (1|3, H, W) image, got {img.shape}")
    if img.shape[0] == 1:
        img = np.repeat(img, 3, axis=0)
    data = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    h, w = data.shape[1:]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(data.transpose(1, 2, 0)).tobytes())


def _ppm_tokens(buf: bytes, count: int):
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos])
    return tokens, pos + 1


def read_ppm(path, gray: bool = False) -> np.ndarray:
    buf = Path(path).read_bytes()
    (magic, w, h, maxval), offset = _ppm_tokens(buf, 4)
    if magic != b"P6":
        raise ProtocolError(f"not a binary PPM file: magic {magic!r}")
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise ProtocolError("only 8-bit PPM files are supported")
    data = np.frombuffer(buf, dtype=np.uint8, count=w * h * 3, offset=offset)
    img = data.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / 255.0
    return img.mean(axis=0, keepdims=True) if gray else img


LATENT_MAGIC = b"RDLATENT1\n"


def save_latent(path, z: np.ndarray, factor: int):
    """Raw little-endian float64 dump preceded by a one-line JSON header."""
    z = np.ascontiguousarray(z, dtype="<f8")
    header = json.dumps({"shape": list(z.shape), "factor": int(factor), "dtype": "<f8"})
    with open(path, "wb") as fh:
        fh.write(LATENT_MAGIC)
        fh.write(header.encode("ascii") + b"\n")
        fh.write(z.tobytes())


def load_latent(path):
    """Returns ``(z, factor)``."""
    buf = Path(path).read_bytes()
    if not buf.startswith(LATENT_MAGIC):
        raise ProtocolError("not a latent dump")
    end = buf.index(b"\n", len(LATENT_MAGIC))
    header = json.loads(buf[len(LATENT_MAGIC) : end])
    z = np.frombuffer(buf, dtype=header["dtype"], offset=end + 1)
    expected = int(np.prod(header["shape"]))
    if z.size != expected:
        raise ProtocolError(f"latent dump holds {z.size} values, header says {expected}")
    return z.reshape(header["shape"]).copy(), header["factor"]
