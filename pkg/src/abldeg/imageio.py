"""Grayscale image I/O, aligned patch extraction and the bicubic baseline."""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image


class ImageFormatError(Exception):
    """Unsupported or malformed image file."""


@dataclass(frozen=True)
class GrayImage:
    data: np.ndarray  # (height, width) float64 in [0, 1]

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"GrayImage needs a 2-D array, got shape {arr.shape}")
        if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
            raise ValueError("GrayImage intensities must lie in [0, 1]")
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @classmethod
    def clipped(cls, arr) -> "GrayImage":
        return cls(np.clip(arr, 0.0, 1.0))


@dataclass(frozen=True)
class PatchSpec:
    hr_size: int
    scale: int
    flips: tuple[bool, bool] = (False, False)  # (horizontal, vertical), applied to every patch

    def __post_init__(self):
        if self.scale < 2:
            raise ValueError("scale must be >= 2")
        if self.hr_size % self.scale:
            raise ValueError(f"hr_size {self.hr_size} not divisible by scale {self.scale}")


@dataclass(frozen=True)
class ImagePair:
    hr: GrayImage
    lr: GrayImage
    scale: int

    def __post_init__(self):
        if (self.hr.height != self.lr.height * self.scale
                or self.hr.width != self.lr.width * self.scale):
            raise ValueError(
                f"HR {self.hr.data.shape} and LR {self.lr.data.shape} do not match scale {self.scale}")


# --- PGM / PNG ---------------------------------------------------------------

_PNG_GRAY_MODES = {"L": 255, "I;16": 65535, "I;16B": 65535, "I": 65535}
_PGM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")


def _read_pgm(buf: bytes, path) -> GrayImage:
    pos, fields = 0, []
    for _ in range(4):
        m = _PGM_TOKEN.match(buf, pos)
        if not m:
            raise ImageFormatError(f"{path}: truncated PGM header")
        fields.append(m.group(1))
        pos = m.end()
    magic, w, h, maxval = fields
    if magic != b"P5":
        raise ImageFormatError(f"{path}: only binary PGM (P5) is supported, got {magic!r}")
    w, h, maxval = int(w), int(h), int(maxval)
    if not 0 < maxval < 65536:
        raise ImageFormatError(f"{path}: bad maxval {maxval}")
    pos += 1  # single whitespace after maxval
    dtype = ">u2" if maxval > 255 else "u1"
    n = w * h * np.dtype(dtype).itemsize
    if len(buf) - pos < n:
        raise ImageFormatError(f"{path}: truncated PGM data")
    raw = np.frombuffer(buf, dtype=dtype, count=w * h, offset=pos).reshape(h, w)
    if raw.max(initial=0) > maxval:
        raise ImageFormatError(f"{path}: sample exceeds maxval")
    return GrayImage(raw.astype(np.float64) / maxval)


def _read_png(path) -> GrayImage:
    with Image.open(path) as im:
        if im.mode not in _PNG_GRAY_MODES:
            raise ImageFormatError(f"{path}: PNG mode {im.mode} is not grayscale")
        arr = np.asarray(im)
    return GrayImage(arr.astype(np.float64) / _PNG_GRAY_MODES[im.mode])


def load_luma(path) -> GrayImage:
    """Like :func:`load_image` but converts 8-bit RGB(A) PNGs with BT.601 luma."""
    path = Path(path)
    if path.read_bytes()[:2] == b"P5":
        return load_image(path)
    with Image.open(path) as im:
        if im.mode in _PNG_GRAY_MODES:
            return load_image(path)
        if im.mode not in ("RGB", "RGBA"):
            raise ImageFormatError(f"{path}: unsupported PNG mode {im.mode}")
        rgb = np.asarray(im.convert("RGB")).astype(np.float64) / 255.0
    return GrayImage.clipped(rgb @ np.array([0.299, 0.587, 0.114]))


def load_image(path) -> GrayImage:
    """Read a P5 PGM (8 or 16 bit) or grayscale PNG into [0, 1]."""
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as e:
        raise OSError(f"cannot read {path}: {e}") from e
    if buf[:2] == b"P5":
        return _read_pgm(buf, path)
    if buf[:8] == b"\x89PNG\r\n\x1a\n":
        return _read_png(path)
    raise ImageFormatError(f"{path}: unsupported image format")


def save_image(img: GrayImage, path, maxval: int = 255):
    """Write a binary PGM. Values round to the nearest level of ``maxval``."""
    if not 0 < maxval < 65536:
        raise ValueError(f"bad maxval {maxval}")
    q = np.rint(np.clip(img.data, 0.0, 1.0) * maxval)
    raw = q.astype(">u2" if maxval > 255 else "u1").tobytes()
    header = f"P5\n{img.width} {img.height}\n{maxval}\n".encode("ascii")
    Path(path).write_bytes(header + raw)


def load_pair_dir(directory, scale: int | None = None) -> list[tuple[str, ImagePair]]:
    """Collect ``<name>_HR.pgm`` / ``<name>_LR.pgm`` pairs, sorted by name."""
    directory = Path(directory)
    pairs = []
    for hr_path in sorted(directory.glob("*_HR.pgm")):
        name = hr_path.name[:-len("_HR.pgm")]
        lr_path = directory / f"{name}_LR.pgm"
        if not lr_path.exists():
            continue
        hr, lr = load_image(hr_path), load_image(lr_path)
        s = scale if scale is not None else hr.height // max(lr.height, 1)
        pairs.append((name, ImagePair(hr, lr, s)))
    return pairs


def save_pair(pair: ImagePair, directory, name: str, maxval: int = 65535):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_image(pair.hr, directory / f"{name}_HR.pgm", maxval)
    save_image(pair.lr, directory / f"{name}_LR.pgm", maxval)


# --- patches -------------------------------------------------------------------

def flip_pair(pair: ImagePair, horizontal: bool, vertical: bool) -> ImagePair:
    hr, lr = pair.hr.data, pair.lr.data
    if horizontal:
        hr, lr = hr[:, ::-1], lr[:, ::-1]
    if vertical:
        hr, lr = hr[::-1], lr[::-1]
    return ImagePair(GrayImage(hr.copy()), GrayImage(lr.copy()), pair.scale)


def extract_pairs(hr: GrayImage, lr: GrayImage, spec: PatchSpec, count: int,
                  rng_seed: int) -> list[ImagePair]:
    """Random aligned patches; HR offsets are multiples of ``spec.scale``."""
    s = spec.scale
    ImagePair(hr, lr, s)  # validates alignment
    if hr.height < spec.hr_size or hr.width < spec.hr_size:
        raise ValueError(f"image {hr.data.shape} smaller than patch size {spec.hr_size}")
    rng = np.random.default_rng(rng_seed)
    lp = spec.hr_size // s
    out = []
    for _ in range(count):
        li = int(rng.integers(0, lr.height - lp + 1))
        lj = int(rng.integers(0, lr.width - lp + 1))
        pair = ImagePair(
            GrayImage(hr.data[li * s:li * s + spec.hr_size, lj * s:lj * s + spec.hr_size]),
            GrayImage(lr.data[li:li + lp, lj:lj + lp]), s)
        out.append(flip_pair(pair, *spec.flips))
    return out


# --- bicubic -------------------------------------------------------------------

def cubic_kernel(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    x = np.abs(x)
    x2, x3 = x * x, x * x * x
    return np.where(x <= 1, (a + 2) * x3 - (a + 3) * x2 + 1,
                    np.where(x < 2, a * x3 - 5 * a * x2 + 8 * a * x - 4 * a, 0.0))


def _reflect_index(idx: np.ndarray, n: int) -> np.ndarray:
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - idx, idx)


def bicubic_weights(n_in: int, scale: int, a: float = -0.5) -> np.ndarray:
    """Resampling matrix (n_in // scale, n_in) with antialiased cubic taps."""
    n_out = n_in // scale
    support = 2.0 * scale
    mat = np.zeros((n_out, n_in))
    for i in range(n_out):
        center = (i + 0.5) * scale - 0.5
        lo = math.floor(center - support) + 1
        taps = np.arange(lo, math.ceil(center + support))
        w = cubic_kernel((taps - center) / scale, a)
        w /= w.sum()
        np.add.at(mat[i], _reflect_index(taps, n_in), w)
    return mat


def bicubic_downsample(img: GrayImage, scale: int) -> GrayImage:
    """Antialiased cubic-convolution downsampling (a = -0.5), reflect borders."""
    if img.height % scale or img.width % scale:
        raise ValueError(f"image {img.data.shape} not divisible by scale {scale}")
    out = bicubic_weights(img.height, scale) @ img.data @ bicubic_weights(img.width, scale).T
    return GrayImage.clipped(out)
