"""IDX digit files, geometric warps and the Rotated / RTS distortion sets.

IDX is the big-endian container used by MNIST: a 4-byte magic
(``0x00000803`` images, ``0x00000801`` labels), one 4-byte extent per
dimension, then raw unsigned bytes. Gzipped files are read transparently.
"""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
IMAGE_SIZE = 32
TRANSFORM_ORDER = "scale,rotate,translate"


class IdxError(ValueError):
    pass


class BadMagicError(IdxError):
    pass


class TruncatedFileError(IdxError):
    pass


class CountMismatchError(IdxError):
    pass


@dataclass
class LabeledDataset:
    images: np.ndarray  # (N, 1, 32, 32) float64 in [0, 1]
    labels: np.ndarray  # (N,) int64
    provenance: str = "origin"
    seed: Optional[int] = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.labels)

    def subset(self, n: int) -> "LabeledDataset":
        return replace(self, images=self.images[:n], labels=self.labels[:n])


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse(raw: bytes, magic: int, ndim: int, path) -> np.ndarray:
    if len(raw) < 4 + 4 * ndim:
        raise TruncatedFileError(f"{path}: truncated header")
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise BadMagicError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    n = int(np.prod(dims))
    body = raw[4 + 4 * ndim:]
    if len(body) < n:
        raise TruncatedFileError(f"{path}: expected {n} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8, count=n).reshape(dims)


def read_idx_images(path) -> np.ndarray:
    return _parse(_read_bytes(path), IMAGE_MAGIC, 3, path)


def read_idx_labels(path) -> np.ndarray:
    return _parse(_read_bytes(path), LABEL_MAGIC, 1, path)


def _write(path, magic: int, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype=np.uint8)
    payload = struct.pack(f">I{arr.ndim}I", magic, *arr.shape) + arr.tobytes()
    path = Path(path)
    if path.suffix == ".gz":
        payload = gzip.compress(payload, mtime=0)
    path.write_bytes(payload)


def save_idx_images(path, pixels: np.ndarray) -> None:
    _write(path, IMAGE_MAGIC, pixels)


def save_idx_labels(path, labels: np.ndarray) -> None:
    _write(path, LABEL_MAGIC, labels)


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centred bilinear resize with edge clamping."""
    h, w = img.shape[-2:]

    def axis(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = axis(h, out_h)
    x0, x1, fx = axis(w, out_w)
    img = np.asarray(img, dtype=np.float64)
    top = img[..., y0, :][..., x0] * (1 - fx) + img[..., y0, :][..., x1] * fx
    bot = img[..., y1, :][..., x0] * (1 - fx) + img[..., y1, :][..., x1] * fx
    return top * (1 - fy)[:, None] + bot * fy[:, None]


def load_idx(images_path, labels_path, limit: Optional[int] = None) -> LabeledDataset:
    """Read an IDX pair, scale to [0, 1] and bring images to 32x32."""
    pixels = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(pixels) != len(labels):
        raise CountMismatchError(f"{len(pixels)} images but {len(labels)} labels")
    if limit is not None:
        pixels, labels = pixels[:limit], labels[:limit]
    images = pixels.astype(np.float64) / 255.0
    if images.shape[1:] != (IMAGE_SIZE, IMAGE_SIZE):
        images = resize_bilinear(images, IMAGE_SIZE, IMAGE_SIZE)
    return LabeledDataset(images[:, None], labels.astype(np.int64), "origin")


def quantize(images: np.ndarray) -> np.ndarray:
    """[0, 1] floats to bytes, rounding half up."""
    return np.clip(np.floor(np.asarray(images) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def save_idx(ds: LabeledDataset, images_path, labels_path) -> None:
    save_idx_images(images_path, quantize(ds.images[:, 0]))
    save_idx_labels(labels_path, ds.labels.astype(np.uint8))


# warps ------------------------------------------------------------------------

def bilinear_zero(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample ``img`` at real coordinates, reading zero outside the frame."""
    h, w = img.shape
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    fy, fx = ys - y0, xs - x0

    def px(y, x):
        ok = (y >= 0) & (y < h) & (x >= 0) & (x < w)
        return np.where(ok, img[np.clip(y, 0, h - 1), np.clip(x, 0, w - 1)], 0.0)

    top = (1 - fx) * px(y0, x0) + fx * px(y0, x0 + 1)
    bot = (1 - fx) * px(y0 + 1, x0) + fx * px(y0 + 1, x0 + 1)
    return (1 - fy) * top + fy * bot


def warp(img: np.ndarray, angle_deg: float = 0.0, scale: float = 1.0,
         tx: float = 0.0, ty: float = 0.0) -> np.ndarray:
    """Scale, rotate, then translate ``img`` about its centre.

    Positive angles turn the picture counter-clockwise as displayed (rows
    grow downward); ``tx`` moves content right, ``ty`` down. Each output pixel
    is pulled back through the inverse transform and read bilinearly; content
    mapped outside the frame is cropped and uncovered pixels are zero. Input
    values are expected in [0, 1] and the output is clipped to that range.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    cy, cx = (h - 1) / 2, (w - 1) / 2
    th = np.deg2rad(angle_deg)
    cos, sin = np.cos(th), np.sin(th)
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                         indexing="ij")
    u = xx - cx - tx
    v = yy - cy - ty
    xs = (cos * u - sin * v) / scale + cx
    ys = (sin * u + cos * v) / scale + cy
    return np.clip(bilinear_zero(img, ys, xs), 0.0, 1.0)


@dataclass(frozen=True)
class DistortionSpec:
    mode: str = "origin"
    rotation: Tuple[float, float] = (0.0, 0.0)
    scale: Tuple[float, float] = (1.0, 1.0)
    translation: Tuple[float, float] = (0.0, 0.0)
    seed: int = 0

    @classmethod
    def identity(cls, seed: int = 0) -> "DistortionSpec":
        return cls("origin", seed=seed)

    @classmethod
    def rotated(cls, seed: int = 0) -> "DistortionSpec":
        return cls("rotated", rotation=(-90.0, 90.0), seed=seed)

    @classmethod
    def rts(cls, seed: int = 0) -> "DistortionSpec":
        return cls("rts", rotation=(-45.0, 45.0), scale=(0.7, 1.0), translation=(-5.0, 5.0),
                   seed=seed)

    @classmethod
    def for_mode(cls, mode: str, seed: int = 0) -> "DistortionSpec":
        try:
            return {"origin": cls.identity, "rotated": cls.rotated, "rts": cls.rts}[mode](seed)
        except KeyError:
            raise ValueError(f"unknown distortion mode {mode!r}") from None


def image_rng(seed: int, index: int) -> np.random.Generator:
    """Counter-based stream for one image: Philox keyed by (seed, index)."""
    return np.random.Generator(np.random.Philox(key=(int(seed) << 64) | int(index)))


def sample_params(spec: DistortionSpec, index: int) -> Tuple[float, float, float, float]:
    """``(angle, scale, tx, ty)`` for image ``index``, each uniform on ``[lo, hi)``."""
    u = image_rng(spec.seed, index).random(4)

    def pick(rng_range, x):
        lo, hi = rng_range
        return lo + (hi - lo) * x

    return (pick(spec.rotation, u[0]), pick(spec.scale, u[1]),
            pick(spec.translation, u[2]), pick(spec.translation, u[3]))


def distort_dataset(ds: LabeledDataset, spec: DistortionSpec) -> LabeledDataset:
    out = np.empty_like(ds.images)
    for n in range(len(ds)):
        angle, s, tx, ty = sample_params(spec, n)
        out[n, 0] = warp(ds.images[n, 0], angle, s, tx, ty)
    meta = dict(ds.meta, transform_order=TRANSFORM_ORDER, distortion=spec.mode)
    return LabeledDataset(out, ds.labels.copy(), spec.mode, spec.seed, meta)


def random_crop(images: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Zero-pad by ``pad`` and cut a random window of the original size per image."""
    n, c, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy = rng.integers(0, 2 * pad + 1, n)
    dx = rng.integers(0, 2 * pad + 1, n)
    out = np.empty_like(images)
    for i in range(n):
        out[i] = padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
    return out
