"""Image batches: IDX / CIFAR binary loaders, a synthetic generator and
the brightness statistic the server uses to place binning cutoffs."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import BadMagic, DimensionMismatch, TruncatedFile

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True, eq=False)
class ImageBatch:
    """``images`` is B x C x H x W in [0, 1]; ``labels`` has B integers."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.images, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 4:
            raise ValueError(f"images must be B x C x H x W, got shape {x.shape}")
        if x.shape[0] < 1:
            raise ValueError("batch must hold at least one image")
        if x.shape[1] not in (1, 3):
            raise ValueError(f"channel count must be 1 or 3, got {x.shape[1]}")
        if x.size and (x.min() < 0.0 or x.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        if y.shape != (x.shape[0],):
            raise DimensionMismatch(f"{y.size} labels for {x.shape[0]} images")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "images", x)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return self.images.shape[0]

    @property
    def image_shape(self):
        return self.images.shape[1:]

    @property
    def dim(self) -> int:
        c, h, w = self.image_shape
        return c * h * w

    def flat(self) -> np.ndarray:
        return self.images.reshape(len(self), -1)

    def __getitem__(self, idx):
        idx = np.atleast_1d(np.arange(len(self))[idx])
        return ImageBatch(self.images[idx], self.labels[idx])

    @staticmethod
    def concat(batches):
        return ImageBatch(np.concatenate([b.images for b in batches]),
                          np.concatenate([b.labels for b in batches]))


@dataclass(frozen=True, eq=False)
class CalibrationSample:
    brightness_values: np.ndarray

    def __post_init__(self):
        v = np.sort(np.asarray(self.brightness_values, dtype=np.float64).ravel())
        if v.size < 2:
            raise ValueError("calibration needs at least two values")
        v.setflags(write=False)
        object.__setattr__(self, "brightness_values", v)

    def __len__(self):
        return self.brightness_values.size


def brightness(x) -> float | np.ndarray:
    """Mean pixel value of one image (C x H x W) or of each image in a stack."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 4:
        return x.reshape(x.shape[0], -1).mean(axis=1)
    return float(x.mean())


def calibrate(images) -> CalibrationSample:
    if isinstance(images, ImageBatch):
        images = images.images
    return CalibrationSample(brightness(np.asarray(images)))


# ---------------------------------------------------------------- loaders

def _read(path) -> bytes:
    return Path(path).read_bytes()


def _idx_header(buf: bytes, magic: int, ndim: int, path):
    if len(buf) < 4:
        raise TruncatedFile(f"{path}: missing IDX magic")
    (got,) = struct.unpack(">I", buf[:4])
    if got != magic:
        raise BadMagic(f"{path}: magic {got:#010x}, expected {magic:#010x}")
    hdr = 4 + 4 * ndim
    if len(buf) < hdr:
        raise TruncatedFile(f"{path}: header needs {hdr} bytes, file has {len(buf)}")
    dims = struct.unpack(">" + "I" * ndim, buf[4:hdr])
    need = hdr + int(np.prod(dims, dtype=np.int64))
    if len(buf) < need:
        raise TruncatedFile(f"{path}: expected {need} bytes, file has {len(buf)}")
    return dims, hdr


def load_idx(images_path, labels_path=None) -> ImageBatch:
    """Load an MNIST-style IDX image file (and optional label file).

    Without a label file all labels are zero.
    """
    buf = _read(images_path)
    (n, h, w), off = _idx_header(buf, IDX_IMAGES_MAGIC, 3, images_path)
    pix = np.frombuffer(buf, dtype=np.uint8, count=n * h * w, offset=off)
    images = pix.reshape(n, 1, h, w).astype(np.float64) / 255.0
    if labels_path is None:
        labels = np.zeros(n, dtype=np.int64)
    else:
        lbuf = _read(labels_path)
        (m,), loff = _idx_header(lbuf, IDX_LABELS_MAGIC, 1, labels_path)
        if m != n:
            raise DimensionMismatch(f"{n} images but {m} labels")
        labels = np.frombuffer(lbuf, dtype=np.uint8, count=m, offset=loff).astype(np.int64)
    if n == 0:
        raise TruncatedFile(f"{images_path}: no images")
    return ImageBatch(images, labels)


def write_idx(images_path, images, labels_path=None, labels=None):
    """Write uint8 IDX files; ``images`` is N x H x W uint8 (or [0,1] floats)."""
    a = np.asarray(images)
    if a.dtype != np.uint8:
        a = np.rint(np.clip(a, 0, 1) * 255).astype(np.uint8)
    if a.ndim == 4:
        a = a[:, 0]
    n, h, w = a.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w) + a.tobytes())
    if labels_path is not None:
        lab = np.asarray(labels, dtype=np.uint8)
        Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, lab.size) + lab.tobytes())


def load_cifar_binary(path, channels: int = 3, label_bytes: int = 1,
                      height: int = 32, width: int = 32) -> ImageBatch:
    """CIFAR binary records: label byte(s) then channel-planar pixels.

    With ``label_bytes=2`` (CIFAR-100: coarse, fine) the fine label is kept.
    """
    if label_bytes not in (1, 2):
        raise ValueError("label_bytes must be 1 or 2")
    buf = _read(path)
    npix = channels * height * width
    rec = label_bytes + npix
    if len(buf) == 0 or len(buf) % rec:
        raise TruncatedFile(f"{path}: {len(buf)} bytes is not a whole number of {rec}-byte records")
    raw = np.frombuffer(buf, dtype=np.uint8).reshape(-1, rec)
    labels = raw[:, label_bytes - 1].astype(np.int64)
    images = raw[:, label_bytes:].reshape(-1, channels, height, width).astype(np.float64) / 255.0
    return ImageBatch(images, labels)


def write_cifar_binary(path, images, labels, label_bytes: int = 1):
    a = np.asarray(images)
    if a.dtype != np.uint8:
        a = np.rint(np.clip(a, 0, 1) * 255).astype(np.uint8)
    lab = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    if label_bytes == 2:
        lab = np.concatenate([np.zeros_like(lab), lab], axis=1)
    Path(path).write_bytes(np.concatenate([lab, a.reshape(a.shape[0], -1)], axis=1).tobytes())


# -------------------------------------------------------------- synthetic

def _smooth_field(rng, c, h, w, smoothness):
    field = rng.standard_normal((c, h, w))
    field = ndimage.gaussian_filter(field, sigma=(0, smoothness, smoothness), mode="wrap")
    field -= field.mean(axis=(1, 2), keepdims=True)
    peak = np.abs(field).max()
    return field / peak if peak > 0 else field


def synth_batch(seed, B, C=3, H=32, W=32, brightness_spread=0.4, *, contrast=0.9,
                smoothness=2.5, num_classes=10, force_max_pixel=False) -> ImageBatch:
    """Deterministic smooth random images.

    Per-image mean brightness is uniform on ``0.5 +/- brightness_spread``; the
    low-frequency field around it has amplitude ``contrast * min(mu, 1 - mu)``
    so no clipping is needed.  With ``force_max_pixel`` the brightest pixel of
    each image is set to exactly 1.0.
    """
    if brightness_spread <= 0 or brightness_spread > 0.5:
        raise ValueError("brightness_spread must be in (0, 0.5]")
    rng = np.random.default_rng(seed)
    mus = rng.uniform(0.5 - brightness_spread, 0.5 + brightness_spread, size=B)
    images = np.empty((B, C, H, W))
    for b, mu in enumerate(mus):
        amp = contrast * min(mu, 1.0 - mu)
        images[b] = np.clip(mu + amp * _smooth_field(rng, C, H, W, smoothness), 0.0, 1.0)
        if force_max_pixel:
            flat = images[b].reshape(-1)
            flat[np.argmax(flat)] = 1.0
    labels = rng.integers(0, num_classes, size=B)
    return ImageBatch(images, labels)
