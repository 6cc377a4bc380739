"""Datasets and image file formats.

Images are stored as float64 arrays [N, C, H, W] with values in [-1, 1].
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fft as _fft

__all__ = [
    "Dataset",
    "gen_shapes",
    "read_idx",
    "write_idx",
    "pgm_write",
    "pgm_read",
    "tile_grid",
    "split_indices",
    "write_manifest",
]

IDX_UBYTE_3D = 0x00000803
IDX_UBYTE_1D = 0x00000801


@dataclass
class Dataset:
    images: np.ndarray
    train_idx: np.ndarray
    test_idx: np.ndarray
    provenance: str = ""
    labels: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be [N, C, H, W], got {self.images.shape}")
        if self.images.size and (self.images.min() < -1 or self.images.max() > 1):
            raise ValueError("image values must lie in [-1, 1]")
        tr, te = set(self.train_idx.tolist()), set(self.test_idx.tolist())
        if tr & te or len(tr) != len(self.train_idx) or len(te) != len(self.test_idx):
            raise ValueError("train and test indices must be disjoint and unique")
        if tr | te != set(range(len(self.images))):
            raise ValueError("split must cover every image")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def train(self) -> np.ndarray:
        return self.images[self.train_idx]

    @property
    def test(self) -> np.ndarray:
        return self.images[self.test_idx]

    @property
    def image_size(self) -> int:
        return self.images.shape[-1]


def split_indices(n: int, seed: int, train_fraction: float = 0.8) -> tuple:
    """Seeded permutation split; 80/20 by default."""
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(train_fraction * n))
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def _power_law_field(rng, H: int, W: int, alpha: float = 2.0) -> np.ndarray:
    u = np.fft.fftfreq(H) * H
    v = np.fft.fftfreq(W) * W
    r = np.sqrt(u[:, None] ** 2 + v[None, :] ** 2)
    r[0, 0] = 1.0
    amp = r ** (-alpha / 2)
    amp[0, 0] = 0.0
    noise = _fft.fft2(rng.standard_normal((H, W)))
    f = _fft.ifft2(noise * amp, strict=False)
    return f / (np.abs(f).max() + 1e-12)


def _log_uniform(rng, lo: float, hi: float) -> float:
    return float(np.exp(rng.uniform(np.log(lo), np.log(hi))))


def _shape_image(rng, H: int, W: int, texture: bool) -> np.ndarray:
    # Sizes are log-uniform (roughly scale invariant) and half the shapes are
    # 1-px lines, which keeps the mean spectrum close to 1 / w^2.
    yy, xx = np.mgrid[0:H, 0:W]
    angle = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(angle) * (xx / W - 0.5) + np.sin(angle) * (yy / H - 0.5))
    img = rng.uniform(-0.8, 0.0) + rng.uniform(0.0, 0.5) * ramp
    for _ in range(rng.integers(3, 9)):
        kind = rng.choice(3, p=(0.25, 0.25, 0.5))
        value = rng.uniform(-1, 1)
        if kind == 0:
            h = int(_log_uniform(rng, 2, H / 2 + 1))
            w = int(_log_uniform(rng, 2, W / 2 + 1))
            r0, c0 = rng.integers(0, H - h + 1), rng.integers(0, W - w + 1)
            img[r0:r0 + h, c0:c0 + w] = value
        elif kind == 1:
            cy, cx = rng.uniform(0, H), rng.uniform(0, W)
            rad = _log_uniform(rng, 1.5, H / 4)
            img[(yy - cy) ** 2 + (xx - cx) ** 2 <= rad * rad] = value
        else:
            if rng.random() < 0.5:
                r0 = rng.integers(H)
                c0, c1 = sorted(rng.integers(0, W, 2))
                img[r0, c0:c1 + 1] = value
            else:
                c0 = rng.integers(W)
                r0, r1 = sorted(rng.integers(0, H, 2))
                img[r0:r1 + 1, c0] = value
    if texture:
        img = img + 0.1 * _power_law_field(rng, H, W)
    return np.clip(img, -1.0, 1.0)


def gen_shapes(n: int, H: int = 32, W: int = 32, seed: int = 0, preset: str = "edges") -> Dataset:
    """Synthetic sharp-edged shapes (rectangles, discs, 1-px lines) on ramps.

    ``texture`` adds a low-amplitude ``1 / w^2`` noise field on top.
    """
    if preset not in ("edges", "texture"):
        raise ValueError(f"unknown preset {preset!r}")
    for d in (H, W):
        if d & (d - 1) or d < 1:
            raise ValueError(f"image dims must be powers of two, got {H}x{W}")
    rng = np.random.default_rng(seed)
    imgs = np.stack([_shape_image(rng, H, W, preset == "texture") for _ in range(n)])
    tr, te = split_indices(n, seed)
    return Dataset(imgs[:, None], tr, te, provenance=f"synthetic(seed={seed},preset={preset},n={n},H={H},W={W})")


# ---------------------------------------------------------------- IDX

def _read_idx_array(path: Path, expected_magic: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise ValueError(f"{path}: truncated header at offset 0")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise ValueError(f"{path}: bad magic 0x{magic:08x} at offset 0, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise ValueError(f"{path}: truncated dimension header at offset 4")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    need = int(np.prod(dims))
    if len(raw) - header < need:
        raise ValueError(f"{path}: truncated payload at offset {len(raw)}, need {header + need} bytes")
    return np.frombuffer(raw, dtype=np.uint8, count=need, offset=header).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as an IDX file (big-endian dims)."""
    a = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | a.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{a.ndim}I", *a.shape))
        fh.write(a.tobytes())


def read_idx(images_path, labels_path=None, size: int = 32, seed: int = 0) -> Dataset:
    """Read an IDX image file (e.g. MNIST), map to [-1, 1], pad or crop to ``size``."""
    raw = _read_idx_array(Path(images_path), IDX_UBYTE_3D)
    imgs = raw.astype(np.float64) / 127.5 - 1.0
    n, h, w = imgs.shape
    out = np.full((n, size, size), -1.0)
    # centered pad (or crop) along each axis
    sh, dh = max(0, (h - size) // 2), max(0, (size - h) // 2)
    sw, dw = max(0, (w - size) // 2), max(0, (size - w) // 2)
    ch, cw = min(h, size), min(w, size)
    out[:, dh:dh + ch, dw:dw + cw] = imgs[:, sh:sh + ch, sw:sw + cw]
    labels = None
    if labels_path is not None:
        labels = _read_idx_array(Path(labels_path), IDX_UBYTE_1D)
        if len(labels) != n:
            raise ValueError(f"{labels_path}: {len(labels)} labels for {n} images")
    tr, te = split_indices(n, seed)
    return Dataset(out[:, None], tr, te, provenance=f"idx({images_path})", labels=labels)


# ---------------------------------------------------------------- PGM

def pgm_write(path, image) -> None:
    """Binary P5 PGM, maxval 255, mapping [-1, 1] affinely onto [0, 255]."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"pgm_write expects a 2D image, got {img.shape}")
    if img.min() < -1 or img.max() > 1:
        raise ValueError("pgm_write expects values in [-1, 1]")
    q = np.rint((img + 1.0) * 127.5).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(q.tobytes())


def pgm_read(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: malformed PGM header")
        tokens.append(raw[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise ValueError(f"{path}: malformed PGM header") from exc
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported, got {maxval}")
    data = raw[pos:pos + w * h]
    if len(data) != w * h:
        raise ValueError(f"{path}: truncated PGM payload")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).astype(np.float64) / 127.5 - 1.0


def tile_grid(images, ncols: int | None = None, pad: int = 1) -> np.ndarray:
    """Arrange [N, (1,) H, W] images into one 2D grid with ``-1`` separators."""
    imgs = np.asarray(images, dtype=np.float64)
    if imgs.ndim == 4:
        imgs = imgs[:, 0]
    n, h, w = imgs.shape
    ncols = ncols or int(np.ceil(np.sqrt(max(n, 1))))
    nrows = int(np.ceil(n / ncols)) if n else 1
    grid = np.full((nrows * (h + pad) + pad, ncols * (w + pad) + pad), -1.0)
    for i in range(n):
        r, c = divmod(i, ncols)
        grid[pad + r * (h + pad):pad + r * (h + pad) + h,
             pad + c * (w + pad):pad + c * (w + pad) + w] = np.clip(imgs[i], -1, 1)
    return grid


def write_manifest(path, dataset: Dataset) -> None:
    """CSV with one row per image: index, split, provenance."""
    split = {int(i): "train" for i in dataset.train_idx}
    split.update({int(i): "test" for i in dataset.test_idx})
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["index", "split", "provenance"])
        for i in range(len(dataset)):
            wr.writerow([i, split[i], dataset.provenance])
