"""Dataset loading, style shifts for OOD targets, and image serialization."""

import hashlib
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

BUILTIN_NAME = "shapes10"
_SPLIT_OFFSETS = {"gan-train": 0, "fl-eval": 1_000_000}


@dataclass
class DatasetSpec:
    source: str = BUILTIN_NAME          # builtin name or directory of class folders
    resolution: int = 32
    channels: int = 3
    num_classes: int = 10
    split: str = "gan-train"            # "gan-train" | "fl-eval", disjoint
    size: int = 2000                    # builtin only


@dataclass
class ImageStore:
    images: np.ndarray                  # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray                  # (N,) int64
    ids: np.ndarray                     # (N,) int64, globally unique across splits
    spec: DatasetSpec = field(repr=False, default=None)

    def __len__(self):
        return len(self.labels)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.images.tobytes())
        h.update(self.labels.tobytes())
        return h.hexdigest()


def _draw_shape(rng: np.random.Generator, cls: int, res: int) -> np.ndarray:
    """One synthetic image. Class encodes shape kind (cls % 5) and palette (cls // 5)."""
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float32) / (res - 1)
    cy, cx = rng.uniform(0.3, 0.7, size=2)
    rad = rng.uniform(0.18, 0.3)
    kind = cls % 5
    if kind == 0:       # disc
        mask = (xx - cx) ** 2 + (yy - cy) ** 2 < rad**2
    elif kind == 1:     # square
        mask = (np.abs(xx - cx) < rad) & (np.abs(yy - cy) < rad)
    elif kind == 2:     # diamond
        mask = np.abs(xx - cx) + np.abs(yy - cy) < rad * 1.3
    elif kind == 3:     # cross
        w = rad * 0.45
        mask = ((np.abs(xx - cx) < w) & (np.abs(yy - cy) < rad)) | (
            (np.abs(yy - cy) < w) & (np.abs(xx - cx) < rad)
        )
    else:               # horizontal bar
        mask = (np.abs(yy - cy) < rad * 0.5) & (np.abs(xx - cx) < rad * 1.5)

    if cls < 5:         # warm foreground, dark background
        fg = np.array([0.85, 0.35, 0.2]) + rng.uniform(-0.1, 0.1, 3)
        bg = np.array([0.12, 0.12, 0.2]) + rng.uniform(-0.05, 0.05, 3)
    else:               # cool foreground, light background
        fg = np.array([0.2, 0.45, 0.85]) + rng.uniform(-0.1, 0.1, 3)
        bg = np.array([0.8, 0.8, 0.7]) + rng.uniform(-0.05, 0.05, 3)

    img = np.where(mask[None], fg[:, None, None], bg[:, None, None])
    img = img + rng.normal(0.0, 0.015, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _load_builtin(spec: DatasetSpec) -> ImageStore:
    if spec.split not in _SPLIT_OFFSETS:
        raise ValueError(f"unknown split {spec.split!r}")
    offset = _SPLIT_OFFSETS[spec.split]
    n = spec.size
    images = np.empty((n, 3, spec.resolution, spec.resolution), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    ids = np.arange(n, dtype=np.int64) + offset
    for i in range(n):
        cls = i % spec.num_classes
        rng = np.random.default_rng(offset + i)
        images[i] = _draw_shape(rng, cls, spec.resolution)
        labels[i] = cls
    return ImageStore(images, labels, ids, spec)


def _load_folder(spec: DatasetSpec) -> ImageStore:
    classes = sorted(
        d for d in os.listdir(spec.source)
        if os.path.isdir(os.path.join(spec.source, d))
    )
    if not classes:
        raise FileNotFoundError(f"no class folders under {spec.source}")
    images, labels = [], []
    for cls_idx, cls in enumerate(classes):
        cls_dir = os.path.join(spec.source, cls)
        for name in sorted(os.listdir(cls_dir)):
            img = Image.open(os.path.join(cls_dir, name)).convert("RGB")
            img = img.resize((spec.resolution, spec.resolution), Image.BILINEAR)
            arr = np.asarray(img, dtype=np.float32).transpose(2, 0, 1) / 255.0
            images.append(arr)
            labels.append(cls_idx)
    images = np.stack(images)
    labels = np.asarray(labels, dtype=np.int64)
    ids = np.arange(len(labels), dtype=np.int64)
    return ImageStore(images, labels, ids, spec)


def load_dataset(spec: DatasetSpec) -> ImageStore:
    """Deterministic load; images in [0,1], ordering fixed by (class, filename) or index."""
    if spec.source == BUILTIN_NAME:
        return _load_builtin(spec)
    if not os.path.isdir(spec.source):
        raise FileNotFoundError(spec.source)
    return _load_folder(spec)


# ---------------------------------------------------------------------------
# Style transforms (OOD targets: same labels, shifted feature distribution)

STYLE_VARIANTS = ("identity", "invert", "posterize", "hue-rotate", "edge-sketch")


@dataclass
class StyleTransform:
    variant: str = "identity"
    levels: int = 4            # posterize
    degrees: float = 90.0      # hue-rotate


def _rgb_to_hsv(x):
    # x: (..., 3, H, W) in [0,1]
    import matplotlib.colors as mcolors

    flat = np.moveaxis(x, -3, -1)
    return np.moveaxis(mcolors.rgb_to_hsv(flat), -1, -3)


def _hsv_to_rgb(x):
    import matplotlib.colors as mcolors

    flat = np.moveaxis(x, -3, -1)
    return np.moveaxis(mcolors.hsv_to_rgb(flat), -1, -3)


def apply_style(images: np.ndarray, transform: StyleTransform) -> np.ndarray:
    """Label-preserving pixel transform; output stays in [0,1]."""
    v = transform.variant
    if v == "identity":
        return images.copy()
    if v == "invert":
        return (1.0 - images).astype(images.dtype)
    if v == "posterize":
        lv = max(2, int(transform.levels))
        q = np.floor(images * lv).clip(0, lv - 1) / (lv - 1)
        return q.astype(images.dtype)
    if v == "hue-rotate":
        hsv = _rgb_to_hsv(images)
        hsv[..., 0, :, :] = (hsv[..., 0, :, :] + transform.degrees / 360.0) % 1.0
        return _hsv_to_rgb(hsv).astype(images.dtype).clip(0.0, 1.0)
    if v == "edge-sketch":
        gray = images.mean(axis=-3, keepdims=True)
        gx = np.zeros_like(gray)
        gy = np.zeros_like(gray)
        gx[..., :, 1:] = np.abs(np.diff(gray, axis=-1))
        gy[..., 1:, :] = np.abs(np.diff(gray, axis=-2))
        edges = np.clip((gx + gy) * 4.0, 0.0, 1.0)
        sketch = 1.0 - edges
        return np.repeat(sketch, images.shape[-3], axis=-3).astype(images.dtype)
    raise ValueError(f"unknown style variant {v!r}")


def save_images(images, out_dir: str, prefix: str = "recon") -> list:
    """Write a batch of [0,1] images as 8-bit PNGs named <prefix>_000.png..."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for i, img in enumerate(arr):
        u8 = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
        if u8.ndim == 3 and u8.shape[0] == 1:
            pil = Image.fromarray(u8[0])
        elif u8.ndim == 3:
            pil = Image.fromarray(u8.transpose(1, 2, 0))
        else:
            pil = Image.fromarray(u8)
        path = os.path.join(out_dir, f"{prefix}_{i:03d}.png")
        pil.save(path)
        paths.append(path)
    return paths


def load_image(path: str) -> np.ndarray:
    img = Image.open(path).convert("RGB")
    return np.asarray(img, dtype=np.float32).transpose(2, 0, 1) / 255.0
