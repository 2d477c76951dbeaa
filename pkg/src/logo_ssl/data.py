"""Datasets: image folders, CIFAR binaries and a synthetic multi-object generator.

The synthetic images put several distinct shapes on a textured background.
The label is the shape class of the first (largest) object, and every
object's bounding box is recorded, so small crops that land on different
objects genuinely show different content.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ContractError

IMAGE_EXTS = (".png", ".jpg", ".jpeg")
CIFAR_RECORD = 1 + 32 * 32 * 3

SHAPES = (
    "disk", "square", "triangle", "plus", "ring",
    "diamond", "frame", "cross", "half_disk", "bars",
)


class DataError(ValueError):
    """Dataset files are missing, malformed or undecodable."""


@dataclass
class ImageSample:
    pixels: np.ndarray  # [H, W, 3] float32 in [0, 1]
    label: int | None
    source_id: int
    boxes: list | None = None  # [(top, left, height, width, shape_class), ...]

    def __post_init__(self):
        p = self.pixels
        if p.ndim != 3 or p.shape[2] != 3:
            raise ContractError(f"pixels must be [H, W, 3], got {p.shape}")
        if p.shape[0] < 32 or p.shape[1] < 32:
            raise ContractError(f"images must be at least 32x32, got {p.shape[:2]}")


@dataclass
class Dataset:
    samples: list
    class_names: list | None = None
    splits: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [s.source_id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise ContractError("source ids must be unique")
        seen = set()
        for name, idx in self.splits.items():
            s = set(idx)
            if s & seen:
                raise ContractError(f"split {name!r} overlaps another split")
            seen |= s
        self._stack = None

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    @property
    def labels(self) -> np.ndarray:
        return np.array([-1 if s.label is None else s.label for s in self.samples], dtype=np.int64)

    def tensor(self, indices=None) -> torch.Tensor:
        """Images as a ``[B, 3, H, W]`` float tensor (requires a common size)."""
        if self._stack is None:
            shapes = {s.pixels.shape for s in self.samples}
            if len(shapes) != 1:
                raise ContractError(f"images have different sizes {sorted(shapes)}; resize on load")
            arr = np.stack([s.pixels for s in self.samples]).astype(np.float32)
            self._stack = torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()
        if indices is None:
            return self._stack
        return self._stack[torch.as_tensor(np.asarray(indices), dtype=torch.long)]

    def subset(self, name) -> "Dataset":
        idx = self.splits[name]
        return Dataset([self.samples[i] for i in idx], self.class_names, {})


def split_dataset(dataset: Dataset, val_fraction: float, seed: int = 0) -> Dataset:
    """Copy of ``dataset`` with a seeded random ``train``/``val`` split."""
    if not 0 < val_fraction < 1:
        raise ContractError("val_fraction must lie in (0, 1)")
    n = len(dataset)
    n_val = int(round(val_fraction * n))
    if n_val == 0 or n_val == n:
        raise ContractError(f"cannot split {n} images with val_fraction={val_fraction}")
    order = np.random.default_rng(seed).permutation(n)
    splits = {"train": sorted(order[n_val:].tolist()), "val": sorted(order[:n_val].tolist())}
    return Dataset(dataset.samples, dataset.class_names, splits)


# -- image folders ---------------------------------------------------------

def read_image(path, size=None) -> np.ndarray:
    """One RGB image as ``[H, W, 3]`` float32 in [0, 1], optionally resized square."""
    from PIL import Image

    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None and im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        return np.asarray(im, dtype=np.float32) / 255.0


def load_image_folder(path, size=None) -> Dataset:
    """Load ``path/<class>/<image>`` trees; classes and files sorted lexicographically.

    Decode failures are collected and reported together.
    """
    root = Path(path)
    if not root.is_dir():
        raise DataError(f"{root} is not a directory")
    classes = sorted(d.name for d in root.iterdir() if d.is_dir())
    if not classes:
        raise DataError("no classes found")
    samples, errors = [], []
    for label, name in enumerate(classes):
        files = sorted(f for f in (root / name).iterdir() if f.suffix.lower() in IMAGE_EXTS)
        for f in files:
            try:
                pix = read_image(f, size)
                samples.append(ImageSample(pix, label, len(samples)))
            except Exception as exc:  # noqa: BLE001 - every failure is reported below
                errors.append(f"{f}: {exc}")
    if errors:
        raise DataError(f"{len(errors)} file(s) could not be loaded:\n" + "\n".join(errors))
    if not samples:
        raise DataError("no images found")
    return Dataset(samples, classes)


def export_image_folder(dataset: Dataset, path) -> Path:
    """Write each sample as ``<path>/<NN_class>/<source_id>.png`` (8-bit).

    The two-digit label prefix keeps lexicographic folder order equal to label
    order, so :func:`load_image_folder` gives back the same labels.
    """
    from PIL import Image

    root = Path(path)
    names = dataset.class_names
    for s in dataset.samples:
        label = 0 if s.label is None else s.label
        cname = f"{label:02d}_{names[label]}" if names else f"class_{label:02d}"
        d = root / cname
        d.mkdir(parents=True, exist_ok=True)
        arr = np.clip(np.rint(s.pixels * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(arr).save(d / f"{s.source_id:06d}.png")
    return root


# -- CIFAR binary batches --------------------------------------------------

def load_cifar_binary(path) -> Dataset:
    """Read one or more CIFAR-10 binary batch files (label byte + 3072 CHW pixel bytes)."""
    paths = [path] if isinstance(path, (str, Path)) else list(path)
    samples = []
    for p in paths:
        raw = Path(p).read_bytes()
        if len(raw) % CIFAR_RECORD:
            raise DataError(f"{p}: size {len(raw)} is not a multiple of {CIFAR_RECORD}")
        recs = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        pix = recs[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1).astype(np.float32) / 255.0
        for lab, im in zip(recs[:, 0], pix):
            samples.append(ImageSample(im, int(lab), len(samples)))
    return Dataset(samples)


def write_cifar_binary(dataset: Dataset, path) -> Path:
    out = bytearray()
    for s in dataset.samples:
        if s.pixels.shape != (32, 32, 3):
            raise ContractError("CIFAR records hold 32x32x3 images")
        out.append(int(s.label or 0))
        out += np.clip(np.rint(s.pixels * 255.0), 0, 255).astype(np.uint8).transpose(2, 0, 1).tobytes()
    Path(path).write_bytes(bytes(out))
    return Path(path)


# -- synthetic composites --------------------------------------------------

@dataclass
class SynthConfig:
    num_images: int = 2000
    canvas_size: int = 64
    objects_per_image: int = 3
    num_shape_classes: int = 10
    background_kinds: int = 3
    seed: int = 0
    val_fraction: float = 0.2
    primary_size: tuple = (0.45, 0.6)
    secondary_size: tuple = (0.22, 0.32)
    # each shape class owns a hue band of this half-width; None draws colours freely
    class_hue_jitter: float | None = 0.03
    # two-tone class-specific fill texture (survives colour jitter and grayscale)
    textured_fill: bool = True
    fill_period: int = 6

    def __post_init__(self):
        if self.objects_per_image < 2:
            raise ContractError("objects_per_image must be >= 2")
        if not 2 <= self.num_shape_classes <= len(SHAPES):
            raise ContractError(f"num_shape_classes must lie in [2, {len(SHAPES)}]")
        if self.objects_per_image > self.num_shape_classes:
            raise ContractError("objects in one image must have distinct shape classes")
        if self.canvas_size < 32:
            raise ContractError("canvas_size must be >= 32")
        if self.background_kinds < 1:
            raise ContractError("background_kinds must be >= 1")


def shape_mask(kind: int, size_h: int, size_w: int) -> np.ndarray:
    """Boolean mask of shape class ``kind`` filling a ``size_h x size_w`` box."""
    v, u = np.meshgrid(
        (np.arange(size_h) + 0.5) / size_h * 2 - 1,
        (np.arange(size_w) + 0.5) / size_w * 2 - 1,
        indexing="ij",
    )
    r = np.hypot(u, v)
    name = SHAPES[kind]
    if name == "disk":
        return r <= 0.95
    if name == "square":
        return (np.abs(u) <= 0.8) & (np.abs(v) <= 0.8)
    if name == "triangle":
        return (v >= -0.9) & (v <= 0.9) & (np.abs(u) <= (v + 0.9) / 1.8 * 0.95)
    if name == "plus":
        return ((np.abs(u) <= 0.3) & (np.abs(v) <= 0.95)) | ((np.abs(v) <= 0.3) & (np.abs(u) <= 0.95))
    if name == "ring":
        return (r <= 0.95) & (r >= 0.55)
    if name == "diamond":
        return np.abs(u) + np.abs(v) <= 0.95
    if name == "frame":
        sq = (np.abs(u) <= 0.9) & (np.abs(v) <= 0.9)
        return sq & ~((np.abs(u) <= 0.5) & (np.abs(v) <= 0.5))
    if name == "cross":
        return ((np.abs(u - v) <= 0.35) | (np.abs(u + v) <= 0.35)) & (np.maximum(np.abs(u), np.abs(v)) <= 0.9)
    if name == "half_disk":
        return (r <= 0.95) & (v >= 0.0)
    if name == "bars":
        return (np.abs(u) <= 0.9) & (np.abs(v) <= 0.9) & (np.floor((v + 1) * 2.5) % 2 == 0)
    raise ContractError(f"unknown shape class {kind}")


FILLS = (
    "solid", "hstripes", "vstripes", "diag", "antidiag",
    "checker", "dots", "rings", "grid", "coarse_checker",
)


def fill_pattern(kind: int, h: int, w: int, period: int) -> np.ndarray:
    """Boolean "dark tone" mask of the fill texture for class ``kind``."""
    y, x = np.mgrid[0:h, 0:w]
    half = period / 2
    name = FILLS[kind % len(FILLS)]
    if name == "solid":
        return np.zeros((h, w), dtype=bool)
    if name == "hstripes":
        return (y // half) % 2 == 1
    if name == "vstripes":
        return (x // half) % 2 == 1
    if name == "diag":
        return ((x + y) // half) % 2 == 1
    if name == "antidiag":
        return ((x - y) // half) % 2 == 1
    if name == "checker":
        return ((x // half) + (y // half)) % 2 == 1
    if name == "dots":
        return (np.hypot((x % period) - half, (y % period) - half) < period / 4)
    if name == "rings":
        return (np.hypot(x - w / 2, y - h / 2) // half) % 2 == 1
    if name == "grid":
        return ((x % period) < 1.5) | ((y % period) < 1.5)
    return ((x // period) + (y // period)) % 2 == 1


def _background(rng, kind, n):
    """Low-contrast, near-neutral texture: visible, but a weak identity cue."""
    base = 0.5 + rng.uniform(-0.08, 0.08) + rng.normal(0, 0.02, size=3)
    amp = 0.06
    yy, xx = np.mgrid[0:n, 0:n] / n
    if kind == 0:
        ang = rng.uniform(0, np.pi)
        t = np.cos(ang) * xx + np.sin(ang) * yy
        t = (t - t.min()) / max(t.max() - t.min(), 1e-6) - 0.5
    elif kind == 1:
        period = rng.uniform(4, 10)
        ang = rng.uniform(0, np.pi)
        t = 0.5 * np.sin(2 * np.pi * (np.cos(ang) * xx + np.sin(ang) * yy) * n / period)
    else:
        t = rng.random((n, n)) - 0.5
    img = base[None, None, :] + amp * t[..., None]
    return img + rng.normal(0, 0.015, size=(n, n, 3))


def _overlap_ok(a, b, limit=0.3):
    t0, l0, h0, w0 = a
    t1, l1, h1, w1 = b
    ih = max(0, min(t0 + h0, t1 + h1) - max(t0, t1))
    iw = max(0, min(l0 + w0, l1 + w1) - max(l0, l1))
    inter = ih * iw
    return inter < limit * h0 * w0 and inter < limit * h1 * w1


def _place(rng, n, sizes, tries=200):
    boxes = []
    for s in sizes:
        for attempt in range(tries):
            ss = s if attempt < tries // 2 else max(6, int(s * 0.8))
            top = int(rng.integers(0, n - ss + 1))
            left = int(rng.integers(0, n - ss + 1))
            cand = (top, left, ss, ss)
            if all(_overlap_ok(cand, b) for b in boxes):
                boxes.append(cand)
                break
        else:
            raise ContractError("could not place objects without heavy overlap; lower object sizes")
    return boxes


def _object_colors(rng, classes, num_classes, hue_jitter):
    k = len(classes)
    if hue_jitter is None:
        h0 = rng.random()
        hues = (h0 + np.arange(k) / k + rng.uniform(-0.05, 0.05, size=k)) % 1.0
        rng.shuffle(hues)
    else:
        hues = (np.asarray(classes) / num_classes + rng.uniform(-hue_jitter, hue_jitter, size=k)) % 1.0
    cols = [colorsys.hsv_to_rgb(h, rng.uniform(0.6, 1.0), rng.uniform(0.55, 1.0)) for h in hues]
    return np.array(cols)


def generate_synthetic(cfg: SynthConfig | None = None, **overrides) -> Dataset:
    """Composite images of ``objects_per_image`` distinct shapes on textured backgrounds.

    Labels are balanced over the shape classes. Pixels are quantised to the
    8-bit grid so PNG export is lossless.
    """
    cfg = cfg or SynthConfig(**overrides)
    rng = np.random.default_rng(cfg.seed)
    n = cfg.canvas_size
    C = cfg.num_shape_classes
    labels = np.arange(cfg.num_images) % C
    rng.shuffle(labels)
    samples = []
    for i in range(cfg.num_images):
        others = rng.permutation([c for c in range(C) if c != labels[i]])[: cfg.objects_per_image - 1]
        classes = [int(labels[i])] + [int(c) for c in others]
        sizes = [int(round(rng.uniform(*cfg.primary_size) * n))]
        sizes += [int(round(rng.uniform(*cfg.secondary_size) * n)) for _ in others]
        boxes = _place(rng, n, sizes)
        img = _background(rng, int(rng.integers(cfg.background_kinds)), n)
        colors = _object_colors(rng, classes, C, cfg.class_hue_jitter)
        # draw small objects first so the primary object stays fully visible
        for (top, left, h, w), cls, col in reversed(list(zip(boxes, classes, colors))):
            m = shape_mask(cls, h, w)
            patch = img[top:top + h, left:left + w]
            if cfg.textured_fill:
                dark = fill_pattern(cls, h, w, cfg.fill_period)
                patch[m & ~dark] = col
                patch[m & dark] = col * 0.4
            else:
                patch[m] = col
        img = np.clip(np.rint(np.clip(img, 0, 1) * 255.0) / 255.0, 0, 1).astype(np.float32)
        samples.append(ImageSample(img, int(labels[i]), i, [b + (c,) for b, c in zip(boxes, classes)]))
    n_val = int(round(cfg.val_fraction * cfg.num_images))
    order = rng.permutation(cfg.num_images)
    splits = {"train": sorted(order[n_val:].tolist()), "val": sorted(order[:n_val].tolist())}
    return Dataset(samples, [SHAPES[c] for c in range(C)], splits)
