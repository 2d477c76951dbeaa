"""Global/local multi-crop augmentation.

Every view of an image is a random resized crop followed by the MoCo-v2
photometric recipe (flip, colour jitter, grayscale, optional blur). Global
crops cover at least ``global_scale[0]`` of the image area, local crops at
most ``local_scale[1]``. All randomness comes from an explicitly passed
:class:`numpy.random.Generator`, so a fixed seed reproduces the views bit for
bit.

Crops and photometric ops are vectorised over the batch with torch; the
per-image entry point :func:`make_views` is the batch path with ``B = 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ContractError

LUMA = (0.299, 0.587, 0.114)
MAX_CROP_ATTEMPTS = 10


@dataclass(frozen=True)
class CropRect:
    top: int
    left: int
    height: int
    width: int
    area_fraction: float
    fallback: bool = False


@dataclass
class AugmentationConfig:
    global_scale: tuple[float, float] = (0.4, 1.0)
    local_scale: tuple[float, float] = (0.05, 0.4)
    aspect_ratio: tuple[float, float] = (3 / 4, 4 / 3)
    output_size_global: int = 64
    output_size_local: int = 32
    flip_prob: float = 0.5
    jitter_prob: float = 0.8
    grayscale_prob: float = 0.2
    blur_prob: float = 0.0
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1
    blur_sigma: tuple[float, float] = (0.1, 2.0)

    def __post_init__(self):
        self.global_scale = tuple(float(v) for v in self.global_scale)
        self.local_scale = tuple(float(v) for v in self.local_scale)
        self.aspect_ratio = tuple(float(v) for v in self.aspect_ratio)
        self.blur_sigma = tuple(float(v) for v in self.blur_sigma)
        self.validate()

    @property
    def r_g(self) -> float:
        """Lower bound on the area fraction of a global crop."""
        return self.global_scale[0]

    @property
    def r_l(self) -> float:
        """Upper bound on the area fraction of a local crop."""
        return self.local_scale[1]

    def validate(self):
        for name in ("global_scale", "local_scale"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi <= 1:
                raise ContractError(f"{name} must satisfy 0 < lo <= hi <= 1, got {(lo, hi)}")
        if self.r_g < self.r_l:
            raise ContractError(
                f"global crops must not be smaller than local crops: r_g={self.r_g} < r_l={self.r_l}"
            )
        lo, hi = self.aspect_ratio
        if not 0 < lo <= hi:
            raise ContractError(f"aspect_ratio bounds must be positive and ordered, got {(lo, hi)}")
        for name in ("flip_prob", "jitter_prob", "grayscale_prob", "blur_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ContractError(f"{name} must lie in [0, 1], got {p}")
        for name in ("brightness", "contrast", "saturation", "hue"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} jitter strength must be non-negative")
        if self.hue > 0.5:
            raise ContractError("hue jitter strength must be <= 0.5")
        if self.output_size_global < 1 or self.output_size_local < 1:
            raise ContractError("output sizes must be positive")

    def without_photometric(self) -> "AugmentationConfig":
        """Copy of this config with every photometric probability set to zero."""
        kw = dict(self.__dict__)
        kw.update(flip_prob=0.0, jitter_prob=0.0, grayscale_prob=0.0, blur_prob=0.0)
        return AugmentationConfig(**kw)


@dataclass
class ViewBatch:
    """Two global and two local views for each of ``B`` source images.

    ``global_views[i]`` is a ``[B, C, S_g, S_g]`` tensor, ``local_views[i]`` a
    ``[B, C, S_l, S_l]`` tensor; ``rects[b]`` holds the four crop rectangles of
    image ``b`` in the order global_1, global_2, local_1, local_2.
    """

    global_views: tuple[torch.Tensor, torch.Tensor]
    local_views: tuple[torch.Tensor, torch.Tensor]
    rects: list[tuple[CropRect, CropRect, CropRect, CropRect]]
    source_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self):
        return self.global_views[0].shape[0]

    @property
    def any_fallback(self) -> bool:
        return any(r.fallback for rs in self.rects for r in rs)

    def view_set(self, b: int) -> "ViewSet":
        return ViewSet(
            global_views=(self.global_views[0][b], self.global_views[1][b]),
            local_views=(self.local_views[0][b], self.local_views[1][b]),
            rects=self.rects[b],
            source_id=int(self.source_ids[b]),
        )


@dataclass
class ViewSet:
    """The four views of one image. Views are ``[C, S, S]`` tensors."""

    global_views: tuple[torch.Tensor, torch.Tensor]
    local_views: tuple[torch.Tensor, torch.Tensor]
    rects: tuple[CropRect, CropRect, CropRect, CropRect]
    source_id: int

    @property
    def fallback(self) -> bool:
        return any(r.fallback for r in self.rects)


def sample_crop_rect(rng: np.random.Generator, image_dims, scale, ratio,
                     max_attempts: int = MAX_CROP_ATTEMPTS) -> CropRect:
    """Draw a random crop whose area fraction lies in ``scale``.

    Rejection sampling over (area, log aspect ratio). A candidate is accepted
    only when, after rounding to whole pixels, it fits inside the image and
    its area fraction and aspect ratio both lie inside the requested bounds.
    After ``max_attempts`` failures the largest centred crop with area
    fraction at most ``scale[1]`` is returned with ``fallback=True``.
    """
    H, W = (int(v) for v in image_dims)
    lo, hi = scale
    r_lo, r_hi = ratio
    if not 0 < lo <= hi <= 1:
        raise ContractError(f"scale must satisfy 0 < lo <= hi <= 1, got {scale}")
    if not 0 < r_lo <= r_hi:
        raise ContractError(f"ratio bounds must be positive, got {ratio}")
    if H < 1 or W < 1:
        raise ContractError(f"image dims must be positive, got {image_dims}")
    area = H * W
    eps = 1e-9
    log_r = (math.log(r_lo), math.log(r_hi))
    for _ in range(max_attempts):
        target = area * rng.uniform(lo, hi)
        aspect = math.exp(rng.uniform(*log_r))
        w = int(round(math.sqrt(target * aspect)))
        h = int(round(math.sqrt(target / aspect)))
        if not (0 < w <= W and 0 < h <= H):
            continue
        if not (lo * area - eps <= h * w <= hi * area + eps):
            continue
        if not (r_lo - eps <= w / h <= r_hi + eps):
            continue
        top = int(rng.integers(0, H - h + 1))
        left = int(rng.integers(0, W - w + 1))
        return CropRect(top, left, h, w, h * w / area)

    aspect = min(max(W / H, r_lo), r_hi)
    target = hi * area
    w = min(W, max(1, int(math.floor(math.sqrt(target * aspect) + eps))))
    h = min(H, max(1, int(math.floor(math.sqrt(target / aspect) + eps))))
    top, left = (H - h) // 2, (W - w) // 2
    return CropRect(top, left, h, w, h * w / area, fallback=True)


def crop_and_resize(images: torch.Tensor, rects: Sequence[CropRect], size: int) -> torch.Tensor:
    """Bilinear resampling of one rectangle per image to ``size x size``.

    ``images`` is ``[B, C, H, W]``. Output pixel centres map linearly onto
    the rectangle, so the full-image rectangle at the native size is the
    identity map.
    """
    B, _, H, W = images.shape
    if len(rects) != B:
        raise ContractError(f"need one rect per image, got {len(rects)} for {B} images")
    if B == 0:
        return images.new_zeros((0, images.shape[1], size, size))
    geo = np.array([(r.top, r.left, r.height, r.width) for r in rects], dtype=np.float64)
    th = np.zeros((B, 2, 3))
    th[:, 0, 0] = geo[:, 3] / W
    th[:, 0, 2] = (2 * geo[:, 1] + geo[:, 3]) / W - 1
    th[:, 1, 1] = geo[:, 2] / H
    th[:, 1, 2] = (2 * geo[:, 0] + geo[:, 2]) / H - 1
    theta = torch.from_numpy(th).to(images.dtype)
    grid = F.affine_grid(theta, [B, images.shape[1], size, size], align_corners=False)
    out = F.grid_sample(images, grid, mode="bilinear", padding_mode="border", align_corners=False)
    return out.clamp_(0.0, 1.0)


def resize_full(images: torch.Tensor, size: int) -> torch.Tensor:
    """Resize whole images with the same resampler the crops use."""
    _, _, H, W = images.shape
    full = CropRect(0, 0, H, W, 1.0)
    return crop_and_resize(images, [full] * images.shape[0], size)


# -- photometric ops, all on [B, 3, H, W] tensors in [0, 1] ------------------

def grayscale(x: torch.Tensor) -> torch.Tensor:
    """Luma grayscale, replicated back to three channels."""
    r, g, b = x.unbind(dim=-3)
    y = LUMA[0] * r + LUMA[1] * g + LUMA[2] * b
    return y.unsqueeze(-3).expand_as(x).contiguous()


def _blend(a, b, factor):
    return (factor * a + (1.0 - factor) * b).clamp(0.0, 1.0)


def adjust_brightness(x, factor):
    return (x * factor).clamp(0.0, 1.0)


def adjust_contrast(x, factor):
    mean = grayscale(x)[:, :1].mean(dim=(-3, -2, -1), keepdim=True)
    return _blend(x, mean, factor)


def adjust_saturation(x, factor):
    return _blend(x, grayscale(x), factor)


def _rgb_to_hsv(x):
    r, g, b = x.unbind(dim=-3)
    maxc = x.amax(dim=-3)
    minc = x.amin(dim=-3)
    v = maxc
    delta = maxc - minc
    # pixels are non-negative, so maxc == 0 implies delta == 0
    s = delta / maxc.clamp_min(1e-12)
    safe = torch.where(delta > 0, delta, torch.ones_like(delta))
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    h = torch.where(maxc == r, bc - gc, torch.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = torch.where(delta > 0, (h / 6.0) % 1.0, torch.zeros_like(h))
    return h, s, v


def _hsv_to_rgb(h, s, v):
    # closed form: channel n in (5, 3, 1) is v - v*s*clip(min(k, 4 - k), 0, 1), k = (n + 6h) mod 6
    h6 = h * 6.0
    vs = v * s
    out = []
    for n in (5.0, 3.0, 1.0):
        k = (n + h6) % 6.0
        out.append(v - vs * torch.minimum(k, 4.0 - k).clamp(0.0, 1.0))
    return torch.stack(out, dim=-3)


def adjust_hue(x, shift):
    """Rotate hue by ``shift`` turns (``shift`` broadcast per image)."""
    h, s, v = _rgb_to_hsv(x)
    h = (h + shift.view(-1, 1, 1)) % 1.0
    return _hsv_to_rgb(h, s, v).clamp(0.0, 1.0)


def gaussian_blur(x, sigma, kernel_size=None):
    """Separable Gaussian blur with one sigma per image, reflect padding."""
    B, C, H, W = x.shape
    if kernel_size is None:
        kernel_size = max(3, int(0.1 * min(H, W)))
    if kernel_size % 2 == 0:
        kernel_size += 1
    half = kernel_size // 2
    if half >= min(H, W):
        half = min(H, W) - 1
        kernel_size = 2 * half + 1
    if half < 1:
        return x.clone()
    offs = torch.arange(-half, half + 1, dtype=x.dtype)
    k = torch.exp(-0.5 * (offs[None, :] / sigma.view(-1, 1)) ** 2)
    k = k / k.sum(dim=1, keepdim=True)
    k = k.repeat_interleave(C, dim=0)  # [B*C, K]
    y = x.reshape(1, B * C, H, W)
    y = F.pad(y, (half, half, half, half), mode="reflect")
    y = F.conv2d(y, k.view(B * C, 1, 1, kernel_size), groups=B * C)
    y = F.conv2d(y, k.view(B * C, 1, kernel_size, 1), groups=B * C)
    return y.view(B, C, H, W)


def _factor(rng, strength, n):
    return rng.uniform(max(0.0, 1.0 - strength), 1.0 + strength, size=n)


def apply_photometric(view: torch.Tensor, cfg: AugmentationConfig, rng: np.random.Generator) -> torch.Tensor:
    """Random flip, colour jitter, grayscale and blur, independently per image.

    Accepts ``[C, H, W]`` or ``[B, C, H, W]``. The generator is consumed by
    the same amount whatever the probabilities are, and images that draw no
    op are returned bit-identical.
    """
    single = view.dim() == 3
    x = view.unsqueeze(0) if single else view
    B = x.shape[0]
    if B == 0:
        return view.clone()

    u_flip = rng.random(B)
    u_jit = rng.random(B)
    fb = _factor(rng, cfg.brightness, B)
    fc = _factor(rng, cfg.contrast, B)
    fs = _factor(rng, cfg.saturation, B)
    fh = rng.uniform(-cfg.hue, cfg.hue, size=B)
    u_gray = rng.random(B)
    u_blur = rng.random(B)
    sig = rng.uniform(cfg.blur_sigma[0], cfg.blur_sigma[1], size=B)

    def mask(u, p):
        return torch.from_numpy(u < p).view(B, 1, 1, 1)

    def col(a):
        return torch.as_tensor(a, dtype=x.dtype).view(B, 1, 1, 1)

    out = x
    m = mask(u_flip, cfg.flip_prob)
    if m.any():
        out = torch.where(m, out.flip(-1), out)
    m = mask(u_jit, cfg.jitter_prob)
    if m.any():
        y = adjust_brightness(out, col(fb))
        y = adjust_contrast(y, col(fc))
        y = adjust_saturation(y, col(fs))
        if cfg.hue > 0:
            y = adjust_hue(y, torch.as_tensor(fh, dtype=x.dtype))
        out = torch.where(m, y, out)
    m = mask(u_gray, cfg.grayscale_prob)
    if m.any():
        out = torch.where(m, grayscale(out), out)
    m = mask(u_blur, cfg.blur_prob)
    if m.any():
        out = torch.where(m, gaussian_blur(out, torch.as_tensor(sig, dtype=x.dtype)), out)
    if out is x:
        out = x.clone()
    out = out.clamp(0.0, 1.0)
    return out[0] if single else out


def to_tensor_batch(images) -> torch.Tensor:
    """Stack ``[H, W, C]`` arrays (or ImageSamples) into a ``[B, C, H, W]`` float tensor."""
    arrs = [getattr(im, "pixels", im) for im in images]
    if len(arrs) == 0:
        raise ContractError("empty image batch")
    x = torch.from_numpy(np.ascontiguousarray(np.stack(arrs), dtype=np.float32))
    return x.permute(0, 3, 1, 2).contiguous()


def make_view_batch(images, cfg: AugmentationConfig, rng: np.random.Generator,
                    source_ids=None) -> ViewBatch:
    """Build a :class:`ViewBatch` for a batch of images.

    ``images`` is a ``[B, C, H, W]`` tensor or a sequence of ``[H, W, C]``
    arrays/ImageSamples of one common size. Crop rectangles are drawn image
    by image (global_1, global_2, local_1, local_2), then each of the four
    view groups gets its photometric parameters.
    """
    if not torch.is_tensor(images):
        if source_ids is None and len(images) and hasattr(images[0], "source_id"):
            source_ids = [im.source_id for im in images]
        images = to_tensor_batch(images)
    if images.dim() != 4 or images.shape[1] != 3:
        raise ContractError(f"expected [B, 3, H, W] images, got {tuple(images.shape)}")
    B, _, H, W = images.shape
    rects = []
    for _ in range(B):
        g1 = sample_crop_rect(rng, (H, W), cfg.global_scale, cfg.aspect_ratio)
        g2 = sample_crop_rect(rng, (H, W), cfg.global_scale, cfg.aspect_ratio)
        l1 = sample_crop_rect(rng, (H, W), cfg.local_scale, cfg.aspect_ratio)
        l2 = sample_crop_rect(rng, (H, W), cfg.local_scale, cfg.aspect_ratio)
        rects.append((g1, g2, l1, l2))
    views = []
    for i, size in enumerate((cfg.output_size_global,) * 2 + (cfg.output_size_local,) * 2):
        v = crop_and_resize(images, [r[i] for r in rects], size)
        views.append(apply_photometric(v, cfg, rng))
    if source_ids is None:
        source_ids = np.arange(B)
    return ViewBatch(
        global_views=(views[0], views[1]),
        local_views=(views[2], views[3]),
        rects=rects,
        source_ids=np.asarray(source_ids, dtype=np.int64),
    )


def make_views(image, cfg: AugmentationConfig, rng: np.random.Generator) -> ViewSet:
    """Two global and two local views of one image (``[H, W, C]`` array, ImageSample or ``[C, H, W]`` tensor)."""
    pixels = getattr(image, "pixels", image)
    sid = getattr(image, "source_id", 0)
    batch = pixels.unsqueeze(0) if torch.is_tensor(pixels) else [pixels]
    batch = make_view_batch(batch, cfg, rng, source_ids=[sid])
    return batch.view_set(0)
