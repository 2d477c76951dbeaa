"""
Synthetic composites
====================

A small multi-object image set on which local crops of one image can show
different things.
"""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from logo_ssl.augment import AugmentationConfig, make_views
from logo_ssl.data import SHAPES, generate_synthetic

##############################################################################
# Generating a dataset
# --------------------
#
# Each image holds ``objects_per_image`` shapes of distinct classes on a
# faint textured background. The label is the class of the first and
# largest object. Every object's bounding box is kept with the sample.

ds = generate_synthetic(num_images=200, seed=0)
print(len(ds), "images,", len(ds.class_names), "classes")
print("splits:", {k: len(v) for k, v in ds.splits.items()})
print("first sample label:", SHAPES[ds[0].label])
print("boxes (top, left, height, width, class):")
for box in ds[0].boxes:
    print("   ", box)

fig, axes = plt.subplots(2, 5, figsize=(10, 4))
for ax, s in zip(axes.flat, ds.samples):
    ax.imshow(s.pixels)
    for t, left, h, w, c in s.boxes:
        ax.add_patch(plt.Rectangle((left - 0.5, t - 0.5), w, h, fill=False, ec="k", lw=0.8))
    ax.set_title(SHAPES[s.label], fontsize=8)
    ax.axis("off")
fig.tight_layout()
fig.savefig("synthetic_grid.png")

##############################################################################
# Crops inside different boxes differ
# -----------------------------------
#
# Take two small patches from the primary object and one from a secondary
# object. Raw-pixel correlation is higher within an object than across
# objects, averaged over the dataset.


def patch(img, box, size, rng):
    t, left, h, w = box[:4]
    inner = max(size, int(h * 0.6))
    t0 = t + (h - inner) // 2 + int(rng.integers(0, inner - size + 1))
    l0 = left + (w - inner) // 2 + int(rng.integers(0, inner - size + 1))
    return img[t0:t0 + size, l0:l0 + size].ravel()


rng = np.random.default_rng(0)
same, cross = [], []
for s in ds:
    a, b = patch(s.pixels, s.boxes[0], 6, rng), patch(s.pixels, s.boxes[0], 6, rng)
    c = patch(s.pixels, s.boxes[1], 6, rng)
    same.append(np.corrcoef(a, b)[0, 1])
    cross.append(np.corrcoef(a, c)[0, 1])
print(f"mean corr same object {np.nanmean(same):.3f}, different objects {np.nanmean(cross):.3f}")

##############################################################################
# Multi-crop views
# ----------------
#
# Two global crops (large area) and two local crops (small area) per image,
# each with its own photometric jitter. The generator is explicit, so the
# same seed gives the same views.

aug = AugmentationConfig(output_size_global=32, output_size_local=16)
views = make_views(ds[3], aug, np.random.default_rng(7))
g1, g2 = views.global_views
l1, l2 = views.local_views
print("global:", tuple(g1.shape), "local:", tuple(l1.shape))
for r in views.rects:
    print("   ", r)

fig, axes = plt.subplots(1, 5, figsize=(10, 2.2))
axes[0].imshow(ds[3].pixels)
axes[0].set_title("image", fontsize=8)
for ax, (name, v) in zip(axes[1:], [("g1", g1), ("g2", g2), ("l1", l1), ("l2", l2)]):
    ax.imshow(v.permute(1, 2, 0).clamp(0, 1).numpy())
    ax.set_title(name, fontsize=8)
for ax in axes:
    ax.axis("off")
fig.tight_layout()
fig.savefig("synthetic_views.png")
