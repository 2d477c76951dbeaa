"""
Learned affinity against cosine similarity
==========================================

After a short training run, score local crops from four images against one
reference crop, once with cosine similarity and once with the learned
regressor, and plot the two min-max normalised rankings side by side.
"""

import sys

import matplotlib

matplotlib.use("Agg")
import numpy as np
import torch

from logo_ssl.augment import crop_and_resize, sample_crop_rect
from logo_ssl.data import SHAPES, generate_synthetic
from logo_ssl.evaluate import affinity_compare
from logo_ssl.experiments import desk_config
from logo_ssl.trainer import fit, init_state

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 5

dataset = generate_synthetic(num_images=2000, seed=0)
cfg = desk_config("contrastive", seed=1, epochs=epochs, knn_every=0)
state = init_state(cfg)
fit(state, dataset, cfg)

##############################################################################
# Crops
# -----
#
# Ten local-scale crops from each of four images, with no photometric
# changes. The reference is one more crop of the first image.

aug = cfg.augment
rng = np.random.default_rng(0)
picks = [0, 1, 2, 3]
crops, ids = [], []
for i in picks:
    img = dataset.tensor([i])
    H, W = img.shape[-2:]
    rects = [sample_crop_rect(rng, (H, W), aug.local_scale, aug.aspect_ratio) for _ in range(10)]
    crops.append(torch.cat([crop_and_resize(img, [r], aug.output_size_local) for r in rects]))
    ids += [f"{SHAPES[dataset[i].label]}{i}#{j}" for j in range(10)]
ref_rect = sample_crop_rect(rng, dataset.tensor([0]).shape[-2:], aug.local_scale, aug.aspect_ratio)
reference = crop_and_resize(dataset.tensor([0]), [ref_rect], aug.output_size_local)[0]

report = affinity_compare(state.encoder, state.regressor, reference, torch.cat(crops), ids,
                          reference_id="image0#ref")

##############################################################################
# The report
# ----------
#
# One row per candidate: raw cosine, raw regressor output, and both after
# min-max normalisation over the candidates.

print(report.to_text())
same = np.repeat(np.array(picks) == 0, 10)
for name, score in (("cosine", report.cosine_norm), ("regressor", report.regressor_norm)):
    print(f"{name:9s} mean normalised score: same image {score[same].mean():.3f}, "
          f"other images {score[~same].mean():.3f}")
report.plot("affinity_vs_cosine.png")
