"""
Desk-scale training and the local term
======================================

Train the contrastive variant three ways on the synthetic set and compare
the monitored KNN curves:

* without the local-to-local term (``lam = 0``),
* with the learned affinity regressor,
* with plain cosine similarity in place of the regressor.

The full setting (20 epochs, three seeds) takes a while on one CPU core;
pass a smaller epoch count on the command line for a quick look::

    python plot_desk_training.py 5
"""

import sys

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from logo_ssl.data import generate_synthetic
from logo_ssl.experiments import desk_config, run

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 20
dataset = generate_synthetic(num_images=2000, seed=0)

##############################################################################
# The runs
# --------
#
# ``desk_config`` fixes the small TinyConv backbone, 32/16 pixel views,
# batch 64 and a 1,024-entry queue. Every run starts from the same seed,
# so the three curves differ only through the local term.

settings = {
    "lam=0": dict(lam=0.0),
    "regressor": dict(affinity="regressor"),
    "cosine": dict(affinity="cosine"),
}
results = {}
for name, kw in settings.items():
    cfg = desk_config("contrastive", seed=1, epochs=epochs, **kw)
    r = run(cfg, dataset)
    results[name] = r
    print(f"{name:10s} final knn {r.final_knn:.3f}  embedding std {r.embedding_std:.4f}  ({r.seconds:.0f}s)")

##############################################################################
# KNN curves
# ----------
#
# Chance is 0.1 with ten balanced classes. A collapsing run shows up as a
# curve that falls back toward chance together with a vanishing
# per-dimension standard deviation.

fig, ax = plt.subplots(figsize=(6, 4))
for name, r in results.items():
    ax.plot(range(1, len(r.knn_curve) + 1), r.knn_curve, marker="o", ms=3, label=name)
ax.axhline(0.1, color="grey", lw=0.8, ls="--")
ax.set_xlabel("epoch")
ax.set_ylabel("KNN top-1")
ax.legend()
fig.tight_layout()
fig.savefig("desk_knn_curves.png")
