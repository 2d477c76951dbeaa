"""
The loss terms on one batch
===========================

Walk through the three encoder terms and the regressor objective on a
single batch of synthetic views, for both variants.
"""

import math

import numpy as np
import torch
import torch.nn.functional as F

from logo_ssl.affinity import AffinityRegressor, local_local_loss, make_pairs, omega_objective, sample_negative_partner
from logo_ssl.augment import AugmentationConfig, make_view_batch
from logo_ssl.data import generate_synthetic
from logo_ssl.encoder import Encoder, NegativeQueue, TinyConv, encode
from logo_ssl.losses import LossConfig, global_global_loss, info_nce, local_global_loss

torch.manual_seed(0)

##############################################################################
# Sanity values first
# -------------------
#
# With every logit equal, InfoNCE is the log of the number of candidates.

z = torch.tensor([[1.0, 0.0]])
negs = torch.tensor([[0.0, 1.0]]).repeat(7, 1)
print("uniform logits, K=7:", float(info_nce(z, negs[:1], negs, 1.0)), "vs ln 8 =", math.log(8))

##############################################################################
# A batch of views
# ----------------

ds = generate_synthetic(num_images=64, seed=0)
aug = AugmentationConfig(output_size_global=32, output_size_local=16)
vb = make_view_batch(ds.tensor(list(range(16))), aug, np.random.default_rng(0))
g1, g2 = vb.global_views
l1, l2 = vb.local_views

##############################################################################
# Contrastive variant
# -------------------
#
# Targets for every term come from the momentum encoder applied to the
# global views. The queue holds past targets and supplies the negatives.

enc = Encoder("contrastive", TinyConv((8, 16, 32, 32)), embed_dim=32)
queue = NegativeQueue(256, 32)  # starts as random unit vectors

zg1, zg2 = encode(enc, g1), encode(enc, g2)
zl1, zl2 = encode(enc, l1), encode(enc, l2)
with torch.no_grad():
    k1 = F.normalize(encode(enc, g1, use_momentum=True), dim=1)
    k2 = F.normalize(encode(enc, g2, use_momentum=True), dim=1)

cfg = LossConfig(temperature=0.1)
L_gg = global_global_loss((zg1, zg2), (k1, k2), enc, cfg, queue.buffer)
L_lg = local_global_loss((zl1, zl2), (k1, k2), enc, cfg, queue.buffer)
print(f"L_gg {float(L_gg.detach()):.3f}   (ln(K+1) = {math.log(257):.3f} at chance)")
print(f"L_lg {float(L_lg.detach()):.3f}   (a sum of four InfoNCE terms)")

##############################################################################
# The regressor
# -------------
#
# Joint pairs are the two local embeddings of one image; product pairs put
# the first local crop next to the second local crop of another image.
# The regressor ascends the gap between the two means; the encoder then
# descends the mean affinity of the joint pairs with the regressor frozen.
# On one fixed batch the pairs are separable and the output scale grows
# without bound, which is why the trainer's default weighting ties the
# size of the local term's gradient to that of the similarity terms.

reg = AffinityRegressor(32, hidden=64)
rng = np.random.default_rng(0)
n1, n2 = F.normalize(zl1, dim=1), F.normalize(zl2, dim=1)
joint, product = make_pairs(n1.detach(), n2.detach(), sample_negative_partner(16, rng))
opt = torch.optim.SGD(reg.parameters(), lr=0.05, momentum=0.9)
for step in range(30):
    opt.zero_grad()
    omega = omega_objective(reg, joint, product)
    (-omega).backward()
    opt.step()
    if step % 10 == 0:
        print(f"omega step {step:2d}: {float(omega.detach()):.4f}")

opt.zero_grad(set_to_none=True)
L_ll = local_local_loss(reg, n1, n2)
print(f"L_ll {float(L_ll.detach()):.4f}")
L_ll.backward()
print("regressor untouched by L_ll:", all(p.grad is None for p in reg.parameters()))
print("encoder received a gradient:", any(p.grad is not None for p in enc.online_parameters()))

##############################################################################
# Non-contrastive variant
# -----------------------
#
# No queue: the predictor sits on the gradient branch and the target branch
# is detached. Identical inputs bound the cosine loss at -1.

enc2 = Encoder("noncontrastive", TinyConv((8, 16, 32, 32)), embed_dim=32)
zg1, zg2 = encode(enc2, g1), encode(enc2, g2)
zl1, zl2 = encode(enc2, l1), encode(enc2, l2)
cfg2 = LossConfig(similarity_kind="cosine")
targets = (zg1.detach(), zg2.detach())
with torch.no_grad():
    print(f"L_gg {float(global_global_loss((zg1, zg2), targets, enc2, cfg2)):.3f}   (>= -1)")
    print(f"L_lg {float(local_global_loss((zl1, zl2), targets, enc2, cfg2)):.3f}   (>= -4)")
