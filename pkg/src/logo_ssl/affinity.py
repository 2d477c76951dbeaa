"""Learned local-to-local affinity.

A regressor f(a, b) >= 0 scores pairs of local-crop embeddings. It is trained
to *ascend*

    omega = mean f(joint pairs) - mean f(product pairs)

where joint pairs are the two local crops of one image and product pairs
match a local crop with a local crop of another image in the batch. The
encoder then *descends* the mean affinity of joint pairs, with the regressor
frozen, pushing same-image local crops apart under the learned measure.
"""

from __future__ import annotations

import contextlib
from typing import NamedTuple

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .errors import ContractError


class AffinityRegressor(nn.Module):
    """Five (Linear, BatchNorm, ReLU) blocks on ``[a; b]``, a linear head and softplus."""

    def __init__(self, embed_dim, hidden=512, depth=5, bn_affine=False):
        super().__init__()
        self.embed_dim = embed_dim
        dims = [2 * embed_dim] + [hidden] * depth
        blocks = []
        for a, b in zip(dims[:-1], dims[1:]):
            blocks += [nn.Linear(a, b, bias=False), nn.BatchNorm1d(b, affine=bn_affine), nn.ReLU(inplace=True)]
        self.blocks = nn.Sequential(*blocks)
        self.head = nn.Linear(hidden, 1)

    def zero_head_(self):
        """Zero the final layer so the regressor is the constant ln 2."""
        with torch.no_grad():
            self.head.weight.zero_()
            self.head.bias.zero_()
        return self

    def score(self, z1, z2):
        h = self.blocks(torch.cat([z1, z2], dim=1))
        return F.softplus(self.head(h)).squeeze(1)

    def forward(self, z1, z2):
        return affinity_forward(self, z1, z2)


def affinity_forward(state: AffinityRegressor, z1, z2):
    """Non-negative affinity for each row pair, shape ``[B]``.

    ``state`` is any module with an ``embed_dim`` attribute and a
    ``score(z1, z2)`` method; :class:`AffinityRegressor` is the default.
    """
    if z1.shape != z2.shape or z1.dim() != 2 or z1.shape[1] != state.embed_dim:
        raise ContractError(
            f"expected two [B, {state.embed_dim}] tensors, got {tuple(z1.shape)} and {tuple(z2.shape)}"
        )
    if z1.shape[0] == 0:
        return z1.new_zeros(0)
    return state.score(z1, z2)


class PairBatch(NamedTuple):
    left: torch.Tensor
    right: torch.Tensor
    kind: str  # "joint" | "product"


def sample_negative_partner(batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """Random index map ``k`` with ``k[j] != j`` for every ``j``.

    Uniform shuffles are redrawn until one has no fixed point, which samples
    derangements uniformly.
    """
    if batch_size < 2:
        raise ContractError("a negative partner needs batch_size >= 2")
    while True:
        perm = rng.permutation(batch_size)
        if not (perm == np.arange(batch_size)).any():
            return perm


def make_pairs(z_l1, z_l2, partner):
    """Joint ``(z_l1[j], z_l2[j])`` and product ``(z_l1[j], z_l1[k(j)])`` pairs."""
    idx = torch.as_tensor(partner, dtype=torch.long)
    return PairBatch(z_l1, z_l2, "joint"), PairBatch(z_l1, z_l1[idx], "product")


def omega_objective(state: AffinityRegressor, joint: PairBatch, product: PairBatch):
    """mean f(joint) - mean f(product).

    Both pair sets go through the regressor as one batch so batch-norm
    statistics are shared. Inputs must be detached from the encoder.
    """
    if joint.kind != "joint" or product.kind != "product":
        raise ContractError("omega_objective expects (joint, product) pair batches")
    for t in (joint.left, joint.right, product.left, product.right):
        if t.requires_grad:
            raise ContractError("omega_objective inputs must be detached from the encoder")
    n = joint.left.shape[0]
    scores = affinity_forward(
        state,
        torch.cat([joint.left, product.left]),
        torch.cat([joint.right, product.right]),
    )
    return scores[:n].mean() - scores[n:].mean()


@contextlib.contextmanager
def frozen(module: nn.Module):
    """Eval mode and ``requires_grad=False`` for the duration of the block."""
    flags = [p.requires_grad for p in module.parameters()]
    was_training = module.training
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    try:
        yield module
    finally:
        for p, f in zip(module.parameters(), flags):
            p.requires_grad_(f)
        module.train(was_training)


def local_local_loss(state: AffinityRegressor, z_l1, z_l2):
    """Mean learned affinity between the two local views of each image.

    The regressor is evaluated frozen (running batch-norm statistics, no
    parameter gradients); gradients reach the encoder through ``z_l1`` and
    ``z_l2`` only.
    """
    with frozen(state):
        return affinity_forward(state, z_l1, z_l2).mean()


def cosine_affinity_loss(z_l1, z_l2):
    """Mean cosine similarity between local views; the naive affinity the regressor replaces."""
    return F.cosine_similarity(z_l1, z_l2, dim=1).mean()
