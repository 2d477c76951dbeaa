"""Feature encoder f_theta_e and its variant-specific companions.

The contrastive variant (MoCo-style) carries a momentum copy of backbone and
projector plus a FIFO queue of negatives. The non-contrastive variant
(SimSiam-style) carries a predictor MLP ``h`` applied on the branch that
receives gradients.
"""

from __future__ import annotations

import copy

import torch
from torch import nn
import torch.nn.functional as F

from .errors import ContractError, NonFiniteError

VARIANTS = ("contrastive", "noncontrastive")


def conv_block(c_in, c_out):
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, stride=2, padding=1, bias=False),
        nn.BatchNorm2d(c_out),
        nn.ReLU(inplace=True),
    )


class TinyConv(nn.Module):
    """Four stride-2 conv blocks and global average pooling.

    Resolution agnostic: any input of at least 16x16 maps to ``[B, widths[-1]]``.
    """

    def __init__(self, widths=(32, 64, 128, 256), in_channels=3):
        super().__init__()
        chans = (in_channels,) + tuple(widths)
        self.blocks = nn.Sequential(*[conv_block(a, b) for a, b in zip(chans[:-1], chans[1:])])
        self.out_dim = chans[-1]

    def forward(self, x):
        return self.blocks(x).mean(dim=(-2, -1))


class Projector(nn.Module):
    """Two-layer MLP head d -> d -> n."""

    def __init__(self, in_dim, out_dim):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_dim, in_dim, bias=False),
            nn.BatchNorm1d(in_dim),
            nn.ReLU(inplace=True),
            nn.Linear(in_dim, out_dim),
        )

    def forward(self, x):
        return self.net(x)


class Predictor(nn.Module):
    """Bottleneck MLP h: n -> n/4 -> n."""

    def __init__(self, dim, hidden=None):
        super().__init__()
        hidden = hidden or max(dim // 4, 1)
        self.net = nn.Sequential(
            nn.Linear(dim, hidden, bias=False),
            nn.BatchNorm1d(hidden),
            nn.ReLU(inplace=True),
            nn.Linear(hidden, dim),
        )

    def forward(self, z):
        return self.net(z)


class Encoder(nn.Module):
    """Backbone + projection head, plus momentum copy or predictor.

    ``momentum_backbone``/``momentum_projector`` exist iff the variant is
    contrastive; ``predictor`` exists iff it is non-contrastive. Momentum
    parameters never require grad.
    """

    def __init__(self, variant="contrastive", backbone=None, embed_dim=128, predictor_hidden=None):
        super().__init__()
        if variant not in VARIANTS:
            raise ContractError(f"variant must be one of {VARIANTS}, got {variant!r}")
        self.variant = variant
        self.backbone = backbone if backbone is not None else TinyConv()
        self.feature_dim = self.backbone.out_dim
        self.embed_dim = embed_dim
        self.projector = Projector(self.feature_dim, embed_dim)
        if variant == "contrastive":
            self.momentum_backbone = copy.deepcopy(self.backbone)
            self.momentum_projector = copy.deepcopy(self.projector)
            for p in self.momentum_parameters():
                p.requires_grad_(False)
            self.predictor = None
        else:
            self.momentum_backbone = None
            self.momentum_projector = None
            self.predictor = Predictor(embed_dim, predictor_hidden)

    def online_modules(self):
        mods = [self.backbone, self.projector]
        if self.predictor is not None:
            mods.append(self.predictor)
        return mods

    def online_parameters(self):
        """Parameters theta_e updated by the encoder optimiser."""
        for m in self.online_modules():
            yield from m.parameters()

    def momentum_parameters(self):
        if self.momentum_backbone is None:
            return iter(())
        return iter(list(self.momentum_backbone.parameters()) + list(self.momentum_projector.parameters()))

    def features(self, x):
        """Backbone output before the projection head (used for evaluation)."""
        return self.backbone(x)

    def forward(self, x, use_momentum=False):
        return encode(self, x, use_momentum)


def encode(state: Encoder, batch: torch.Tensor, use_momentum: bool = False) -> torch.Tensor:
    """Embed a ``[B, C, H, W]`` batch to ``[B, n]``.

    With ``use_momentum`` the momentum encoder is used under ``no_grad`` and
    the result does not require grad.
    """
    if batch.shape[0] == 0:
        return batch.new_zeros((0, state.embed_dim))
    if use_momentum:
        if state.variant != "contrastive":
            raise ContractError("momentum encoder only exists for the contrastive variant")
        with torch.no_grad():
            z = state.momentum_projector(state.momentum_backbone(batch))
    else:
        z = state.projector(state.backbone(batch))
    if not torch.isfinite(z).all():
        raise NonFiniteError(f"non-finite embedding (use_momentum={use_momentum}, shape={tuple(z.shape)})")
    return z


def predict(state: Encoder, z: torch.Tensor) -> torch.Tensor:
    """Apply the predictor head ``h``; shape preserving."""
    if state.variant != "noncontrastive":
        raise ContractError("the predictor head only exists for the non-contrastive variant")
    if z.shape[0] == 0:
        return z.clone()
    return state.predictor(z)


@torch.no_grad()
def momentum_update(state: Encoder, m: float) -> Encoder:
    """theta_k <- m * theta_k + (1 - m) * theta_q, elementwise, online params untouched."""
    if state.variant != "contrastive":
        raise ContractError("momentum_update called on a non-contrastive encoder")
    if not 0.0 <= m <= 1.0:
        raise ContractError(f"momentum coefficient must lie in [0, 1], got {m}")
    online = list(state.backbone.parameters()) + list(state.projector.parameters())
    for pk, pq in zip(state.momentum_parameters(), online):
        if m == 1.0:
            continue
        if m == 0.0:
            pk.copy_(pq)
        else:
            pk.mul_(m).add_(pq, alpha=1.0 - m)
    return state


@torch.no_grad()
def sync_momentum(state: Encoder):
    """Copy online parameters and buffers into the momentum encoder."""
    state.momentum_backbone.load_state_dict(state.backbone.state_dict())
    state.momentum_projector.load_state_dict(state.projector.state_dict())


class NegativeQueue:
    """Fixed-size FIFO of unit-norm embeddings used as InfoNCE negatives."""

    def __init__(self, size, dim, generator=None):
        if size < 1:
            raise ContractError("queue size must be >= 1")
        buf = torch.randn(size, dim, generator=generator)
        self.buffer = F.normalize(buf, dim=1)
        self.head = 0

    @property
    def size(self):
        return self.buffer.shape[0]

    def __len__(self):
        return self.size

    @torch.no_grad()
    def enqueue(self, z: torch.Tensor) -> "NegativeQueue":
        """Overwrite the oldest ``B`` rows with ``z`` (rows must be unit norm)."""
        z = z.detach()
        B = z.shape[0]
        if B > self.size:
            raise ContractError(f"cannot enqueue {B} rows into a queue of size {self.size}")
        if B == 0:
            return self
        norms = z.norm(dim=1)
        if (norms - 1).abs().max() > 1e-3:
            raise ContractError("queue rows must be L2-normalised before insertion")
        idx = (self.head + torch.arange(B)) % self.size
        self.buffer[idx] = z.to(self.buffer.dtype)
        self.head = int((self.head + B) % self.size)
        return self

    def ordered(self) -> torch.Tensor:
        """Rows from oldest to newest."""
        return torch.roll(self.buffer, -self.head, dims=0)


def enqueue(queue: NegativeQueue, z: torch.Tensor) -> NegativeQueue:
    return queue.enqueue(z)
