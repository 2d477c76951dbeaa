"""Similarity losses and the global-global / local-global compositions.

All losses return scalar tensors (batch means). Target embeddings that act as
supervision must already be cut from the graph: momentum-encoder outputs in
the contrastive variant, ``.detach()``-ed online outputs otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .encoder import predict
from .errors import ContractError

KINDS = ("info_nce", "cosine")


@dataclass
class LossConfig:
    temperature: float = 0.1
    similarity_kind: str = "info_nce"
    symmetrize: bool = True

    def __post_init__(self):
        if not self.temperature > 0:
            raise ContractError(f"temperature must be positive, got {self.temperature}")
        if self.similarity_kind not in KINDS:
            raise ContractError(f"similarity_kind must be one of {KINDS}")


def _check_unit(x, name, tol=1e-3):
    if x.numel() and (x.detach().norm(dim=-1) - 1).abs().max() > tol:
        raise ContractError(f"{name} rows must be L2-normalised")


def info_nce(z, z_pos, negatives, temperature):
    """Mean over rows of -log(e^{z.z+/t} / (e^{z.z+/t} + sum_k e^{z.z-_k/t})).

    ``z`` and ``z_pos`` are ``[B, n]`` row-aligned, ``negatives`` is ``[K, n]``.
    """
    if not temperature > 0:
        raise ContractError("temperature must be positive")
    if negatives.dim() != 2 or negatives.shape[0] < 1:
        raise ContractError("info_nce needs at least one negative")
    _check_unit(z, "z")
    _check_unit(z_pos, "z_pos")
    _check_unit(negatives, "negatives")
    pos = (z * z_pos).sum(dim=1, keepdim=True)
    neg = z @ negatives.t()
    logits = torch.cat([pos, neg], dim=1) / temperature
    target = torch.zeros(z.shape[0], dtype=torch.long)
    return F.cross_entropy(logits, target)


def cosine_loss(z1, z2, state=None):
    """-<h(z1)/|h(z1)|, z2/|z2|> averaged over rows.

    ``z2`` is the stop-gradient branch and must not require grad. With
    ``state=None`` (or a contrastive encoder) no predictor is applied.
    """
    if z2.requires_grad:
        raise ContractError("cosine_loss target branch must be detached (stop-gradient)")
    p = predict(state, z1) if state is not None and state.variant == "noncontrastive" else z1
    pn = p.norm(dim=1, keepdim=True)
    tn = z2.norm(dim=1, keepdim=True)
    if (pn == 0).any() or (tn == 0).any():
        raise ContractError("cosine_loss is undefined for zero-norm vectors")
    return -((p / pn) * (z2 / tn)).sum(dim=1).mean()


def _similarity(z, target, state, cfg, negatives):
    if cfg.similarity_kind == "info_nce":
        if negatives is None:
            raise ContractError("info_nce similarity needs a negatives tensor")
        return info_nce(F.normalize(z, dim=1), F.normalize(target, dim=1), negatives, cfg.temperature)
    return cosine_loss(z, target, state)


def global_global_loss(online, targets, state, cfg: LossConfig, negatives=None):
    """Global-to-global term.

    ``online = (z_g1, z_g2)`` carry gradients; ``targets = (t_g1, t_g2)`` are
    the stop-gradient counterparts (momentum embeddings, or detached online
    embeddings). Direction 1 pairs ``z_g1`` with ``t_g2``; the symmetrised
    loss averages it with the mirrored direction.
    """
    z1, z2 = online
    t1, t2 = targets
    if t1.requires_grad or t2.requires_grad:
        raise ContractError("global-global targets must be detached")
    forward = _similarity(z1, t2, state, cfg, negatives)
    if not cfg.symmetrize:
        return forward
    backward = _similarity(z2, t1, state, cfg, negatives)
    return 0.5 * (forward + backward)


def local_global_loss(locals_, targets, state, cfg: LossConfig, negatives=None):
    """Sum over both local views and both global anchors of l_s(z_l, sg(z_g))."""
    t1, t2 = targets
    if t1.requires_grad or t2.requires_grad:
        raise ContractError("local-global anchors must pass through stop-gradient")
    total = 0.0
    for zl in locals_:
        total = total + _similarity(zl, t1, state, cfg, negatives) + _similarity(zl, t2, state, cfg, negatives)
    return total
