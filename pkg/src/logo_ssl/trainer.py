"""Bi-level training loop.

Each minibatch runs two phases in a fixed order:

1. the affinity regressor takes one ascent step on ``omega`` using the local
   embeddings detached from the encoder;
2. with the regressor frozen, the encoder descends
   ``L_gg + L_lg + lambda * L_ll``.

The contrastive variant then moves the momentum encoder and pushes the
momentum-global embeddings into the negative queue.

All randomness during training is derived from ``(seed, stream, counter)``
seed sequences, so the generator state at any step is a function of the
step counter alone and a checkpoint resumes bit-identically.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .affinity import (
    AffinityRegressor, cosine_affinity_loss, local_local_loss, make_pairs, omega_objective,
    sample_negative_partner,
)
from .augment import AugmentationConfig, ViewBatch, make_view_batch
from .encoder import Encoder, NegativeQueue, TinyConv, encode, momentum_update
from .errors import ContractError, NonFiniteError
from .losses import LossConfig, global_global_loss, local_global_loss

log = logging.getLogger(__name__)

LAMBDA_MODES = ("fixed_weight", "gradient_ratio")
AFFINITIES = ("regressor", "cosine")

# paper-reported lambda per framework; desk-scale learning rates follow MoCo / SimSiam defaults
DEFAULT_LAMBDA = {"contrastive": 0.0005, "noncontrastive": 0.0001}
DEFAULT_LR = {"contrastive": 0.03, "noncontrastive": 0.05}

STREAM_AUGMENT = 0
STREAM_PARTNER = 1
STREAM_EPOCH = 2


def stream_rng(seed: int, stream: int, counter: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(stream), int(counter)])


@dataclass
class TrainConfig:
    variant: str = "contrastive"
    lam: float | None = None
    lam_mode: str = "fixed_weight"
    affinity: str = "regressor"
    batch_size: int = 64
    epochs: int = 20
    lr_max: float | None = None
    lr_min: float = 0.0
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    temperature: float = 0.1
    momentum: float = 0.99
    queue_size: int = 4096
    embed_dim: int = 128
    backbone_widths: tuple = (32, 64, 128, 256)
    regressor_hidden: int = 512
    regressor_depth: int = 5
    symmetrize: bool = True
    schedule: str = "step"
    seed: int = 0
    regressor_seed: int | None = None
    knn_every: int = 1
    knn_k: int = 20
    knn_temperature: float = 0.07
    checkpoint_every: int = 1
    augment: AugmentationConfig = field(default_factory=AugmentationConfig)

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentationConfig(**self.augment)
        self.backbone_widths = tuple(int(w) for w in self.backbone_widths)
        if self.lam is None:
            self.lam = DEFAULT_LAMBDA.get(self.variant, 0.0)
        if self.lr_max is None:
            self.lr_max = DEFAULT_LR.get(self.variant, 0.03)
        if self.regressor_seed is None:
            self.regressor_seed = self.seed + 1
        self.validate()

    def validate(self):
        if self.variant not in DEFAULT_LAMBDA:
            raise ContractError(f"variant must be one of {tuple(DEFAULT_LAMBDA)}, got {self.variant!r}")
        if self.lam_mode not in LAMBDA_MODES:
            raise ContractError(f"lam_mode must be one of {LAMBDA_MODES}")
        if self.affinity not in AFFINITIES:
            raise ContractError(f"affinity must be one of {AFFINITIES}")
        if self.lam < 0:
            raise ContractError("lambda must be non-negative")
        if self.batch_size < 2:
            raise ContractError("batch_size must be >= 2 so every local crop has a negative partner")
        if self.epochs < 0:
            raise ContractError("epochs must be non-negative")
        if not (self.lr_max >= self.lr_min >= 0):
            raise ContractError("need lr_max >= lr_min >= 0")
        if not self.temperature > 0:
            raise ContractError("temperature must be positive")
        if not 0 <= self.momentum <= 1:
            raise ContractError("momentum coefficient must lie in [0, 1]")
        if self.schedule not in ("step", "epoch"):
            raise ContractError("schedule must be 'step' or 'epoch'")
        if self.variant == "contrastive" and self.queue_size < 2 * self.batch_size:
            raise ContractError("queue_size must hold at least one step of keys (2 * batch_size)")

    @property
    def loss_config(self) -> LossConfig:
        kind = "info_nce" if self.variant == "contrastive" else "cosine"
        return LossConfig(self.temperature, kind, self.symmetrize)

    def to_dict(self) -> dict:
        d = asdict(self)
        return json.loads(json.dumps(d))

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        aug = d.pop("augment", {})
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(augment=AugmentationConfig(**aug), **d)


@dataclass
class TrainState:
    cfg: TrainConfig
    encoder: Encoder
    regressor: AffinityRegressor
    enc_opt: torch.optim.Optimizer
    reg_opt: torch.optim.Optimizer
    queue: NegativeQueue | None
    step: int = 0
    total_steps: int = 0
    steps_per_epoch: int = 0
    best_knn: float = -1.0
    last_checkpoint: str | None = None

    @property
    def epoch(self) -> int:
        return self.step // self.steps_per_epoch if self.steps_per_epoch else 0


def lr_at(t: int, T: int, lr_min: float, lr_max: float) -> float:
    """Cosine decay from ``lr_max`` at ``t = 0`` to ``lr_min`` at ``t = T``."""
    if t < 0 or t > T:
        raise ContractError(f"step {t} outside schedule [0, {T}]")
    if T == 0:
        return lr_max
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(t * math.pi / T))


def init_state(cfg: TrainConfig, total_steps: int = 0, steps_per_epoch: int = 0) -> TrainState:
    """Fresh encoder/regressor/optimisers seeded from ``cfg.seed`` and ``cfg.regressor_seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        encoder = Encoder(cfg.variant, TinyConv(cfg.backbone_widths), embed_dim=cfg.embed_dim)
        queue = None
        if cfg.variant == "contrastive":
            g = torch.Generator().manual_seed(cfg.seed)
            queue = NegativeQueue(cfg.queue_size, cfg.embed_dim, generator=g)
        torch.manual_seed(cfg.regressor_seed)
        regressor = AffinityRegressor(cfg.embed_dim, cfg.regressor_hidden, cfg.regressor_depth)
    enc_opt = torch.optim.SGD(
        list(encoder.online_parameters()), lr=cfg.lr_max,
        momentum=cfg.sgd_momentum, weight_decay=cfg.weight_decay,
    )
    reg_opt = torch.optim.SGD(
        regressor.parameters(), lr=cfg.lr_max,
        momentum=cfg.sgd_momentum, weight_decay=cfg.weight_decay,
    )
    return TrainState(cfg, encoder, regressor, enc_opt, reg_opt, queue,
                      total_steps=total_steps, steps_per_epoch=steps_per_epoch)


def _grads(loss, params, retain=False):
    grads = torch.autograd.grad(loss, params, retain_graph=retain, allow_unused=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


def _norm(grads) -> float:
    return math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads))


def total_encoder_loss(L_gg, L_lg, L_ll, lam, lam_mode="fixed_weight", params=None):
    """Combine the three encoder terms.

    Returns ``(total, lam_eff)``. In ``fixed_weight`` mode ``lam_eff = lam``.
    In ``gradient_ratio`` mode ``lam_eff`` is chosen so the gradient of
    ``lam_eff * L_ll`` with respect to ``params`` has ``lam`` times the norm of
    the gradient of ``L_gg + L_lg``; it enters ``total`` as a constant.
    With ``lam == 0`` the dissimilarity term is left out of the graph.
    """
    if lam_mode not in LAMBDA_MODES:
        raise ContractError(f"lam_mode must be one of {LAMBDA_MODES}")
    similarity = L_gg + L_lg
    if lam == 0:
        return similarity, 0.0
    if lam_mode == "fixed_weight":
        return similarity + lam * L_ll, float(lam)
    if params is None:
        raise ContractError("gradient_ratio mode needs the encoder parameters")
    params = [p for p in params if p.requires_grad]
    g_sim = _norm(_grads(similarity, params, retain=True))
    g_ll = _norm(_grads(L_ll, params, retain=True))
    lam_eff = 0.0 if g_ll == 0 else lam * g_sim / g_ll
    return similarity + lam_eff * L_ll, lam_eff


def encoder_gradients(L_gg, L_lg, L_ll, lam, lam_mode, params):
    """Gradients of the combined encoder loss, written into ``p.grad``.

    Same weighting as :func:`total_encoder_loss`; in ``gradient_ratio`` mode
    the two gradient sets are taken once and mixed directly instead of
    back-propagating a third time. Returns ``(total, lam_eff)``.
    """
    params = [p for p in params if p.requires_grad]
    if lam == 0 or lam_mode == "fixed_weight":
        total, lam_eff = total_encoder_loss(L_gg, L_lg, L_ll, lam, lam_mode)
        grads = _grads(total, params)
    else:
        if lam_mode not in LAMBDA_MODES:
            raise ContractError(f"lam_mode must be one of {LAMBDA_MODES}")
        similarity = L_gg + L_lg
        gs = _grads(similarity, params, retain=True)
        gl = _grads(L_ll, params)
        n_ll = _norm(gl)
        lam_eff = 0.0 if n_ll == 0 else lam * _norm(gs) / n_ll
        grads = [a + lam_eff * b for a, b in zip(gs, gl)]
        total = similarity.detach() + lam_eff * L_ll.detach()
    for p, g in zip(params, grads):
        p.grad = g
    return total.detach(), lam_eff


def _set_lr(opt, lr):
    for group in opt.param_groups:
        group["lr"] = lr


def current_lr(state: TrainState) -> float:
    cfg = state.cfg
    if state.total_steps == 0:
        return cfg.lr_max
    if cfg.schedule == "epoch" and state.steps_per_epoch:
        T = max(state.total_steps // state.steps_per_epoch, 1)
        return lr_at(min(state.epoch, T), T, cfg.lr_min, cfg.lr_max)
    return lr_at(min(state.step, state.total_steps), state.total_steps, cfg.lr_min, cfg.lr_max)


def train_step(state: TrainState, views: ViewBatch, cfg: TrainConfig | None = None):
    """One bi-level update on a batch of view sets. Returns ``(state, metrics)``.

    A NaN/inf anywhere in the step raises :class:`NonFiniteError` carrying
    the path of the last checkpoint written, from which a run can restart.
    """
    try:
        return _train_step(state, views, cfg or state.cfg)
    except NonFiniteError as exc:
        if exc.last_checkpoint is None:
            exc.last_checkpoint = state.last_checkpoint
        raise


def _train_step(state: TrainState, views: ViewBatch, cfg: TrainConfig):
    B = len(views)
    if B < 2:
        raise ContractError("train_step needs at least two images per batch")
    enc, reg = state.encoder, state.regressor
    lr = current_lr(state)
    _set_lr(state.enc_opt, lr)
    _set_lr(state.reg_opt, lr)
    enc.train()

    g1, g2 = views.global_views
    l1, l2 = views.local_views
    zg1, zg2 = encode(enc, torch.cat([g1, g2])).split(B)
    zl1, zl2 = encode(enc, torch.cat([l1, l2])).split(B)
    keys = None
    negatives = None
    if cfg.variant == "contrastive":
        k1, k2 = F.normalize(encode(enc, torch.cat([g1, g2]), use_momentum=True), dim=1).split(B)
        keys = torch.cat([k1, k2])
        targets = (k1, k2)
        negatives = state.queue.buffer.clone()
    else:
        targets = (zg1.detach(), zg2.detach())

    nl1 = F.normalize(zl1, dim=1)
    nl2 = F.normalize(zl2, dim=1)

    omega = None
    if cfg.affinity == "regressor":
        partner = sample_negative_partner(B, stream_rng(cfg.seed, STREAM_PARTNER, state.step))
        joint, product = make_pairs(nl1.detach(), nl2.detach(), partner)
        reg.train()
        state.reg_opt.zero_grad(set_to_none=True)
        omega_t = omega_objective(reg, joint, product)
        (-omega_t).backward()
        state.reg_opt.step()
        omega = float(omega_t.detach())

    loss_cfg = cfg.loss_config
    L_gg = global_global_loss((zg1, zg2), targets, enc, loss_cfg, negatives)
    L_lg = local_global_loss((zl1, zl2), targets, enc, loss_cfg, negatives)
    if cfg.affinity == "regressor":
        L_ll = local_local_loss(reg, nl1, nl2)
    else:
        L_ll = cosine_affinity_loss(zl1, zl2)
    if not all(torch.isfinite(t) for t in (L_gg, L_lg, L_ll)):
        raise NonFiniteError(f"non-finite encoder loss at step {state.step}", state.last_checkpoint)
    state.enc_opt.zero_grad(set_to_none=True)
    total, lam_eff = encoder_gradients(L_gg, L_lg, L_ll, cfg.lam, cfg.lam_mode, list(enc.online_parameters()))
    state.enc_opt.step()

    if cfg.variant == "contrastive":
        momentum_update(enc, cfg.momentum)
        state.queue.enqueue(keys)

    metrics = {
        "step": state.step,
        "epoch": state.epoch,
        "lr": lr,
        "loss_gg": float(L_gg.detach()),
        "loss_lg": float(L_lg.detach()),
        "loss_ll": float(L_ll.detach()),
        "omega": omega,
        "total": float(total.detach()),
    }
    if cfg.lam_mode == "gradient_ratio":
        metrics["lambda_eff"] = lam_eff
    state.step += 1
    return state, metrics


class MetricsLog:
    """Append-only JSON-lines sink; ``path=None`` keeps records in memory only."""

    def __init__(self, path=None):
        self.path = Path(path) if path is not None else None
        self.records = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, record):
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record) + "\n")


def _train_images(dataset):
    from .data import Dataset

    if isinstance(dataset, Dataset):
        idx = dataset.splits.get("train", list(range(len(dataset))))
        return dataset.tensor(idx)
    if torch.is_tensor(dataset):
        return dataset
    raise ContractError("fit expects a Dataset or a [M, 3, H, W] tensor")


def fit(state: TrainState, dataset, cfg: TrainConfig | None = None, *, val=None,
        metrics=None, out_dir=None, max_steps=None) -> TrainState:
    """Run ``cfg.epochs`` epochs of shuffled minibatches (last partial batch dropped).

    ``val`` is an optional ``(train_dataset, val_dataset)`` pair (or anything
    :func:`logo_ssl.evaluate.knn_monitor` accepts) used for KNN monitoring
    every ``cfg.knn_every`` epochs. ``max_steps`` stops early at that global
    step, leaving the state resumable. Checkpoints go to ``out_dir``.
    """
    from .evaluate import knn_monitor

    cfg = cfg or state.cfg
    images = _train_images(dataset)
    M = images.shape[0]
    if M == 0:
        raise ContractError("empty dataset")
    spe = M // cfg.batch_size
    if spe == 0:
        raise ContractError(f"dataset of {M} images is smaller than one batch of {cfg.batch_size}")
    if state.steps_per_epoch == 0:
        state.steps_per_epoch = spe
        state.total_steps = cfg.epochs * spe
    if isinstance(metrics, (str, os.PathLike)) or metrics is None:
        metrics = MetricsLog(metrics)
    out_dir = Path(out_dir) if out_dir is not None else None
    stop = state.total_steps if max_steps is None else min(max_steps, state.total_steps)

    while state.step < stop:
        epoch, b = divmod(state.step, spe)
        perm = stream_rng(cfg.seed, STREAM_EPOCH, epoch).permutation(M)
        idx = torch.as_tensor(perm[b * cfg.batch_size:(b + 1) * cfg.batch_size])
        views = make_view_batch(images[idx], cfg.augment, stream_rng(cfg.seed, STREAM_AUGMENT, state.step),
                                source_ids=idx.numpy())
        _, rec = train_step(state, views, cfg)
        metrics.write(rec)
        if state.step % spe == 0:
            done = state.step // spe
            if val is not None and cfg.knn_every and done % cfg.knn_every == 0:
                acc = knn_monitor(state.encoder, val, cfg)
                metrics.write({"step": state.step, "knn_top1": acc})
                log.info("epoch %d step %d knn_top1 %.4f", done, state.step, acc)
                if out_dir is not None and acc > state.best_knn:
                    state.best_knn = acc
                    save_checkpoint(state, out_dir / "best.ckpt")
            if out_dir is not None and cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
                path = out_dir / "last.ckpt"
                save_checkpoint(state, path)
                state.last_checkpoint = str(path)
    return state


# re-exported for callers that treat checkpointing as part of the trainer
from .checkpoint import load_checkpoint, save_checkpoint  # noqa: E402, F401
