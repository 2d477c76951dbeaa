"""Frozen-feature evaluation: KNN, linear probe and affinity-vs-cosine comparison."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .augment import resize_full
from .errors import ContractError


@dataclass
class FeatureBank:
    features: torch.Tensor  # [M, d], rows L2-normalised
    labels: torch.Tensor  # [M]
    split: str = "train"

    def __post_init__(self):
        if self.features.shape[0] == 0:
            raise ContractError("feature bank is empty")
        self.features = F.normalize(self.features.float(), dim=1)
        self.labels = torch.as_tensor(self.labels, dtype=torch.long)
        if self.labels.shape[0] != self.features.shape[0]:
            raise ContractError("features and labels disagree in length")


@torch.no_grad()
def extract_features(encoder, images: torch.Tensor, size=None, batch_size=256) -> torch.Tensor:
    """Backbone features (pre-projection) in eval mode; training mode is restored."""
    was = encoder.training
    encoder.eval()
    try:
        out = []
        for i in range(0, images.shape[0], batch_size):
            x = images[i:i + batch_size]
            if size is not None and x.shape[-1] != size:
                x = resize_full(x, size)
            out.append(encoder.features(x))
        return torch.cat(out) if out else images.new_zeros((0, encoder.feature_dim))
    finally:
        encoder.train(was)


def make_bank(encoder, dataset, split=None, size=None) -> FeatureBank:
    idx = dataset.splits[split] if split else list(range(len(dataset)))
    feats = extract_features(encoder, dataset.tensor(idx), size=size)
    return FeatureBank(feats, dataset.labels[idx], split or "train")


def knn_classify(bank: FeatureBank, queries, k=20, vote_temperature=0.07) -> torch.Tensor:
    """Weighted KNN vote over cosine similarity.

    Neighbours are the ``k`` bank rows with the highest similarity (ties go
    to the lower row index); each votes ``exp(sim / vote_temperature)`` for
    its label, and vote ties go to the smallest class id.
    """
    M = bank.features.shape[0]
    if M == 0:
        raise ContractError("empty bank")
    if not 1 <= k <= M:
        raise ContractError(f"k must lie in [1, {M}], got {k}")
    if not vote_temperature > 0:
        raise ContractError("vote_temperature must be positive")
    q = F.normalize(torch.as_tensor(queries, dtype=torch.float32), dim=1)
    if q.shape[0] == 0:
        return torch.zeros(0, dtype=torch.long)
    num_classes = int(bank.labels.max()) + 1
    preds = []
    for start in range(0, q.shape[0], 1024):
        sims = q[start:start + 1024] @ bank.features.t()
        order = torch.sort(sims, dim=1, descending=True, stable=True).indices[:, :k]
        top = torch.gather(sims, 1, order)
        votes = torch.zeros(sims.shape[0], num_classes, dtype=torch.float64)
        votes.scatter_add_(1, bank.labels[order], torch.exp(top.double() / vote_temperature))
        preds.append(votes.argmax(dim=1))
    return torch.cat(preds)


def knn_top1(bank_train: FeatureBank, bank_val: FeatureBank, k=20, vote_temperature=0.07) -> float:
    if bank_train.features.shape[1] != bank_val.features.shape[1]:
        raise ContractError("train and val banks have different feature sizes")
    k = min(k, bank_train.features.shape[0])
    pred = knn_classify(bank_train, bank_val.features, k, vote_temperature)
    return float((pred == bank_val.labels).double().mean())


def knn_monitor(encoder, val, cfg) -> float:
    """KNN top-1 used during training.

    ``val`` is either a Dataset with ``train``/``val`` splits or a pair of
    Datasets ``(bank_source, queries)``.
    """
    size = cfg.augment.output_size_global
    if isinstance(val, tuple):
        train_ds, val_ds = val
        bt = make_bank(encoder, train_ds, size=size)
        bv = make_bank(encoder, val_ds, size=size)
    else:
        bt = make_bank(encoder, val, "train", size=size)
        bv = make_bank(encoder, val, "val", size=size)
        bv.split = "val"
    return knn_top1(bt, bv, cfg.knn_k, cfg.knn_temperature)


@dataclass
class ProbeConfig:
    epochs: int = 30
    lr: float = 0.3
    momentum: float = 0.9
    batch_size: int = 256
    seed: int = 0


def linear_probe(bank_train: FeatureBank, bank_val: FeatureBank, probe_cfg: ProbeConfig | None = None) -> float:
    """Top-1 accuracy of an affine softmax classifier trained on frozen features.

    Features are standardised with training-set statistics; SGD with
    momentum and a cosine learning-rate decay to zero, no weight decay.
    """
    cfg = probe_cfg or ProbeConfig()
    xt = bank_train.features.detach().clone()
    xv = bank_val.features.detach().clone()
    mu, sd = xt.mean(0), xt.std(0, unbiased=False).clamp_min(1e-6)
    xt, xv = (xt - mu) / sd, (xv - mu) / sd
    yt = bank_train.labels
    num_classes = int(max(int(yt.max()), int(bank_val.labels.max()))) + 1
    g = torch.Generator().manual_seed(cfg.seed)
    head = torch.nn.Linear(xt.shape[1], num_classes)
    with torch.no_grad():
        head.weight.normal_(0, 0.01, generator=g)
        head.bias.zero_()
    opt = torch.optim.SGD(head.parameters(), lr=cfg.lr, momentum=cfg.momentum)
    M = xt.shape[0]
    steps_per_epoch = math.ceil(M / cfg.batch_size)
    total = max(cfg.epochs * steps_per_epoch, 1)
    t = 0
    for _ in range(cfg.epochs):
        perm = torch.randperm(M, generator=g)
        for i in range(0, M, cfg.batch_size):
            for grp in opt.param_groups:
                grp["lr"] = 0.5 * cfg.lr * (1 + math.cos(math.pi * t / total))
            idx = perm[i:i + cfg.batch_size]
            loss = F.cross_entropy(head(xt[idx]), yt[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            t += 1
    with torch.no_grad():
        pred = head(xv).argmax(dim=1)
    return float((pred == bank_val.labels).double().mean())


# -- affinity vs cosine ----------------------------------------------------

@dataclass
class AffinityReport:
    reference_id: str
    candidate_ids: list
    cosine: np.ndarray
    regressor: np.ndarray
    cosine_norm: np.ndarray = field(init=False)
    regressor_norm: np.ndarray = field(init=False)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.cosine = np.asarray(self.cosine, dtype=np.float64)
        self.regressor = np.asarray(self.regressor, dtype=np.float64)
        self.cosine_norm = minmax(self.cosine)
        self.regressor_norm = minmax(self.regressor)

    def __len__(self):
        return len(self.candidate_ids)

    def to_text(self) -> str:
        lines = [f"# reference={self.reference_id}",
                 "# crop_id cosine_raw cosine_norm regressor_raw regressor_norm"]
        for cid, c, cn, r, rn in zip(self.candidate_ids, self.cosine, self.cosine_norm,
                                     self.regressor, self.regressor_norm):
            lines.append(f"{cid} {c:.6f} {cn:.6f} {r:.6f} {rn:.6f}")
        return "\n".join(lines) + "\n"

    def plot(self, path):
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        x = np.arange(len(self))
        fig, ax = plt.subplots(figsize=(max(6, 0.25 * len(self)), 3))
        ax.bar(x - 0.2, self.cosine_norm, width=0.4, label="cosine")
        ax.bar(x + 0.2, self.regressor_norm, width=0.4, label="regressor")
        ax.set_xticks(x)
        ax.set_xticklabels(self.candidate_ids, rotation=90, fontsize=6)
        ax.set_ylabel("normalised similarity")
        ax.set_title(f"reference {self.reference_id}")
        ax.legend()
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
        return path


def minmax(v) -> np.ndarray:
    """Min-max normalise to [0, 1]; a constant vector (incl. length one) maps to ones."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        return v
    lo, hi = v.min(), v.max()
    if hi - lo <= 1e-12 * max(1.0, abs(hi)):
        return np.ones_like(v)
    return (v - lo) / (hi - lo)


@torch.no_grad()
def affinity_compare(encoder, regressor, reference: torch.Tensor, candidates: torch.Tensor,
                     candidate_ids=None, reference_id="ref") -> AffinityReport:
    """Cosine and learned affinity between a reference crop and each candidate crop.

    Crops are ``[C, S, S]`` (reference) and ``[N, C, S, S]`` (candidates),
    embedded by the online encoder in eval mode and L2-normalised, matching
    what the regressor sees in training.
    """
    if candidates.shape[0] == 0:
        raise ContractError("affinity_compare needs at least one candidate")
    if candidate_ids is None:
        candidate_ids = [str(i) for i in range(candidates.shape[0])]
    enc_mode, reg_mode = encoder.training, regressor.training
    encoder.eval()
    regressor.eval()
    try:
        zr = F.normalize(encoder(reference.unsqueeze(0)), dim=1)
        zc = F.normalize(encoder(candidates), dim=1)
        cos = (zc @ zr.t()).squeeze(1)
        reg = regressor(zr.expand_as(zc), zc)
    finally:
        encoder.train(enc_mode)
        regressor.train(reg_mode)
    return AffinityReport(str(reference_id), list(candidate_ids), cos.numpy(), reg.numpy())
