"""Independent reference computations used across the test-suite."""

import hashlib

import numpy as np
import torch


def central_fd(f, x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Elementwise central-difference gradient of a scalar function of ``x`` (float64)."""
    x = x.detach().clone()
    g = torch.zeros_like(x)
    flat, gflat = x.view(-1), g.view(-1)
    for i in range(flat.numel()):
        old = float(flat[i])
        flat[i] = old + eps
        with torch.no_grad():
            hi = float(f(x))
        flat[i] = old - eps
        with torch.no_grad():
            lo = float(f(x))
        flat[i] = old
        gflat[i] = (hi - lo) / (2 * eps)
    return g


def analytic_grad(f, x: torch.Tensor) -> torch.Tensor:
    x = x.detach().clone().requires_grad_(True)
    (g,) = torch.autograd.grad(f(x), x)
    return g


def rel_err(a: torch.Tensor, b: torch.Tensor) -> float:
    num = float((a - b).norm())
    den = max(float(a.norm()), float(b.norm()), 1e-12)
    return num / den


def digest(tensors) -> str:
    """SHA-256 over the raw bytes of a sequence of tensors (or a module's state)."""
    if isinstance(tensors, torch.nn.Module):
        tensors = [t for _, t in sorted(tensors.state_dict().items())]
    h = hashlib.sha256()
    for t in tensors:
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def brute_knn(bank, labels, queries, k, temperature):
    """Exhaustive KNN: float64 cosine, stable descending sort, summed exp votes, lowest-id ties."""
    bank = np.asarray(bank, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64)
    bank = bank / np.linalg.norm(bank, axis=1, keepdims=True)
    labels = np.asarray(labels)
    out = []
    for q in queries:
        q = q / np.linalg.norm(q)
        sims = [(float(np.dot(q, row)), i) for i, row in enumerate(bank)]
        sims.sort(key=lambda t: (-t[0], t[1]))
        votes = {}
        for s, i in sims[:k]:
            votes[int(labels[i])] = votes.get(int(labels[i]), 0.0) + np.exp(s / temperature)
        best = max(votes.values())
        out.append(min(c for c, v in votes.items() if v == best))
    return np.array(out)


def log_info_nce(z, zp, negs, tau):
    """Eq.-free scalar reference: mean -log softmax of the positive, via float64 numpy."""
    z, zp, negs = (np.asarray(a, dtype=np.float64) for a in (z, zp, negs))
    pos = np.sum(z * zp, axis=1) / tau
    neg = z @ negs.T / tau
    allv = np.concatenate([pos[:, None], neg], axis=1)
    m = allv.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(allv - m).sum(axis=1))
    return float(np.mean(lse - pos))
