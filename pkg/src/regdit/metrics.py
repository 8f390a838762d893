"""Kernel two-sample distance between sets of token tensors."""
from __future__ import annotations

import numpy as np
import torch

from .exceptions import ContractError


def _flatten(samples) -> torch.Tensor:
    if isinstance(samples, (list, tuple)):
        samples = torch.stack([torch.as_tensor(s) for s in samples])
    x = torch.as_tensor(np.asarray(samples) if not isinstance(samples, torch.Tensor) else samples)
    if x.ndim < 2 or x.shape[0] == 0:
        raise ContractError("mmd needs a non-empty set of samples")
    return x.reshape(x.shape[0], -1).to(torch.float64)


def median_bandwidth(X: torch.Tensor, Y: torch.Tensor) -> float:
    """Median pairwise distance of the pooled samples (off-diagonal pairs)."""
    Z = torch.cat([X, Y])
    d = torch.cdist(Z, Z)
    iu = torch.triu_indices(len(Z), len(Z), offset=1)
    vals = d[iu[0], iu[1]]
    med = float(vals.median()) if vals.numel() else 0.0
    return med if med > 0 else 1.0


def mmd(X, Y, bandwidth: float | None = None) -> float:
    """Unbiased squared MMD with a Gaussian kernel, clipped at 0.

    Each sample (for instance an (N, d) token tensor) is flattened to one
    vector. ``bandwidth`` defaults to the median heuristic on the pooled set;
    the kernel is ``exp(-|x - y|^2 / (2 bandwidth^2))``.
    """
    X, Y = _flatten(X), _flatten(Y)
    if X.shape[1] != Y.shape[1]:
        raise ContractError(f"sample sizes differ: {X.shape[1]} vs {Y.shape[1]}")
    m, n = len(X), len(Y)
    if m < 2 or n < 2:
        raise ContractError("unbiased mmd needs at least two samples per set")
    bw = median_bandwidth(X, Y) if bandwidth is None else float(bandwidth)
    gamma = 1.0 / (2.0 * bw * bw)

    def k(A, B):
        return torch.exp(-gamma * torch.cdist(A, B).pow(2))

    kxx, kyy, kxy = k(X, X), k(Y, Y), k(X, Y)
    xx = (kxx.sum() - kxx.diagonal().sum()) / (m * (m - 1))
    yy = (kyy.sum() - kyy.diagonal().sum()) / (n * (n - 1))
    return max(float(xx + yy - 2.0 * kxy.mean()), 0.0)
