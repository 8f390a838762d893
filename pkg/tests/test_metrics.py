import pytest
import torch

from regdit.exceptions import ContractError
from regdit.metrics import median_bandwidth, mmd


def brute_mmd(X, Y, bw):
    k = lambda a, b: float(torch.exp(-((a - b) ** 2).sum() / (2 * bw * bw)))
    m, n = len(X), len(Y)
    xx = sum(k(X[i], X[j]) for i in range(m) for j in range(m) if i != j) / (m * (m - 1))
    yy = sum(k(Y[i], Y[j]) for i in range(n) for j in range(n) if i != j) / (n * (n - 1))
    xy = sum(k(X[i], Y[j]) for i in range(m) for j in range(n)) / (m * n)
    return max(xx + yy - 2 * xy, 0.0)


def test_matches_brute_force():
    g = torch.Generator().manual_seed(0)
    X = torch.randn(7, 3, generator=g, dtype=torch.float64)
    Y = torch.randn(9, 3, generator=g, dtype=torch.float64) + 1.0
    bw = median_bandwidth(X, Y)
    assert mmd(X, Y) == pytest.approx(brute_mmd(X, Y, bw), abs=1e-12)


def test_separates_shifted_sets_and_flattens_tokens():
    g = torch.Generator().manual_seed(1)
    a = torch.randn(40, 4, 2, generator=g)
    b = torch.randn(40, 4, 2, generator=g)
    c = torch.randn(40, 4, 2, generator=g) + 2.0
    assert mmd(a, c) > 10 * max(mmd(a, b), 1e-6)
    assert mmd(a, a) == 0.0


def test_contracts():
    with pytest.raises(ContractError):
        mmd(torch.zeros(1, 3), torch.zeros(4, 3))
    with pytest.raises(ContractError):
        mmd(torch.zeros(3, 2), torch.zeros(3, 3))
