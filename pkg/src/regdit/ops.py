"""Differentiable primitives used by the denoiser and the encoder.

Tensors are plain ``torch.Tensor`` values; torch autograd records the
computation graph and runs the reverse pass. Every primitive here is written
out explicitly (no fused library kernels) so that its forward contract is
the one documented, and :func:`grad_check` verifies the reverse pass against
central finite differences.
"""
from __future__ import annotations

import math
from typing import Callable, Sequence

import torch

from .exceptions import ContractError, DimensionError

__all__ = [
    "matmul", "linear", "add", "mul", "gelu", "silu", "row_mean",
    "layer_norm", "softmax", "attention", "multihead_attention",
    "concat_tokens", "slice_tokens", "embedding", "grad_check",
]


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul inner dimensions differ: {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def linear(x: torch.Tensor, weight: torch.Tensor,
           bias: torch.Tensor | None = None) -> torch.Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored as (out, in)."""
    if x.shape[-1] != weight.shape[-1]:
        raise DimensionError(
            f"linear input width {tuple(x.shape)} does not match weight {tuple(weight.shape)}")
    y = x @ weight.transpose(0, 1)
    if bias is not None:
        y = y + bias
    return y


def add(a, b):
    return a + b


def mul(a, b):
    return a * b


def gelu(x):
    return 0.5 * x * (1.0 + torch.erf(x * (1.0 / math.sqrt(2.0))))


def silu(x):
    return x * torch.sigmoid(x)


def row_mean(x):
    return x.mean(dim=-1, keepdim=True)


def layer_norm(x: torch.Tensor, gamma: torch.Tensor | None = None,
               beta: torch.Tensor | None = None, eps: float = 1e-6) -> torch.Tensor:
    """Normalize each row (last axis) with the biased variance.

    ``eps`` sits inside the square root, so a constant row maps to ``beta``.
    """
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    mu = x.mean(dim=-1, keepdim=True)
    xc = x - mu
    var = (xc * xc).mean(dim=-1, keepdim=True)
    y = xc / torch.sqrt(var + eps)
    if gamma is not None:
        y = y * gamma
    if beta is not None:
        y = y + beta
    return y


def softmax(x: torch.Tensor) -> torch.Tensor:
    z = x - x.amax(dim=-1, keepdim=True).detach()
    e = torch.exp(z)
    return e / e.sum(dim=-1, keepdim=True)


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
              return_weights: bool = False):
    """Scaled dot-product attention over the token axis (second to last).

    ``q`` is (..., N, h), ``k`` and ``v`` are (..., M, h).
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise DimensionError(
            f"attention shapes incompatible: q{tuple(q.shape)} k{tuple(k.shape)} v{tuple(v.shape)}")
    scale = 1.0 / math.sqrt(q.shape[-1])
    w = softmax((q @ k.transpose(-1, -2)) * scale)
    out = w @ v
    if return_weights:
        return out, w
    return out


def multihead_attention(x: torch.Tensor, qkv_weight: torch.Tensor,
                        qkv_bias: torch.Tensor, proj_weight: torch.Tensor,
                        proj_bias: torch.Tensor, heads: int,
                        return_weights: bool = False):
    """Self-attention for ``x`` of shape (B, L, C) with a fused qkv projection.

    ``qkv_bias`` has 3C entries, or 2C entries holding the query and value
    biases only. A key bias adds the same logit to every key of a query,
    which softmax ignores, so leaving it out removes a dead parameter.
    """
    B, L, C = x.shape
    hd = C // heads
    if qkv_bias is not None and qkv_bias.shape[-1] == 2 * C:
        zeros = torch.zeros(C, dtype=qkv_bias.dtype, device=qkv_bias.device)
        qkv_bias = torch.cat([qkv_bias[:C], zeros, qkv_bias[C:]])
    qkv = linear(x, qkv_weight, qkv_bias).reshape(B, L, 3, heads, hd)
    qkv = qkv.permute(2, 0, 3, 1, 4)
    out, w = attention(qkv[0], qkv[1], qkv[2], return_weights=True)
    out = out.transpose(1, 2).reshape(B, L, C)
    out = linear(out, proj_weight, proj_bias)
    if return_weights:
        return out, w
    return out


def concat_tokens(parts: Sequence[torch.Tensor]) -> torch.Tensor:
    """Concatenate along the token axis (second to last)."""
    widths = {p.shape[-1] for p in parts}
    if len(widths) != 1:
        raise DimensionError(f"concat_tokens widths differ: {sorted(widths)}")
    return torch.cat(list(parts), dim=-2)


def slice_tokens(x: torch.Tensor, start: int, stop: int) -> torch.Tensor:
    if not 0 <= start <= stop <= x.shape[-2]:
        raise DimensionError(
            f"slice [{start}, {stop}) out of range for {x.shape[-2]} tokens")
    return x[..., start:stop, :]


def embedding(table: torch.Tensor, ids: torch.Tensor) -> torch.Tensor:
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= table.shape[0]):
        raise DimensionError(
            f"embedding ids outside [0, {table.shape[0]})")
    return table[ids]


def grad_check(f: Callable[[], torch.Tensor], params: Sequence[torch.Tensor],
               h: float = 1e-5, max_coords: int | None = None,
               generator: torch.Generator | None = None,
               directional: bool = False) -> float:
    """Largest relative error between autograd and central differences.

    ``f`` takes no arguments and reads ``params`` (float64 leaf tensors).
    The relative error per coordinate is
    ``|analytic - numeric| / max(1e-8, |numeric|)``. With ``max_coords`` set,
    at most that many coordinates per parameter are drawn at random.

    ``directional=True`` probes each parameter tensor along one random unit
    direction ``d`` instead, comparing ``grad . d`` with the central
    difference of ``f`` along ``d``. Every entry of every tensor takes part,
    at two evaluations per tensor, which keeps large models affordable.
    ``d`` has random magnitudes and the signs of the analytic gradient
    (random signs where it is exactly zero), so the probed derivative cannot
    cancel to nothing and sink below the roundoff of ``f``; a wrong sign or
    size in any entry still moves the numeric side away from ``grad . d``.
    """
    params = list(params)
    for p in params:
        if p.dtype != torch.float64:
            raise ContractError("grad_check needs float64 parameters")
    out = f()
    if out.numel() != 1:
        raise ContractError(f"grad_check needs a scalar output, got shape {tuple(out.shape)}")
    grads = torch.autograd.grad(out, params, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        if directional:
            for p, g in zip(params, grads):
                g = torch.zeros_like(p) if g is None else g
                r = torch.randn(p.shape, generator=generator, dtype=p.dtype)
                d = torch.where(g != 0, g.sign() * r.abs(), r)
                d /= d.norm()
                orig = p.clone()
                p.add_(h * d)
                fp = f().item()
                p.copy_(orig - h * d)
                fm = f().item()
                p.copy_(orig)
                numeric = (fp - fm) / (2.0 * h)
                err = abs((g * d).sum().item() - numeric) / max(1e-8, abs(numeric))
                worst = max(worst, err)
            return worst
        for p, g in zip(params, grads):
            if g is None:
                g = torch.zeros_like(p)
            flat = p.view(-1)
            gflat = g.reshape(-1)
            n = flat.numel()
            if max_coords is not None and n > max_coords:
                idx = torch.randperm(n, generator=generator)[:max_coords].tolist()
            else:
                idx = range(n)
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + h
                fp = f().item()
                flat[i] = orig - h
                fm = f().item()
                flat[i] = orig
                numeric = (fp - fm) / (2.0 * h)
                err = abs(gflat[i].item() - numeric) / max(1e-8, abs(numeric))
                worst = max(worst, err)
    return worst
