"""Transformer denoiser with trainable registers inserted mid-network.

The denoiser predicts clean latents from noisy ones. Two conditioning modes
are supported: adaLN-zero modulation (default) and in-context conditioning,
where the timestep and class become two extra tokens. Registers are learned
tokens concatenated at ``start_block`` and sliced off before the output
projection, so they are never supervised directly.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from . import ops
from .diffusion import UNCONDITIONAL, ConditionInfo
from .exceptions import ConfigError, DimensionError

CONDITIONING_MODES = ("adaln", "in_context")
N_COND_TOKENS = 2


@dataclass
class RegisterConfig:
    count: int = 36
    start_block: int = 2

    @property
    def enabled(self) -> bool:
        return self.count > 0


@dataclass
class ModelConfig:
    depth: int = 8
    width: int = 256
    heads: int = 8
    token_count: int = 64
    token_dim: int = 16
    class_count: int = 4
    registers: RegisterConfig = field(default_factory=RegisterConfig)
    conditioning: str = "adaln"
    mlp_ratio: float = 2.0
    freq_dim: int = 64

    def validate(self) -> "ModelConfig":
        problems = []
        if self.depth < 2:
            problems.append(f"depth must be >= 2 (got {self.depth})")
        if self.heads < 1 or self.width % self.heads:
            problems.append(f"width {self.width} must be divisible by heads {self.heads}")
        if self.registers.count < 0:
            problems.append("register count must be >= 0")
        if self.registers.start_block < 0 or self.registers.start_block >= self.depth:
            problems.append(f"register start_block {self.registers.start_block} "
                            f"must lie in [0, depth={self.depth})")
        side = math.isqrt(self.token_count)
        if side * side != self.token_count:
            problems.append(f"token_count {self.token_count} must be a square grid")
        if self.conditioning not in CONDITIONING_MODES:
            problems.append(f"conditioning must be one of {CONDITIONING_MODES}")
        if self.token_dim < 1 or self.class_count < 1 or self.freq_dim < 2 or self.freq_dim % 2:
            problems.append("token_dim, class_count >= 1 and an even freq_dim >= 2 required")
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    @property
    def mlp_hidden(self) -> int:
        return int(self.width * self.mlp_ratio)

    def to_dict(self) -> dict:
        d = asdict(self)
        reg = d.pop("registers")
        d["registers.count"] = reg["count"]
        d["registers.start_block"] = reg["start_block"]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        reg = RegisterConfig(int(d.pop("registers.count", 36)),
                             int(d.pop("registers.start_block", 2)))
        kinds = {"depth": int, "width": int, "heads": int, "token_count": int,
                 "token_dim": int, "class_count": int, "conditioning": str,
                 "mlp_ratio": float, "freq_dim": int}
        kw = {k: kinds[k](v) for k, v in d.items() if k in kinds}
        return cls(registers=reg, **kw)


def sincos_2d(width: int, side: int) -> np.ndarray:
    """Fixed 2-D sine/cosine position table of shape (side*side, width)."""
    def one_axis(dim, pos):
        omega = 1.0 / 10000 ** (np.arange(dim // 2, dtype=np.float64) / (dim / 2.0))
        out = np.einsum("m,d->md", pos.reshape(-1), omega)
        return np.concatenate([np.sin(out), np.cos(out)], axis=1)

    gh, gw = np.meshgrid(np.arange(side, dtype=np.float64),
                         np.arange(side, dtype=np.float64), indexing="ij")
    half = width // 2
    emb = np.concatenate([one_axis(half, gh), one_axis(width - half, gw)], axis=1)
    return emb[:, :width]


def timestep_features(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period)
                      * torch.arange(half, dtype=torch.float64) / half).to(t.dtype)
    # t lives in [0, 1]; stretch it so the low frequencies still vary
    args = (1000.0 * t)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def adaln_modulate(cond: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor,
                   chunks: int = 3):
    """Shift/scale/gate vectors from the summed timestep + class embedding."""
    return ops.linear(ops.silu(cond), weight, bias).chunk(chunks, dim=-1)


def _modulate(x, shift, scale):
    return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


class _Linear(nn.Module):
    def __init__(self, n_in, n_out):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(n_out, n_in))
        self.bias = nn.Parameter(torch.empty(n_out))

    def forward(self, x):
        return ops.linear(x, self.weight, self.bias)


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w = cfg.width
        self.heads = cfg.heads
        self.adaln = cfg.conditioning == "adaln"
        self.qkv = _Linear(w, 3 * w)
        self.qkv.bias = nn.Parameter(torch.empty(2 * w))  # query and value biases
        self.proj = _Linear(w, w)
        self.fc1 = _Linear(w, cfg.mlp_hidden)
        self.fc2 = _Linear(cfg.mlp_hidden, w)
        if self.adaln:
            self.modulation = _Linear(w, 6 * w)
        else:
            self.gates = nn.Parameter(torch.zeros(2, w))

    def forward(self, x, cond, record_attention=False):
        if self.adaln:
            mods = adaln_modulate(cond, self.modulation.weight, self.modulation.bias, chunks=6)
            sh_a, sc_a, g_a, sh_m, sc_m, g_m = mods
            h = _modulate(ops.layer_norm(x), sh_a, sc_a)
        else:
            g_a, g_m = self.gates[0].unsqueeze(0), self.gates[1].unsqueeze(0)
            h = ops.layer_norm(x)
        a, weights = ops.multihead_attention(
            h, self.qkv.weight, self.qkv.bias, self.proj.weight, self.proj.bias,
            self.heads, return_weights=True)
        x = x + g_a.unsqueeze(1) * a
        h = ops.layer_norm(x)
        if self.adaln:
            h = _modulate(h, sh_m, sc_m)
        x = x + g_m.unsqueeze(1) * self.fc2(ops.gelu(self.fc1(h)))
        return x, (weights if record_attention else None)


@dataclass
class ForwardTrace:
    """Per-block bookkeeping from one denoiser forward pass."""

    seq_lens: list = field(default_factory=list)
    kinds: dict = field(default_factory=dict)
    hidden: dict = field(default_factory=dict)
    attention: dict = field(default_factory=dict)
    final_input: torch.Tensor | None = None


class RegisterDiT(nn.Module):
    """Denoiser ``x_theta(z_t, t, c)`` predicting clean latents."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg.validate()
        w, d = cfg.width, cfg.token_dim
        self.side = math.isqrt(cfg.token_count)
        self.x_embed = _Linear(d, w)
        self.register_buffer(
            "pos_embed", torch.from_numpy(sincos_2d(w, self.side)).float(), persistent=False)
        self.t_mlp1 = _Linear(cfg.freq_dim, w)
        self.t_mlp2 = _Linear(w, w)
        self.y_table = nn.Parameter(torch.empty(cfg.class_count + 1, w))
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.depth))
        if cfg.registers.count > 0:
            self.registers = nn.Parameter(torch.empty(cfg.registers.count, w))
        else:
            self.registers = None
        if cfg.conditioning == "adaln":
            self.final_modulation = _Linear(w, 2 * w)
        self.out = _Linear(w, d)
        self.reset_parameters(seed)

    @torch.no_grad()
    def reset_parameters(self, seed: int) -> None:
        g = torch.Generator().manual_seed(seed)

        def xavier(lin):
            fan_out, fan_in = lin.weight.shape
            a = math.sqrt(6.0 / (fan_in + fan_out))
            lin.weight.copy_(torch.rand(lin.weight.shape, generator=g) * 2 * a - a)
            lin.bias.zero_()

        xavier(self.x_embed)
        for lin in (self.t_mlp1, self.t_mlp2):
            lin.weight.copy_(torch.randn(lin.weight.shape, generator=g) * 0.02)
            lin.bias.zero_()
        self.y_table.copy_(torch.randn(self.y_table.shape, generator=g) * 0.02)
        for blk in self.blocks:
            for lin in (blk.qkv, blk.proj, blk.fc1, blk.fc2):
                xavier(lin)
            if blk.adaln:
                blk.modulation.weight.zero_()
                blk.modulation.bias.zero_()
            else:
                blk.gates.zero_()
        if self.registers is not None:
            self.registers.copy_(torch.randn(self.registers.shape, generator=g) * 0.02)
        if self.cfg.conditioning == "adaln":
            self.final_modulation.weight.zero_()
            self.final_modulation.bias.zero_()
        self.out.weight.zero_()
        self.out.bias.zero_()

    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def class_index(self, y: torch.Tensor) -> torch.Tensor:
        y = torch.as_tensor(y, dtype=torch.long)
        return torch.where(y == UNCONDITIONAL, torch.full_like(y, self.cfg.class_count), y)

    def embed_condition(self, t: torch.Tensor, y: torch.Tensor):
        """Timestep and class embeddings, each (B, width)."""
        dtype = self.x_embed.weight.dtype
        t_emb = self.t_mlp2(ops.silu(self.t_mlp1(timestep_features(t.to(dtype), self.cfg.freq_dim))))
        y_emb = ops.embedding(self.y_table, self.class_index(y))
        return t_emb, y_emb

    def in_context_condition(self, t: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        """The two prepended conditioning tokens (timestep, class), shape (B, 2, width)."""
        if self.cfg.conditioning != "in_context":
            raise ConfigError("in_context_condition requires conditioning='in_context'")
        t_emb, y_emb = self.embed_condition(t, y)
        return torch.stack([t_emb, y_emb], dim=1)

    def forward(self, z_t: torch.Tensor, t: torch.Tensor, y: torch.Tensor,
                capture=None, record_attention: bool = False, trace: ForwardTrace | None = None):
        cfg = self.cfg
        if z_t.ndim != 3 or z_t.shape[1:] != (cfg.token_count, cfg.token_dim):
            raise DimensionError(
                f"expected z_t of shape (B, {cfg.token_count}, {cfg.token_dim}), got {tuple(z_t.shape)}")
        B = z_t.shape[0]
        t = torch.as_tensor(t, dtype=z_t.dtype).reshape(-1).expand(B)
        y = torch.as_tensor(y, dtype=torch.long).reshape(-1).expand(B)
        capture = set(range(cfg.depth)) if capture == "all" else set(capture or ())
        for layer in capture:
            if not 0 <= layer < cfg.depth:
                raise IndexError(f"layer {layer} outside [0, {cfg.depth})")

        x = self.x_embed(z_t) + self.pos_embed.to(z_t.dtype)
        kinds = ["patch"] * cfg.token_count
        if cfg.conditioning == "adaln":
            t_emb, y_emb = self.embed_condition(t, y)
            cond = t_emb + y_emb
            n_prefix = 0
        else:
            cond = None
            x = ops.concat_tokens([self.in_context_condition(t, y), x])
            kinds = ["condition"] * N_COND_TOKENS + kinds
            n_prefix = N_COND_TOKENS

        R, start = cfg.registers.count, cfg.registers.start_block
        for i, blk in enumerate(self.blocks):
            if R > 0 and i == start:
                regs = self.registers.to(x.dtype).unsqueeze(0).expand(B, R, cfg.width)
                x = ops.concat_tokens([x, regs])
                kinds = kinds + ["register"] * R
            if trace is not None:
                trace.seq_lens.append(x.shape[1])
            x, attn = blk(x, cond, record_attention)
            if trace is not None and record_attention:
                trace.attention[i] = attn
            if trace is not None and i in capture:
                trace.hidden[i] = x
                trace.kinds[i] = list(kinds)

        x = ops.slice_tokens(x, n_prefix, n_prefix + cfg.token_count)
        if trace is not None:
            trace.final_input = x
        h = ops.layer_norm(x)
        if cfg.conditioning == "adaln":
            shift, scale = adaln_modulate(cond, self.final_modulation.weight,
                                          self.final_modulation.bias, chunks=2)
            h = _modulate(h, shift, scale)
        return self.out(h)


def build_model(cfg: ModelConfig, seed: int = 0) -> RegisterDiT:
    return RegisterDiT(cfg, seed=seed)


def _as_batch(z_t, t, c):
    if isinstance(c, ConditionInfo):
        c = c.class_id
    single = z_t.ndim == 2
    if single:
        z_t = z_t.unsqueeze(0)
    return z_t, t, torch.as_tensor(c).reshape(-1), single


def forward_denoise(model: RegisterDiT, z_t: torch.Tensor, t, c) -> torch.Tensor:
    """Clean-latent prediction for one (N, d) sample or a (B, N, d) batch."""
    z_b, t, y, single = _as_batch(z_t, t, c)
    out = model(z_b, t, y)
    return out[0] if single else out


def capture_activations(model: RegisterDiT, z_t: torch.Tensor, t, c, layer_set="all",
                        record_attention: bool = False) -> ForwardTrace:
    """Post-block hidden states (registers included) with position-kind flags."""
    z_b, t, y, _ = _as_batch(z_t, t, c)
    trace = ForwardTrace()
    with torch.no_grad():
        model(z_b, t, y, capture=layer_set, record_attention=record_attention, trace=trace)
    return trace


def patch_positions(kinds) -> list[int]:
    return [i for i, k in enumerate(kinds) if k == "patch"]
