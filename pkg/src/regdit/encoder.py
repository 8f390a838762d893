"""Small frozen ViT-style token encoder with controllable outlier injection."""
from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from . import ops
from .exceptions import ConfigError, DimensionError, IdempotencyError
from .model import sincos_2d


@dataclass
class EncoderConfig:
    image_size: int = 32
    patch: int = 4
    width: int = 64
    depth: int = 4
    heads: int = 4
    token_dim: int = 16
    mlp_ratio: float = 4.0
    pos_scale: float = 1.0

    def validate(self) -> "EncoderConfig":
        if self.image_size % self.patch:
            raise ConfigError(f"image size {self.image_size} not divisible by patch {self.patch}")
        if self.width % self.heads:
            raise ConfigError(f"width {self.width} not divisible by heads {self.heads}")
        if self.depth < 1:
            raise ConfigError("encoder depth must be >= 1")
        return self

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    @property
    def n_tokens(self) -> int:
        return self.grid ** 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        kinds = {k: type(v) for k, v in asdict(cls()).items()}
        return cls(**{k: kinds[k](v) for k, v in d.items() if k in kinds})


@dataclass(frozen=True)
class OutlierInjection:
    """Amplify MLP output channels ``neuron_ids`` of block ``layer`` by ``gain``.

    A token whose channel value lies outside the channel's calibration band
    has its deviation from the calibration median multiplied by ``gain``;
    tokens inside the band keep their value. The edit therefore lands on a
    sparse, input-dependent population of tokens.
    """

    layer: int
    neuron_ids: tuple
    gain: float

    def __post_init__(self):
        object.__setattr__(self, "neuron_ids", tuple(int(c) for c in self.neuron_ids))

    def to_text(self) -> str:
        return f"{self.layer}:{','.join(map(str, self.neuron_ids))}:{self.gain!r}"

    @classmethod
    def from_text(cls, text: str) -> "OutlierInjection":
        layer, chans, gain = text.strip().split(":")
        return cls(int(layer), tuple(int(c) for c in chans.split(",") if c), float(gain))


BAND_QUANTILE = 0.97


class EncoderBlock(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        w, hid = cfg.width, int(cfg.width * cfg.mlp_ratio)
        self.heads = cfg.heads
        self.ln1_g = nn.Parameter(torch.ones(w))
        self.ln1_b = nn.Parameter(torch.zeros(w))
        self.ln2_g = nn.Parameter(torch.ones(w))
        self.ln2_b = nn.Parameter(torch.zeros(w))
        self.qkv_w = nn.Parameter(torch.empty(3 * w, w))
        self.qkv_b = nn.Parameter(torch.zeros(3 * w))
        self.proj_w = nn.Parameter(torch.empty(w, w))
        self.proj_b = nn.Parameter(torch.zeros(w))
        self.fc1_w = nn.Parameter(torch.empty(hid, w))
        self.fc1_b = nn.Parameter(torch.zeros(hid))
        self.fc2_w = nn.Parameter(torch.empty(w, hid))
        self.fc2_b = nn.Parameter(torch.zeros(w))

    def mlp(self, x):
        h = ops.layer_norm(x, self.ln2_g, self.ln2_b)
        return ops.linear(ops.gelu(ops.linear(h, self.fc1_w, self.fc1_b)), self.fc2_w, self.fc2_b)

    def forward(self, x, channel_gain=None, center=None, band=None, return_mlp=False):
        h = ops.layer_norm(x, self.ln1_g, self.ln1_b)
        x = x + ops.multihead_attention(h, self.qkv_w, self.qkv_b, self.proj_w,
                                        self.proj_b, self.heads)
        m = self.mlp(x)
        if channel_gain is not None:
            dev = m - center
            gate = (dev.abs() > band).to(m.dtype)
            m = m + (channel_gain - 1.0) * gate * dev
        if return_mlp:
            return x + m, m
        return x + m


class ToyEncoder(nn.Module):
    """Patchify -> transformer blocks -> linear head; no final norm.

    Hidden states are the residual stream after each block; the output layer
    for outlier measurement is the last block's hidden state.
    """

    def __init__(self, cfg: EncoderConfig | None = None, seed: int = 0):
        super().__init__()
        self.cfg = (cfg or EncoderConfig()).validate()
        c = self.cfg
        self.patch_w = nn.Parameter(torch.empty(c.width, c.patch * c.patch))
        self.patch_b = nn.Parameter(torch.zeros(c.width))
        self.register_buffer(
            "pos_embed", c.pos_scale * torch.from_numpy(sincos_2d(c.width, c.grid)).float())
        self.blocks = nn.ModuleList(EncoderBlock(c) for _ in range(c.depth))
        self.head_w = nn.Parameter(torch.empty(c.token_dim, c.width))
        self.head_b = nn.Parameter(torch.zeros(c.token_dim))
        self.register_buffer("latent_mean", torch.zeros(c.token_dim))
        self.register_buffer("latent_std", torch.ones(c.token_dim))
        self.register_buffer("mlp_center", torch.zeros(c.depth, c.width))
        self.register_buffer("mlp_band", torch.zeros(c.depth, c.width))
        self.injections: tuple = ()
        self.frozen = False
        self._init(seed)

    @torch.no_grad()
    def _init(self, seed):
        g = torch.Generator().manual_seed(seed)
        for name, p in self.named_parameters():
            if p.ndim == 2:
                fan_out, fan_in = p.shape
                a = math.sqrt(6.0 / (fan_in + fan_out))
                p.copy_(torch.rand(p.shape, generator=g) * 2 * a - a)

    # -- structure -------------------------------------------------------
    def patchify(self, images: torch.Tensor) -> torch.Tensor:
        c = self.cfg
        if images.ndim == 2:
            images = images.unsqueeze(0)
        B, H, W = images.shape
        if H % c.patch or W % c.patch:
            raise DimensionError(f"image {H}x{W} not divisible by patch {c.patch}")
        if H != c.image_size or W != c.image_size:
            raise DimensionError(f"encoder expects {c.image_size}x{c.image_size} images, got {H}x{W}")
        p = c.patch
        x = images.reshape(B, H // p, p, W // p, p).permute(0, 1, 3, 2, 4)
        return x.reshape(B, (H // p) * (W // p), p * p)

    def embed(self, images: torch.Tensor) -> torch.Tensor:
        x = self.patchify(torch.as_tensor(images, dtype=self.patch_w.dtype))
        return ops.linear(x, self.patch_w, self.patch_b) + self.pos_embed

    def channel_gain(self, layer: int):
        injs = [inj for inj in self.injections if inj.layer == layer]
        if not injs:
            return None
        gain = torch.ones(self.cfg.width, dtype=self.patch_w.dtype)
        for inj in injs:
            gain[list(inj.neuron_ids)] *= inj.gain
        return gain

    def block(self, i: int, x: torch.Tensor) -> torch.Tensor:
        return self.blocks[i](x, self.channel_gain(i), self.mlp_center[i], self.mlp_band[i])

    def head(self, x: torch.Tensor) -> torch.Tensor:
        return ops.linear(x, self.head_w, self.head_b)

    def normalize(self, z: torch.Tensor) -> torch.Tensor:
        return (z - self.latent_mean) / self.latent_std

    def denormalize(self, z: torch.Tensor) -> torch.Tensor:
        return z * self.latent_std + self.latent_mean

    # -- forward ---------------------------------------------------------
    def hidden_states(self, images) -> list:
        """Residual stream after every block, each (B, N, width)."""
        x = self.embed(images)
        out = []
        for i in range(self.cfg.depth):
            x = self.block(i, x)
            out.append(x)
        return out

    def forward(self, images, normalize: bool = False):
        z = self.head(self.hidden_states(images)[-1])
        return self.normalize(z) if normalize else z

    @torch.no_grad()
    def calibrate_latents(self, images) -> None:
        """Per-channel latent statistics and per-block MLP-output bands.

        The band of a channel is the median plus/minus the
        ``BAND_QUANTILE`` quantile of its absolute deviation.
        """
        x = self.embed(images)
        for i, blk in enumerate(self.blocks):
            x, m = blk(x, return_mlp=True)
            flat = m.reshape(-1, self.cfg.width)
            center = flat.median(0).values
            self.mlp_center[i].copy_(center)
            self.mlp_band[i].copy_(torch.quantile((flat - center).abs(), BAND_QUANTILE, dim=0))
        z = self.forward(images).reshape(-1, self.cfg.token_dim)
        self.latent_mean.copy_(z.mean(0))
        self.latent_std.copy_(z.std(0, unbiased=False).clamp_min(1e-6))

    def freeze(self) -> "ToyEncoder":
        for p in self.parameters():
            p.requires_grad_(False)
        self.frozen = True
        return self


def encode(enc: ToyEncoder, images, normalize: bool = False) -> torch.Tensor:
    """Tokens (N, d) for one H x W image, or (B, N, d) for a batch."""
    images = torch.as_tensor(np.asarray(images), dtype=enc.patch_w.dtype)
    single = images.ndim == 2
    with torch.no_grad():
        z = enc(images, normalize=normalize)
    return z[0] if single else z


def inject_outliers(enc: ToyEncoder, inj: OutlierInjection) -> ToyEncoder:
    """Return a copy of ``enc`` with ``inj`` recorded; weights are untouched."""
    if inj in enc.injections:
        raise IdempotencyError(f"injection {inj.to_text()} already applied")
    if not 0 <= inj.layer < enc.cfg.depth:
        raise IndexError(f"injection layer {inj.layer} outside [0, {enc.cfg.depth})")
    bad = [c for c in inj.neuron_ids if not 0 <= c < enc.cfg.width]
    if bad or not inj.neuron_ids:
        raise IndexError(f"injection channels {bad or '[]'} invalid for width {enc.cfg.width}")
    if inj.gain <= 0:
        raise ValueError("injection gain must be positive")
    out = copy.deepcopy(enc)
    out.injections = enc.injections + (inj,)
    return out


def remove_injection(enc: ToyEncoder, inj: OutlierInjection) -> ToyEncoder:
    if inj not in enc.injections:
        raise KeyError(f"injection {inj.to_text()} not present")
    out = copy.deepcopy(enc)
    out.injections = tuple(i for i in enc.injections if i != inj)
    return out


def pretrain_toy_encoder(images, steps: int = 150, seed: int = 0,
                         cfg: EncoderConfig | None = None, batch_size: int = 32,
                         lr: float = 1e-3, calib_size: int = 1024, holdout=None,
                         log=None) -> ToyEncoder:
    """Reconstruction pretraining: encode, decode each token linearly to its patch.

    With ``holdout`` images given, the held-out reconstruction MSE before and
    after training is stored in ``enc.pretrain_report``.
    """
    enc = ToyEncoder(cfg, seed=seed)
    c = enc.cfg
    images = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    g = torch.Generator().manual_seed(seed + 1)
    decoder = nn.Linear(c.token_dim, c.patch * c.patch)
    with torch.no_grad():
        decoder.weight.copy_(torch.randn(decoder.weight.shape, generator=g) / math.sqrt(c.token_dim))
        decoder.bias.zero_()
    report = {}
    if holdout is not None:
        report["init_mse"] = reconstruction_mse(enc, decoder.state_dict(), holdout)
    params = list(enc.parameters()) + list(decoder.parameters())
    opt = torch.optim.Adam(params, lr=lr)
    for step in range(steps):
        idx = torch.randint(len(images), (batch_size,), generator=g)
        batch = images[idx]
        recon = decoder(enc(batch))
        loss = ((recon - enc.patchify(batch)) ** 2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        if log is not None:
            log(step, loss.item())
    enc.calibrate_latents(images[:calib_size])
    enc.decoder_state = {k: v.detach().clone() for k, v in decoder.state_dict().items()}
    if holdout is not None:
        report["final_mse"] = reconstruction_mse(enc, enc.decoder_state, holdout)
    enc.pretrain_report = report
    return enc.freeze()


def reconstruction_mse(enc: ToyEncoder, decoder_state: dict, images) -> float:
    c = enc.cfg
    decoder = nn.Linear(c.token_dim, c.patch * c.patch)
    decoder.load_state_dict(decoder_state)
    images = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    with torch.no_grad():
        return float(((decoder(enc(images)) - enc.patchify(images)) ** 2).mean())


def encoder_to_flat(enc: ToyEncoder, prefix: str = "encoder."):
    """(config entries, tensors) describing ``enc`` for the checkpoint container."""
    config = {f"{prefix}{k}": v for k, v in enc.cfg.to_dict().items()}
    config[f"{prefix}injections"] = ";".join(inj.to_text() for inj in enc.injections)
    config[f"{prefix}frozen"] = bool(enc.frozen)
    tensors = {f"{prefix}{k}": v for k, v in enc.state_dict().items()}
    for k, v in getattr(enc, "decoder_state", {}).items():
        tensors[f"{prefix}decoder.{k}"] = v
    return config, tensors


def encoder_from_flat(config: dict, tensors: dict, prefix: str = "encoder.") -> ToyEncoder:
    cfg = EncoderConfig.from_dict({k[len(prefix):]: v for k, v in config.items()
                                   if k.startswith(prefix)})
    enc = ToyEncoder(cfg)
    own = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    decoder = {k[len("decoder."):]: v for k, v in own.items() if k.startswith("decoder.")}
    enc.load_state_dict({k: v for k, v in own.items() if not k.startswith("decoder.")})
    if decoder:
        enc.decoder_state = decoder
    inj_text = config.get(f"{prefix}injections", "")
    enc.injections = tuple(OutlierInjection.from_text(t) for t in inj_text.split(";") if t)
    if str(config.get(f"{prefix}frozen", "true")).lower() == "true":
        enc.freeze()
    return enc
