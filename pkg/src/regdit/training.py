"""Norm-masked v-loss, the training loop and checkpoint round-trips.

The denoiser predicts clean latents; predictions and targets are turned into
velocities and compared with the per-token squared error, optionally
restricted to tokens whose clean-latent norm is at most ``tau``.
"""
from __future__ import annotations

import copy
import csv
import io
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .checkpoint import Container, prefixed, strip_prefix
from .diffusion import T_MAX_CLAMP, sample_t, v_target, x_to_v
from .encoder import ToyEncoder, encoder_from_flat, encoder_to_flat
from .exceptions import ConfigError, DegenerateBatchError, FormatError, NonFiniteError
from .model import ModelConfig, RegisterConfig, RegisterDiT, build_model

METRIC_FIELDS = ("step", "loss", "grad_norm", "filtered_fraction", "lr")


# -- masking and loss ------------------------------------------------------

@dataclass
class NormMask:
    m: torch.Tensor       # (N,) of 0/1 in the dtype of the latents
    tau: float

    @property
    def filtered_fraction(self) -> float:
        n = self.m.numel()
        return 1.0 - float(self.m.sum()) / n if n else 0.0


def norm_mask(z0: torch.Tensor, tau: float) -> NormMask:
    """``m_i = 1`` iff ``||z0_i|| <= tau``; ``tau = inf`` keeps everything."""
    tau = float(tau)
    if not (tau > 0 or math.isinf(tau)):
        raise ConfigError(f"tau must be positive or inf, got {tau}")
    z0 = torch.as_tensor(z0)
    norms = z0.norm(dim=-1)
    return NormMask((norms <= tau).to(z0.dtype if z0.is_floating_point() else torch.float64), tau)


def per_token_error(v_hat: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    d = v_hat - v
    return (d * d).sum(dim=-1)


def plain_v_loss(v_hat: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    err = per_token_error(v_hat, v)
    return err.sum() / err.shape[-1]


def masked_v_loss(v_hat: torch.Tensor, v: torch.Tensor, mask) -> torch.Tensor:
    """``sum_i m_i ||v_hat_i - v_i||^2 / sum_i m_i`` over the N tokens of one sample."""
    m = mask.m if isinstance(mask, NormMask) else torch.as_tensor(mask)
    m = m.to(v_hat.dtype)
    kept = m.sum()
    if float(kept) == 0.0:
        raise DegenerateBatchError("every token is masked")
    return (per_token_error(v_hat, v) * m).sum() / kept


def percentile_tau(latents: torch.Tensor, percentile: float) -> float:
    """Token-norm threshold at ``percentile`` (0-100) of the calibration latents."""
    norms = torch.as_tensor(latents).reshape(-1, latents.shape[-1]).double().norm(dim=-1)
    return float(np.percentile(norms.numpy(), percentile))


# -- configuration ---------------------------------------------------------

@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 4
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.0
    warmup: int = 0
    seed: int = 0
    tau: float | None = None
    tau_percentile: float | None = None
    ema_decay: float | None = None
    t_policy: str = "logit_normal"
    registers: RegisterConfig = field(default_factory=RegisterConfig)
    conditioning: str = "adaln"

    def validate(self) -> "TrainConfig":
        problems = []
        if self.steps < 0 or self.batch_size < 1:
            problems.append("steps >= 0 and batch_size >= 1 required")
        if self.lr <= 0:
            problems.append("lr must be positive")
        if self.tau is not None and self.tau_percentile is not None:
            problems.append("give tau or tau_percentile, not both")
        if self.tau is not None and not (self.tau > 0):
            problems.append("tau must be positive (inf disables masking)")
        if self.tau_percentile is not None and not 0 < self.tau_percentile <= 100:
            problems.append("tau_percentile must lie in (0, 100]")
        if self.ema_decay is not None and not 0 < self.ema_decay < 1:
            problems.append("ema_decay must lie in (0, 1)")
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        reg = d.pop("registers")
        d["registers.count"] = reg["count"]
        d["registers.start_block"] = reg["start_block"]
        return {k: ("none" if v is None else v) for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        def opt_float(v):
            return None if v is None or str(v).lower() in ("none", "") else float(v)

        kinds = {"steps": int, "batch_size": int, "lr": float, "beta1": float, "beta2": float,
                 "eps": float, "weight_decay": float, "warmup": int, "seed": int,
                 "tau": opt_float, "tau_percentile": opt_float, "ema_decay": opt_float,
                 "t_policy": str, "conditioning": str}
        kw = {k: kinds[k](v) for k, v in d.items() if k in kinds}
        reg = RegisterConfig(int(d.get("registers.count", 36)), int(d.get("registers.start_block", 2)))
        return cls(registers=reg, **kw)


# -- data ------------------------------------------------------------------

@dataclass
class LatentData:
    """Normalized encoder latents (B, N, d) with labels and the stats used."""

    latents: torch.Tensor
    labels: torch.Tensor
    mean: torch.Tensor
    std: torch.Tensor


def latent_stats(enc: ToyEncoder, images, chunk: int = 512):
    z = raw_latents(enc, images, chunk).reshape(-1, enc.cfg.token_dim)
    return z.mean(0), z.std(0, unbiased=False).clamp_min(1e-6)


def raw_latents(enc: ToyEncoder, images, chunk: int = 512) -> torch.Tensor:
    images = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    with torch.no_grad():
        return torch.cat([enc(images[i:i + chunk]) for i in range(0, len(images), chunk)])


def encode_dataset(enc: ToyEncoder, dataset, stats=None) -> LatentData:
    """Encode and standardize; stats default to the dataset's own per-channel moments."""
    z = raw_latents(enc, dataset.images)
    if stats is None:
        flat = z.reshape(-1, z.shape[-1])
        stats = (flat.mean(0), flat.std(0, unbiased=False).clamp_min(1e-6))
    mean, std = stats
    return LatentData((z - mean) / std, torch.as_tensor(dataset.labels), mean, std)


# -- training --------------------------------------------------------------

def step_generator(seed: int, step: int) -> torch.Generator:
    """Independent stream for one optimizer step, derived from (seed, step) only."""
    state = np.random.SeedSequence([int(seed), int(step)]).generate_state(2, dtype=np.uint64)
    return torch.Generator().manual_seed(int(state[0] % (2 ** 63)))


def lr_at(cfg: TrainConfig, step: int) -> float:
    if cfg.warmup > 0 and step < cfg.warmup:
        return cfg.lr * (step + 1) / cfg.warmup
    return cfg.lr


@dataclass
class TrainState:
    model: RegisterDiT
    optimizer: torch.optim.Optimizer
    step: int = 0
    ema: RegisterDiT | None = None
    tau: float | None = None
    skipped_samples: int = 0


def make_optimizer(model: RegisterDiT, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(model.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2),
                             eps=cfg.eps, weight_decay=cfg.weight_decay)


def init_state(model_cfg: ModelConfig, cfg: TrainConfig) -> TrainState:
    model = build_model(model_cfg, seed=cfg.seed)
    ema = copy.deepcopy(model) if cfg.ema_decay is not None else None
    if ema is not None:
        ema.requires_grad_(False)
    return TrainState(model, make_optimizer(model, cfg), 0, ema)


def resolve_tau(cfg: TrainConfig, data: LatentData) -> float | None:
    if cfg.tau_percentile is not None:
        return percentile_tau(data.latents, cfg.tau_percentile)
    return cfg.tau


def batch_loss(model: RegisterDiT, z0, y, t, eps, tau):
    """Mean over usable samples of the (masked) v-loss; also kept/filtered counts."""
    z_t = t.view(-1, 1, 1) * z0 + (1.0 - t.view(-1, 1, 1)) * eps
    z0_hat = model(z_t, t, y)
    v_hat = x_to_v(z0_hat, z_t, t)
    v = v_target(z0, z_t, t)
    losses, filtered, tokens, skipped = [], 0.0, 0, 0
    for b in range(z0.shape[0]):
        if tau is None:
            losses.append(plain_v_loss(v_hat[b], v[b]))
            tokens += z0.shape[1]
            continue
        mask = norm_mask(z0[b], tau)
        filtered += float(z0.shape[1] - mask.m.sum())
        tokens += z0.shape[1]
        try:
            losses.append(masked_v_loss(v_hat[b], v[b], mask))
        except DegenerateBatchError:
            skipped += 1
    loss = torch.stack(losses).mean() if losses else None
    return loss, (filtered / tokens if tokens else 0.0), skipped


def train_steps(state: TrainState, cfg: TrainConfig, data: LatentData, until: int,
                log=None) -> list:
    """Advance ``state`` to step ``until``; returns metric rows for the new steps."""
    rows = []
    model, opt = state.model, state.optimizer
    n = len(data.latents)
    params = [p for p in model.parameters() if p.requires_grad]
    while state.step < until:
        step = state.step
        g = step_generator(cfg.seed, step)
        idx = torch.randint(n, (cfg.batch_size,), generator=g)
        t = sample_t(g, cfg.t_policy, cfg.batch_size, T_MAX_CLAMP, dtype=data.latents.dtype)
        z0 = data.latents[idx]
        eps = torch.randn(z0.shape, generator=g, dtype=z0.dtype)
        y = data.labels[idx]
        lr = lr_at(cfg, step)
        for group in opt.param_groups:
            group["lr"] = lr
        loss, filtered, skipped = batch_loss(model, z0, y, t, eps, state.tau)
        state.skipped_samples += skipped
        opt.zero_grad(set_to_none=True)
        if loss is None:
            grad_norm, loss_value = 0.0, 0.0
        else:
            loss_value = float(loss.detach())
            if not math.isfinite(loss_value):
                raise NonFiniteError(step + 1, "loss")
            loss.backward()
            grads = [p.grad for p in params if p.grad is not None]
            grad_norm = float(torch.sqrt(sum((gr.double() ** 2).sum() for gr in grads)))
            if not math.isfinite(grad_norm):
                raise NonFiniteError(step + 1, "gradient")
            opt.step()
            if state.ema is not None:
                with torch.no_grad():
                    for pe, p in zip(state.ema.parameters(), model.parameters()):
                        pe.mul_(cfg.ema_decay).add_(p, alpha=1.0 - cfg.ema_decay)
        state.step += 1
        row = {"step": state.step, "loss": loss_value, "grad_norm": grad_norm,
               "filtered_fraction": filtered, "lr": lr}
        rows.append(row)
        if log is not None:
            log(row)
    return rows


def metrics_csv(rows, header: bool = True) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if header:
        w.writerow(METRIC_FIELDS)
    for r in rows:
        w.writerow([r["step"]] + [repr(float(r[k])) for k in METRIC_FIELDS[1:]])
    return buf.getvalue()


def read_metrics_csv(path: str) -> list:
    with open(path) as fh:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in r.items()}
                for r in csv.DictReader(fh)]


@dataclass
class TrainResult:
    state: TrainState
    rows: list
    data: LatentData
    encoder: ToyEncoder
    model_cfg: ModelConfig
    cfg: TrainConfig


def model_config_for(cfg: TrainConfig, base: ModelConfig | None = None,
                     token_dim: int | None = None, token_count: int | None = None) -> ModelConfig:
    base = copy.deepcopy(base or ModelConfig())
    base.registers = copy.deepcopy(cfg.registers)
    base.conditioning = cfg.conditioning
    if token_dim is not None:
        base.token_dim = token_dim
    if token_count is not None:
        base.token_count = token_count
    return base.validate()


def train(cfg: TrainConfig, dataset, encoder: ToyEncoder, model_cfg: ModelConfig | None = None,
          log=None, data: LatentData | None = None) -> TrainResult:
    """Train a denoiser on standardized encoder latents of ``dataset``."""
    cfg.validate()
    data = data or encode_dataset(encoder, dataset)
    mcfg = model_config_for(cfg, model_cfg, encoder.cfg.token_dim, encoder.cfg.n_tokens)
    state = init_state(mcfg, cfg)
    state.tau = resolve_tau(cfg, data)
    rows = train_steps(state, cfg, data, cfg.steps, log)
    return TrainResult(state, rows, data, encoder, mcfg, cfg)


# -- checkpoints -----------------------------------------------------------

@dataclass
class Checkpoint:
    model_cfg: ModelConfig
    train_cfg: TrainConfig
    step: int
    model_state: dict
    optimizer_state: dict
    ema_state: dict | None
    encoder: ToyEncoder
    latent_mean: torch.Tensor
    latent_std: torch.Tensor
    tau: float | None = None
    skipped_samples: int = 0

    def build_model(self, use_ema: bool = True) -> RegisterDiT:
        model = RegisterDiT(self.model_cfg)
        state = self.ema_state if (use_ema and self.ema_state is not None) else self.model_state
        model.load_state_dict(state)
        return model


def to_checkpoint(result_or_state, cfg: TrainConfig = None, model_cfg: ModelConfig = None,
                  encoder: ToyEncoder = None, data: LatentData = None) -> Checkpoint:
    if isinstance(result_or_state, TrainResult):
        r = result_or_state
        state, cfg, model_cfg, encoder, data = r.state, r.cfg, r.model_cfg, r.encoder, r.data
    else:
        state = result_or_state
    opt = state.optimizer.state_dict()
    names = [n for n, _ in state.model.named_parameters()]
    moments = {}
    for i, name in enumerate(names):
        s = opt["state"].get(i)
        if s:
            moments[f"{name}.exp_avg"] = s["exp_avg"].detach().clone()
            moments[f"{name}.exp_avg_sq"] = s["exp_avg_sq"].detach().clone()
            # differs from the training step when fully masked batches skipped an update
            moments[f"{name}.step"] = torch.as_tensor(s["step"], dtype=torch.float32).clone()
    return Checkpoint(
        model_cfg, cfg, state.step,
        {k: v.detach().clone() for k, v in state.model.state_dict().items()},
        moments,
        None if state.ema is None else {k: v.detach().clone() for k, v in state.ema.state_dict().items()},
        encoder, data.mean.clone(), data.std.clone(), state.tau, state.skipped_samples)


def checkpoint_container(ck: Checkpoint) -> Container:
    config = {"kind": "denoiser", "step": ck.step, "skipped_samples": ck.skipped_samples,
              "tau.resolved": "none" if ck.tau is None else float(ck.tau),
              "rng.seed": ck.train_cfg.seed, "rng.step": ck.step}
    config.update(prefixed("model.", ck.model_cfg.to_dict()))
    config.update(prefixed("train.", ck.train_cfg.to_dict()))
    enc_cfg, enc_tensors = encoder_to_flat(ck.encoder)
    config.update(enc_cfg)
    tensors = {}
    tensors.update(prefixed("model.", ck.model_state))
    tensors.update(prefixed("adam.", ck.optimizer_state))
    if ck.ema_state is not None:
        tensors.update(prefixed("ema.", ck.ema_state))
    tensors["latent.mean"] = ck.latent_mean
    tensors["latent.std"] = ck.latent_std
    tensors.update(enc_tensors)
    return Container(config, tensors)


def save_checkpoint(ck: Checkpoint, path: str) -> str:
    return checkpoint_container(ck).save(path)


def checkpoint_from_container(c: Container) -> Checkpoint:
    cfg = c.config
    if cfg.get("kind") != "denoiser":
        raise FormatError(f"expected a denoiser checkpoint, got kind={cfg.get('kind')!r}")
    model_cfg = ModelConfig.from_dict(strip_prefix("model.", cfg))
    train_cfg = TrainConfig.from_dict(strip_prefix("train.", cfg))
    tau_text = cfg.get("tau.resolved", "none")
    return Checkpoint(
        model_cfg, train_cfg, int(cfg["step"]),
        strip_prefix("model.", c.tensors), strip_prefix("adam.", c.tensors),
        strip_prefix("ema.", c.tensors) or None,
        encoder_from_flat(cfg, c.tensors),
        c.tensors["latent.mean"], c.tensors["latent.std"],
        None if tau_text == "none" else float(tau_text), int(cfg.get("skipped_samples", 0)))


def load_checkpoint(path: str) -> Checkpoint:
    return checkpoint_from_container(Container.load(path))


def resume_state(ck: Checkpoint) -> TrainState:
    """Rebuild model, AdamW moments, EMA and step counter from a checkpoint."""
    cfg = ck.train_cfg
    model = RegisterDiT(ck.model_cfg)
    model.load_state_dict(ck.model_state)
    opt = make_optimizer(model, cfg)
    names = [n for n, _ in model.named_parameters()]
    if ck.optimizer_state:
        sd = opt.state_dict()
        for i, name in enumerate(names):
            if f"{name}.exp_avg" in ck.optimizer_state:
                sd["state"][i] = {
                    "step": ck.optimizer_state.get(
                        f"{name}.step", torch.tensor(float(ck.step))).float().clone(),
                    "exp_avg": ck.optimizer_state[f"{name}.exp_avg"].clone(),
                    "exp_avg_sq": ck.optimizer_state[f"{name}.exp_avg_sq"].clone(),
                }
        opt.load_state_dict(sd)
    ema = None
    if ck.ema_state is not None:
        ema = RegisterDiT(ck.model_cfg)
        ema.load_state_dict(ck.ema_state)
        ema.requires_grad_(False)
    return TrainState(model, opt, ck.step, ema, ck.tau, ck.skipped_samples)


def resume(ck: Checkpoint, dataset, until: int, log=None):
    """Continue training from ``ck`` to step ``until``; returns (state, rows, data)."""
    data = encode_dataset(ck.encoder, dataset, stats=(ck.latent_mean, ck.latent_std))
    state = resume_state(ck)
    rows = train_steps(state, ck.train_cfg, data, until, log)
    return state, rows, data
