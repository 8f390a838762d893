"""Euler sampling from a checkpoint and the matching evaluation latents."""
from __future__ import annotations

import torch

from .data import make_splits
from .diffusion import euler_sample
from .training import Checkpoint, encode_dataset


def sample_latents(ck: Checkpoint, n: int, steps: int, class_id, seed: int) -> tuple:
    """``n`` latents (EMA weights when present); classes cycle when ``class_id`` is None."""
    model = ck.build_model(use_ema=True)
    model.eval()
    C = ck.model_cfg.class_count
    if class_id is None:
        classes = torch.arange(n) % C
    else:
        classes = torch.full((n,), int(class_id))
    gen = torch.Generator().manual_seed(int(seed))
    shape = (n, ck.model_cfg.token_count, ck.model_cfg.token_dim)
    z = euler_sample(lambda z, t, c: model(z, t, c), classes, steps, gen, shape)
    return z, classes


def eval_latents(ck, data_seed: int, n_eval: int) -> torch.Tensor:
    _, eval_split = make_splits(data_seed, n_train=1, n_eval=n_eval)
    return encode_dataset(ck.encoder, eval_split, stats=(ck.latent_mean, ck.latent_std)).latents
