"""scikit-learn style wrappers around the encoder, test-time registers and denoiser.

Images enter as (n_samples, H*W) or (n_samples, H, W) arrays; latents leave
as (n_samples, N*d) rows so they compose with ordinary sklearn tooling.
"""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .encoder import EncoderConfig, encode, pretrain_toy_encoder
from .metrics import mmd
from .sampling import sample_latents
from .model import ModelConfig, RegisterConfig
from .ttr import OutlierCriterion, recursive_ttr
from .training import LatentData, TrainConfig, to_checkpoint, train


def _images(X, image_size: int) -> np.ndarray:
    X = check_array(X, allow_nd=True, dtype=np.float32)
    if X.ndim == 2:
        if X.shape[1] != image_size * image_size:
            raise ValueError(f"expected {image_size * image_size} pixels per row, got {X.shape[1]}")
        X = X.reshape(-1, image_size, image_size)
    if X.ndim != 3 or X.shape[1:] != (image_size, image_size):
        raise ValueError(f"expected images of shape (n, {image_size}, {image_size})")
    return X


class ToyEncoderTransformer(TransformerMixin, BaseEstimator):
    """Pretrain a toy encoder on ``fit``; ``transform`` returns flattened latents."""

    def __init__(self, steps=150, seed=0, image_size=32, patch=4, width=64, depth=4,
                 token_dim=16, normalize=True):
        self.steps = steps
        self.seed = seed
        self.image_size = image_size
        self.patch = patch
        self.width = width
        self.depth = depth
        self.token_dim = token_dim
        self.normalize = normalize

    def fit(self, X, y=None):
        imgs = _images(X, self.image_size)
        cfg = EncoderConfig(image_size=self.image_size, patch=self.patch, width=self.width,
                            depth=self.depth, token_dim=self.token_dim)
        self.encoder_ = pretrain_toy_encoder(imgs, steps=self.steps, seed=self.seed, cfg=cfg)
        self.n_features_in_ = self.image_size * self.image_size
        return self

    def transform(self, X):
        check_is_fitted(self, "encoder_")
        z = encode(self.encoder_, _images(X, self.image_size), normalize=self.normalize)
        return z.reshape(z.shape[0], -1).numpy()


class TestTimeRegisters(TransformerMixin, BaseEstimator):
    """Fit recursive test-time registers to a frozen encoder on calibration images."""

    __test__ = False  # not a pytest class despite the name

    def __init__(self, encoder=None, factor=2.0, max_iters=4, top_k=3, normalize=True):
        self.encoder = encoder
        self.factor = factor
        self.max_iters = max_iters
        self.top_k = top_k
        self.normalize = normalize

    def fit(self, X, y=None):
        if self.encoder is None:
            raise ValueError("TestTimeRegisters needs an encoder")
        imgs = _images(X, self.encoder.cfg.image_size)
        self.patched_, self.report_ = recursive_ttr(
            self.encoder, imgs, OutlierCriterion(self.factor), self.max_iters, self.top_k)
        self.n_features_in_ = imgs.shape[1] * imgs.shape[2]
        return self

    def transform(self, X):
        check_is_fitted(self, "patched_")
        imgs = torch.as_tensor(_images(X, self.encoder.cfg.image_size))
        with torch.no_grad():
            z = self.patched_(imgs, normalize=self.normalize)
        return z.reshape(z.shape[0], -1).numpy()


class RegisterDiTGenerator(BaseEstimator):
    """Train the denoiser on flattened latents ``X`` with class labels ``y``."""

    def __init__(self, encoder=None, steps=2000, batch_size=4, lr=1e-3, seed=0,
                 registers=36, register_start=2, conditioning="adaln", depth=8, width=256,
                 heads=8, mask_tau=None, t_policy="logit_normal", sample_steps=50):
        self.encoder = encoder
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed
        self.registers = registers
        self.register_start = register_start
        self.conditioning = conditioning
        self.depth = depth
        self.width = width
        self.heads = heads
        self.mask_tau = mask_tau
        self.t_policy = t_policy
        self.sample_steps = sample_steps

    def fit(self, X, y):
        if self.encoder is None:
            raise ValueError("RegisterDiTGenerator needs the encoder that produced X")
        X = check_array(X, dtype=np.float32)
        y = np.asarray(y, dtype=np.int64)
        if len(y) != len(X):
            raise ValueError("X and y lengths differ")
        n_tok, d = self.encoder.cfg.n_tokens, self.encoder.cfg.token_dim
        if X.shape[1] != n_tok * d:
            raise ValueError(f"expected {n_tok * d} features per row, got {X.shape[1]}")
        lat = torch.from_numpy(X.reshape(-1, n_tok, d))
        data = LatentData(lat, torch.from_numpy(y), torch.zeros(d), torch.ones(d))
        cfg = TrainConfig(steps=self.steps, batch_size=self.batch_size, lr=self.lr, seed=self.seed,
                          tau=self.mask_tau, t_policy=self.t_policy,
                          registers=RegisterConfig(self.registers, self.register_start),
                          conditioning=self.conditioning)
        mcfg = ModelConfig(depth=self.depth, width=self.width, heads=self.heads,
                           class_count=int(y.max()) + 1)
        result = train(cfg, None, self.encoder, mcfg, data=data)
        self.checkpoint_ = to_checkpoint(result)
        self.loss_curve_ = [r["loss"] for r in result.rows]
        self.n_features_in_ = X.shape[1]
        return self

    def sample(self, n, class_id=None, seed=0):
        """Draw ``n`` latents as (n, N*d) rows."""
        check_is_fitted(self, "checkpoint_")
        z, _ = sample_latents(self.checkpoint_, n, self.sample_steps, class_id, seed)
        return z.reshape(n, -1).numpy()

    def score(self, X, y=None):
        """Negative MMD between ``len(X)`` samples and ``X`` (higher is better)."""
        X = check_array(X, dtype=np.float32)
        return -mmd(self.sample(len(X), seed=self.seed), X)
