"""Scikit-learn style estimators wrapping the two upscaler training paths.

Both estimators follow the sklearn contract: constructors only record
hyperparameters, `fit` creates trailing-underscore attributes, and
`get_params` / `set_params` / `clone` work out of the box via BaseEstimator.
`X` in `fit` is a dataset manifest (object or path); `X` in `predict` is one
LR image (C, h, w) or a batch (N, C, h, w) in [0, 1].
"""

from __future__ import annotations

from typing import Union

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .data import PairBatcher
from .diffusion import DiffTrainConfig, DiffusionTrainer, upscale_with_diffusion
from .gan import FixedConvFeatureExtractor, GanTrainConfig, GanTrainer, upscale_with_gan
from .images import DatasetManifest
from .nets import DiscriminatorConfig, UNetConfig, UNetDiscriminator, build_backbone
from .samplers import parse_sampler_spec

__all__ = ["GanUpscaler", "DiffusionUpscaler"]

ManifestLike = Union[DatasetManifest, str]


def _resolve_manifest(X: ManifestLike) -> DatasetManifest:
    if isinstance(X, DatasetManifest):
        return X
    return DatasetManifest.load(X)


def _as_batch(X: np.ndarray) -> tuple[np.ndarray, bool]:
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 3:
        return arr[None], True
    if arr.ndim == 4:
        return arr, False
    raise ValueError(f"expected (C, h, w) or (N, C, h, w), got shape {arr.shape}")


class GanUpscaler(BaseEstimator):
    """Single-step upscaler: L1 pretraining plus optional adversarial steps."""

    def __init__(
        self,
        scale: int = 4,
        width_multiplier: float = 1 / 16,
        res_blocks: tuple[int, ...] = (1, 2, 2, 2),
        l1_steps: int = 100,
        adversarial_steps: int = 0,
        batch_size: int = 4,
        base_seed: int = 0,
        lr_pretrain: float = 2e-4,
        lr_adversarial: float = 1e-4,
        warmup_steps: int = 1000,
        ema_decay: float = 0.999,
        use_ema: bool = True,
        use_perceptual: bool = False,
        discriminator_channels: int = 128,
    ):
        self.scale = scale
        self.width_multiplier = width_multiplier
        self.res_blocks = res_blocks
        self.l1_steps = l1_steps
        self.adversarial_steps = adversarial_steps
        self.batch_size = batch_size
        self.base_seed = base_seed
        self.lr_pretrain = lr_pretrain
        self.lr_adversarial = lr_adversarial
        self.warmup_steps = warmup_steps
        self.ema_decay = ema_decay
        self.use_ema = use_ema
        self.use_perceptual = use_perceptual
        self.discriminator_channels = discriminator_channels

    def fit(self, X: ManifestLike, y=None) -> "GanUpscaler":
        manifest = _resolve_manifest(X)
        torch.manual_seed(self.base_seed)
        generator = build_backbone(
            UNetConfig(
                mode="generator",
                width_multiplier=self.width_multiplier,
                res_blocks=tuple(self.res_blocks),
            )
        )
        config = GanTrainConfig(
            lr_pretrain=self.lr_pretrain,
            lr_adv_generator=self.lr_adversarial,
            lr_adv_discriminator=self.lr_adversarial,
            warmup_steps=self.warmup_steps,
            ema_decay=self.ema_decay,
        )
        extractor = (
            FixedConvFeatureExtractor(seed=self.base_seed) if self.use_perceptual else None
        )
        trainer = GanTrainer(generator, config, feature_extractor=extractor)
        batcher = PairBatcher(manifest, self.batch_size, base_seed=self.base_seed)
        history = []
        for step in range(self.l1_steps):
            _, lr_up, hr = batcher.batch_at(step)
            history.append(trainer.l1_step(lr_up, hr))
        if self.adversarial_steps > 0:
            torch.manual_seed(self.base_seed + 1)
            trainer.begin_adversarial(
                UNetDiscriminator(
                    DiscriminatorConfig(base_channels=self.discriminator_channels)
                )
            )
            for step in range(self.adversarial_steps):
                _, lr_up, hr = batcher.batch_at(self.l1_steps + step)
                history.append(trainer.adversarial_step(lr_up, hr))
        self.generator_ = generator
        self.trainer_ = trainer
        self.history_ = history
        self.n_steps_ = self.l1_steps + self.adversarial_steps
        return self

    def predict(self, X: np.ndarray) -> np.ndarray:
        if not hasattr(self, "generator_"):
            raise NotFittedError("GanUpscaler is not fitted; call fit first")
        batch, single = _as_batch(X)
        ema = self.trainer_.ema if self.use_ema else None
        out = np.stack(
            [upscale_with_gan(self.generator_, im, self.scale, ema=ema) for im in batch]
        )
        return out[0] if single else out


class DiffusionUpscaler(BaseEstimator):
    """Iterative upscaler: epsilon-prediction training plus ODE sampling."""

    def __init__(
        self,
        scale: int = 4,
        width_multiplier: float = 1 / 16,
        res_blocks: tuple[int, ...] = (1, 2, 2, 2),
        train_steps: int = 100,
        batch_size: int = 4,
        base_seed: int = 0,
        lr: float = 3e-5,
        warmup_steps: int = 1000,
        ema_decay: float = 0.999,
        use_ema: bool = True,
        sampler: str = "dpmpp_2m:13",
        sample_seed: int = 0,
    ):
        self.scale = scale
        self.width_multiplier = width_multiplier
        self.res_blocks = res_blocks
        self.train_steps = train_steps
        self.batch_size = batch_size
        self.base_seed = base_seed
        self.lr = lr
        self.warmup_steps = warmup_steps
        self.ema_decay = ema_decay
        self.use_ema = use_ema
        self.sampler = sampler
        self.sample_seed = sample_seed

    def fit(self, X: ManifestLike, y=None) -> "DiffusionUpscaler":
        manifest = _resolve_manifest(X)
        torch.manual_seed(self.base_seed)
        denoiser = build_backbone(
            UNetConfig(
                mode="denoiser",
                width_multiplier=self.width_multiplier,
                res_blocks=tuple(self.res_blocks),
            )
        )
        config = DiffTrainConfig(
            lr=self.lr, warmup_steps=self.warmup_steps, ema_decay=self.ema_decay
        )
        trainer = DiffusionTrainer(denoiser, config, base_seed=self.base_seed)
        batcher = PairBatcher(manifest, self.batch_size, base_seed=self.base_seed)
        history = []
        for step in range(self.train_steps):
            _, lr_up, hr = batcher.batch_at(step)
            history.append(trainer.train_step(lr_up, hr))
        self.denoiser_ = denoiser
        self.trainer_ = trainer
        self.history_ = history
        self.n_steps_ = self.train_steps
        return self

    def predict(self, X: np.ndarray) -> np.ndarray:
        out, _ = self.predict_with_nfe(X)
        return out

    def predict_with_nfe(self, X: np.ndarray) -> tuple[np.ndarray, int]:
        """Predict and also report the number of denoiser evaluations."""
        if not hasattr(self, "denoiser_"):
            raise NotFittedError("DiffusionUpscaler is not fitted; call fit first")
        batch, single = _as_batch(X)
        ema = self.trainer_.ema if self.use_ema else None
        out, nfe = upscale_with_diffusion(
            self.denoiser_,
            batch,
            parse_sampler_spec(self.sampler),
            schedule=self.trainer_.schedule,
            scale=self.scale,
            seed=self.sample_seed,
            ema=ema,
        )
        return (out[0] if single else out), nfe
