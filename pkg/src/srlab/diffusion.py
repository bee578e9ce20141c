"""Epsilon-prediction diffusion upscaler: training loss, trainer, inference.

The denoiser sees the noisy latent concatenated with the bicubic-upscaled LR
condition and predicts the injected noise. Training draws one timestep and one
noise tensor per sample each step, seeded by (base_seed, step) so loss curves
replay exactly. Inference integrates the sampling ODE from pure noise down to
t_min with a configurable sampler and reports the number of function
evaluations alongside the images.
"""

from __future__ import annotations

import copy
import dataclasses
from typing import Optional

import numpy as np
import torch

from .data import from_model_range, to_model_range
from .gan import TrainingDiverged, check_finite_metrics, warmup_lr
from .images import resize_bicubic
from .nets import Ema, UNetBackbone, ema_scope, forward_denoiser
from .samplers import SamplerConfig, sample_latent
from .schedule import NoiseSchedule
from .validation import check_positive_int, check_range_pair

__all__ = [
    "DiffTrainConfig",
    "TrainingDiverged",
    "diffusion_loss",
    "draw_training_noise",
    "DiffusionTrainer",
    "upscale_with_diffusion",
]


@dataclasses.dataclass
class DiffTrainConfig:
    """Optimizer and noise-schedule settings for denoiser training."""

    lr: float = 3e-5
    adam_betas: tuple[float, float] = (0.9, 0.99)
    warmup_steps: int = 1000
    ema_decay: float = 0.999
    t_min_train: float = 1e-5
    beta_min: float = 0.1
    beta_max: float = 20.0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        check_range_pair(self.adam_betas, "adam_betas", lo=0.0, hi=1.0)
        check_positive_int(self.warmup_steps, "warmup_steps")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError(f"ema_decay must be in [0, 1), got {self.ema_decay}")
        if not 0.0 < self.t_min_train < 1.0:
            raise ValueError(f"t_min_train must be in (0, 1), got {self.t_min_train}")

    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule(beta_min=self.beta_min, beta_max=self.beta_max)


def diffusion_loss(
    model: UNetBackbone,
    x0: torch.Tensor,
    cond: torch.Tensor,
    t: torch.Tensor,
    eps: torch.Tensor,
    schedule: NoiseSchedule,
) -> torch.Tensor:
    """MSE between injected and predicted noise at per-sample timesteps.

    `x0` and `cond` are [-1, 1] batches; `t` is a (B,) tensor of timesteps;
    `eps` matches x0's shape.
    """
    if x0.shape != eps.shape:
        raise ValueError(f"x0 {tuple(x0.shape)} and eps {tuple(eps.shape)} must match")
    if t.ndim != 1 or t.shape[0] != x0.shape[0]:
        raise ValueError(f"t must be shape ({x0.shape[0]},), got {tuple(t.shape)}")
    t_np = t.detach().cpu().numpy().astype(np.float64)
    alpha = torch.as_tensor(schedule.alpha(t_np), dtype=x0.dtype).view(-1, 1, 1, 1)
    sigma = torch.as_tensor(schedule.sigma(t_np), dtype=x0.dtype).view(-1, 1, 1, 1)
    z = alpha * x0 + sigma * eps
    eps_hat = forward_denoiser(model, z, cond, t.to(x0.dtype))
    return ((eps - eps_hat) ** 2).mean()


def _step_seed(base_seed: int, step: int) -> int:
    return int(np.random.SeedSequence([base_seed, step]).generate_state(1)[0])


def draw_training_noise(
    shape: tuple[int, ...], t_min: float, base_seed: int, step: int
) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-step deterministic (t, eps) draws: t ~ U[t_min, 1], eps ~ N(0, I)."""
    gen = torch.Generator().manual_seed(_step_seed(base_seed, step))
    t = torch.rand(shape[0], generator=gen, dtype=torch.float64) * (1.0 - t_min) + t_min
    eps = torch.randn(shape, generator=gen, dtype=torch.float32)
    return t, eps


class DiffusionTrainer:
    """Denoiser trainer over (upscaled-LR, HR) batches in [-1, 1]."""

    def __init__(
        self,
        denoiser: UNetBackbone,
        config: Optional[DiffTrainConfig] = None,
        base_seed: int = 0,
    ):
        self.denoiser = denoiser
        self.config = config or DiffTrainConfig()
        self.base_seed = base_seed
        self.schedule = self.config.schedule()
        self.optimizer = torch.optim.Adam(
            denoiser.parameters(), lr=self.config.lr, betas=self.config.adam_betas
        )
        self.ema = Ema(denoiser, self.config.ema_decay)
        self.steps = 0

    def train_step(self, lr_up: torch.Tensor, hr: torch.Tensor) -> dict:
        cfg = self.config
        for group in self.optimizer.param_groups:
            group["lr"] = warmup_lr(cfg.lr, self.steps, cfg.warmup_steps)
        t, eps = draw_training_noise(
            tuple(hr.shape), cfg.t_min_train, self.base_seed, self.steps
        )
        loss = diffusion_loss(self.denoiser, hr, lr_up, t, eps, self.schedule)
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer.step()
        self.ema.update(self.denoiser)
        metrics = {"diff_mse": float(loss.detach())}
        check_finite_metrics("diffusion", self.steps, metrics)
        self.steps += 1
        return metrics

    def state_dict(self) -> dict:
        return copy.deepcopy(
            {
                "denoiser": self.denoiser.state_dict(),
                "optimizer": self.optimizer.state_dict(),
                "ema": self.ema.state_dict(),
                "steps": self.steps,
                "base_seed": self.base_seed,
            }
        )

    def load_state_dict(self, state: dict) -> None:
        self.denoiser.load_state_dict(state["denoiser"])
        self.optimizer.load_state_dict(state["optimizer"])
        self.ema.load_state_dict(state["ema"])
        self.steps = int(state["steps"])
        self.base_seed = int(state["base_seed"])


# ---------------------------------------------------------------------------
# Inference


def upscale_with_diffusion(
    denoiser: UNetBackbone,
    lr_images: np.ndarray,
    sampler: SamplerConfig,
    schedule: Optional[NoiseSchedule] = None,
    scale: int = 4,
    seed: int = 0,
    ema: Optional[Ema] = None,
) -> tuple[np.ndarray, int]:
    """Upscale [0, 1] LR images by iterative denoising from pure noise.

    Accepts one image (C, h, w) or a batch (N, C, h, w) and returns
    (images, nfe) with matching leading shape. The initial latent for batch
    position i is seeded by (seed, i), so batched and one-at-a-time calls see
    identical noise.
    """
    check_positive_int(scale, "scale")
    single = lr_images.ndim == 3
    batch = lr_images[None] if single else lr_images
    n, c, h, w = batch.shape
    hr_hw = (h * scale, w * scale)
    cond = to_model_range(np.stack([resize_bicubic(im, hr_hw) for im in batch]))
    init = np.stack(
        [
            np.random.default_rng([seed, i]).standard_normal((c, *hr_hw))
            for i in range(n)
        ]
    )
    init_t = torch.from_numpy(init).float()
    sched = schedule or NoiseSchedule()
    was_training = denoiser.training
    denoiser.eval()

    def model_fn(z, cond_t, t: float):
        with torch.no_grad():
            t_vec = torch.full((z.shape[0],), t, dtype=z.dtype)
            return forward_denoiser(denoiser, z, cond_t, t_vec)

    try:
        with ema_scope(denoiser, ema):
            z, nfe = sample_latent(model_fn, cond, init_t, sampler, sched)
    finally:
        denoiser.train(was_training)
    out = from_model_range(z)
    return (out[0], nfe) if single else (out, nfe)
