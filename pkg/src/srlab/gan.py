"""Single-step adversarial upscaler: losses and the alternating trainer.

Two stages share one generator and optimizer family:

* reconstruction pretraining — L1 against the ground truth crop;
* adversarial finetuning — L1 plus a non-saturating GAN loss (and an optional
  feature-space perceptual term), alternating one discriminator step with one
  generator step per batch. The discriminator starts from scratch when the
  adversarial stage begins.

Both stages keep an exponential moving average of the generator weights and
use a linear learning-rate warmup followed by a constant rate.
"""

from __future__ import annotations

import copy
import dataclasses
import math
from typing import Optional, Protocol, Sequence

import numpy as np
import torch
from torch import nn

from .data import from_model_range, to_model_range
from .images import resize_bicubic
from .nets import Ema, UNetBackbone, UNetDiscriminator, ema_scope, forward_generator
from .validation import check_positive_int, check_range_pair

__all__ = [
    "PROB_EPS",
    "ADV_LOSS_BOUND",
    "GanTrainConfig",
    "TrainingDiverged",
    "l1_loss",
    "image_logits",
    "d_adv_loss",
    "g_adv_loss",
    "perceptual_loss",
    "FeatureExtractor",
    "FixedConvFeatureExtractor",
    "warmup_lr",
    "check_finite_metrics",
    "GanTrainer",
    "upscale_with_gan",
]

# Discriminator probabilities are clamped to [PROB_EPS, 1 - PROB_EPS] before
# the log, so any single adversarial term is bounded by -log(PROB_EPS).
PROB_EPS = 1e-12
ADV_LOSS_BOUND = -math.log(PROB_EPS)


@dataclasses.dataclass
class GanTrainConfig:
    """Optimizer and loss settings for both GAN training stages."""

    lr_pretrain: float = 2e-4
    lr_adv_generator: float = 1e-4
    lr_adv_discriminator: float = 1e-4
    lr_finetune_generator: float = 1e-5
    lr_finetune_discriminator: float = 1e-6
    adam_betas: tuple[float, float] = (0.9, 0.99)
    warmup_steps: int = 1000
    ema_decay: float = 0.999
    adversarial_weight: float = 1.0
    perceptual_weight: float = 1.0
    perceptual_layer_weights: tuple[float, ...] = (0.1, 0.1, 1.0, 1.0, 1.0)

    def __post_init__(self):
        for name in (
            "lr_pretrain",
            "lr_adv_generator",
            "lr_adv_discriminator",
            "lr_finetune_generator",
            "lr_finetune_discriminator",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        check_range_pair(self.adam_betas, "adam_betas", lo=0.0, hi=1.0)
        check_positive_int(self.warmup_steps, "warmup_steps")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError(f"ema_decay must be in [0, 1), got {self.ema_decay}")


class TrainingDiverged(RuntimeError):
    """Raised when a loss stops being finite; carries the offending metrics."""

    def __init__(self, stage: str, step: int, metrics: dict):
        self.stage = stage
        self.step = step
        self.metrics = metrics
        bad = {k: v for k, v in metrics.items() if not math.isfinite(v)}
        super().__init__(f"non-finite loss at {stage} step {step}: {bad}")


# ---------------------------------------------------------------------------
# Losses


def l1_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return (pred - target).abs().mean()


def image_logits(logits: torch.Tensor) -> torch.Tensor:
    """Collapse per-pixel discriminator logits to one logit per image."""
    if logits.ndim < 2:
        raise ValueError(f"expected batched logits, got shape {tuple(logits.shape)}")
    return logits.flatten(1).mean(dim=1)


def _log_prob(logits: torch.Tensor) -> torch.Tensor:
    return torch.log(torch.sigmoid(image_logits(logits)).clamp(PROB_EPS, 1.0 - PROB_EPS))


def d_adv_loss(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    """Discriminator loss: push real probabilities up ... fake down."""
    real_term = _log_prob(real_logits).mean()
    fake_term = torch.log(
        (1.0 - torch.sigmoid(image_logits(fake_logits))).clamp(PROB_EPS, 1.0 - PROB_EPS)
    ).mean()
    return -(real_term + fake_term)


def g_adv_loss(fake_logits: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator loss: maximize log D on generated images."""
    return -_log_prob(fake_logits).mean()


class FeatureExtractor(Protocol):
    """Maps an image batch to a list of feature tensors, one per layer."""

    def __call__(self, x: torch.Tensor) -> list[torch.Tensor]: ...


def perceptual_loss(
    pred: torch.Tensor,
    target: torch.Tensor,
    extractor: FeatureExtractor,
    weights: Sequence[float] = (0.1, 0.1, 1.0, 1.0, 1.0),
) -> torch.Tensor:
    """Weighted sum of per-layer feature MSEs between pred and target."""
    feats_pred = extractor(pred)
    with torch.no_grad():
        feats_target = extractor(target)
    if len(feats_pred) != len(weights):
        raise ValueError(
            f"extractor returned {len(feats_pred)} layers for {len(weights)} weights"
        )
    total = pred.new_zeros(())
    for w, fp, ft in zip(weights, feats_pred, feats_target):
        total = total + w * ((fp - ft) ** 2).mean()
    return total


class FixedConvFeatureExtractor(nn.Module):
    """Frozen random strided convolutions as a stand-in feature pyramid.

    Weights are seeded and never trained, so the perceptual loss stays
    deterministic and free of external pretrained checkpoints.
    """

    def __init__(self, in_channels: int = 3, layers: int = 5, width: int = 16, seed: int = 0):
        super().__init__()
        check_positive_int(layers, "layers")
        gen = torch.Generator().manual_seed(seed)
        convs = []
        ch = in_channels
        for i in range(layers):
            out_ch = width * min(2**i, 8)
            conv = nn.Conv2d(ch, out_ch, 3, stride=2, padding=1)
            # He-style init from the seeded generator for reproducibility.
            fan_in = ch * 9
            with torch.no_grad():
                conv.weight.copy_(
                    torch.randn(conv.weight.shape, generator=gen) * math.sqrt(2.0 / fan_in)
                )
                conv.bias.zero_()
            convs.append(conv)
            ch = out_ch
        self.convs = nn.ModuleList(convs)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        h = x
        for conv in self.convs:
            h = torch.nn.functional.silu(conv(h))
            feats.append(h)
        return feats


# ---------------------------------------------------------------------------
# Trainer


def warmup_lr(base_lr: float, step: int, warmup_steps: int) -> float:
    """Linear ramp to base_lr over warmup_steps, constant afterwards."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    return base_lr * min(1.0, (step + 1) / warmup_steps)


def _set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def check_finite_metrics(stage: str, step: int, metrics: dict) -> None:
    if not all(math.isfinite(v) for v in metrics.values()):
        raise TrainingDiverged(stage, step, metrics)


class GanTrainer:
    """Alternating GAN trainer over (upscaled-LR, HR) batches in [-1, 1].

    `l1_step` drives the reconstruction stage. `begin_adversarial` attaches a
    fresh discriminator, after which `adversarial_step` runs one discriminator
    update (on detached generator output) and one generator update per call.
    """

    def __init__(
        self,
        generator: UNetBackbone,
        config: Optional[GanTrainConfig] = None,
        feature_extractor: Optional[FeatureExtractor] = None,
    ):
        self.generator = generator
        self.config = config or GanTrainConfig()
        self.feature_extractor = feature_extractor
        self.opt_g = torch.optim.Adam(
            generator.parameters(), lr=self.config.lr_pretrain, betas=self.config.adam_betas
        )
        self.ema = Ema(generator, self.config.ema_decay)
        self.discriminator: Optional[UNetDiscriminator] = None
        self.opt_d: Optional[torch.optim.Optimizer] = None
        self.l1_steps = 0
        self.adv_steps = 0
        self.finetune = False

    def begin_adversarial(
        self, discriminator: UNetDiscriminator, finetune: bool = False
    ) -> None:
        """Attach a freshly initialized discriminator and reset stage counters.

        `finetune=True` selects the lower joint-finetuning learning rates.
        """
        self.discriminator = discriminator
        self.finetune = finetune
        lr_d = (
            self.config.lr_finetune_discriminator
            if finetune
            else self.config.lr_adv_discriminator
        )
        self.opt_d = torch.optim.Adam(
            discriminator.parameters(), lr=lr_d, betas=self.config.adam_betas
        )
        self.adv_steps = 0

    def l1_step(self, lr_up: torch.Tensor, hr: torch.Tensor) -> dict:
        cfg = self.config
        _set_lr(self.opt_g, warmup_lr(cfg.lr_pretrain, self.l1_steps, cfg.warmup_steps))
        pred = forward_generator(self.generator, lr_up)
        loss = l1_loss(pred, hr)
        self.opt_g.zero_grad(set_to_none=True)
        loss.backward()
        self.opt_g.step()
        self.ema.update(self.generator)
        metrics = {"l1": float(loss.detach())}
        check_finite_metrics("l1", self.l1_steps, metrics)
        self.l1_steps += 1
        return metrics

    def adversarial_step(self, lr_up: torch.Tensor, hr: torch.Tensor) -> dict:
        if self.discriminator is None or self.opt_d is None:
            raise RuntimeError("call begin_adversarial() before adversarial_step()")
        cfg = self.config
        step = self.adv_steps
        lr_g_base = cfg.lr_finetune_generator if self.finetune else cfg.lr_adv_generator
        lr_d_base = (
            cfg.lr_finetune_discriminator if self.finetune else cfg.lr_adv_discriminator
        )
        _set_lr(self.opt_g, warmup_lr(lr_g_base, step, cfg.warmup_steps))
        _set_lr(self.opt_d, warmup_lr(lr_d_base, step, cfg.warmup_steps))

        # Discriminator update on detached generator output.
        with torch.no_grad():
            fake_detached = forward_generator(self.generator, lr_up)
        d_loss = d_adv_loss(self.discriminator(hr), self.discriminator(fake_detached))
        self.opt_d.zero_grad(set_to_none=True)
        d_loss.backward()
        self.opt_d.step()

        # Generator update through the refreshed discriminator.
        fake = forward_generator(self.generator, lr_up)
        g_l1 = l1_loss(fake, hr)
        g_adv = g_adv_loss(self.discriminator(fake))
        g_total = g_l1 + cfg.adversarial_weight * g_adv
        metrics = {
            "d_loss": float(d_loss.detach()),
            "g_l1": float(g_l1.detach()),
            "g_adv": float(g_adv.detach()),
        }
        if self.feature_extractor is not None:
            g_perc = perceptual_loss(
                fake, hr, self.feature_extractor, cfg.perceptual_layer_weights
            )
            g_total = g_total + cfg.perceptual_weight * g_perc
            metrics["g_perceptual"] = float(g_perc.detach())
        self.opt_g.zero_grad(set_to_none=True)
        g_total.backward()
        self.opt_g.step()
        self.ema.update(self.generator)
        metrics["g_total"] = float(g_total.detach())
        check_finite_metrics("adversarial", step, metrics)
        self.adv_steps += 1
        return metrics

    def state_dict(self) -> dict:
        state = {
            "generator": self.generator.state_dict(),
            "opt_g": self.opt_g.state_dict(),
            "ema": self.ema.state_dict(),
            "l1_steps": self.l1_steps,
            "adv_steps": self.adv_steps,
            "finetune": self.finetune,
        }
        if self.discriminator is not None and self.opt_d is not None:
            state["discriminator"] = self.discriminator.state_dict()
            state["opt_d"] = self.opt_d.state_dict()
        # Detach from the live tensors so later in-place updates cannot
        # silently rewrite a captured checkpoint.
        return copy.deepcopy(state)

    def load_state_dict(self, state: dict) -> None:
        self.generator.load_state_dict(state["generator"])
        self.opt_g.load_state_dict(state["opt_g"])
        self.ema.load_state_dict(state["ema"])
        self.l1_steps = int(state["l1_steps"])
        self.adv_steps = int(state["adv_steps"])
        self.finetune = bool(state.get("finetune", False))
        if "discriminator" in state:
            if self.discriminator is None or self.opt_d is None:
                raise RuntimeError(
                    "state contains a discriminator; call begin_adversarial() first"
                )
            self.discriminator.load_state_dict(state["discriminator"])
            self.opt_d.load_state_dict(state["opt_d"])


# ---------------------------------------------------------------------------
# Inference


def upscale_with_gan(
    generator: UNetBackbone,
    lr_image: np.ndarray,
    scale: int = 4,
    ema: Optional[Ema] = None,
) -> np.ndarray:
    """Upscale one [0, 1] LR image in a single forward pass.

    When `ema` is given, the shadow weights are swapped in for the forward
    pass and the live weights restored afterwards.
    """
    check_positive_int(scale, "scale")
    c, h, w = lr_image.shape
    lr_up = resize_bicubic(lr_image, (h * scale, w * scale))
    x = to_model_range(lr_up[None])
    was_training = generator.training
    generator.eval()
    try:
        with ema_scope(generator, ema), torch.no_grad():
            out = forward_generator(generator, x)
    finally:
        generator.train(was_training)
    return from_model_range(out)[0]
