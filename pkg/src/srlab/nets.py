"""Shared U-Net backbone, U-Net discriminator, EMA, and checkpoint IO.

The backbone runs in two modes from one config: `generator` (single forward
pass, no timestep pathway) and `denoiser` (noisy input concatenated with the
condition, timestep embedding active). Cross-attention over an external
embedding sequence attaches only at the lowest resolution; there is no
self-attention anywhere.
"""

from __future__ import annotations

import contextlib
import dataclasses
import math
from typing import Literal, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

__all__ = [
    "UNetConfig",
    "UNetBackbone",
    "build_backbone",
    "forward_generator",
    "forward_denoiser",
    "DiscriminatorConfig",
    "UNetDiscriminator",
    "Ema",
    "ema_update",
    "ema_scope",
    "count_parameters",
    "parameter_parity",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclasses.dataclass
class UNetConfig:
    mode: Literal["generator", "denoiser"] = "generator"
    image_channels: int = 3
    width_multiplier: float = 1.0
    base_channels: tuple[int, ...] = (128, 256, 512, 1024)
    res_blocks: tuple[int, ...] = (2, 4, 8, 8)
    cross_attention: bool = False
    text_embed_dim: int = 64
    attention_heads: int = 4
    groups: int = 8

    def __post_init__(self):
        if self.mode not in ("generator", "denoiser"):
            raise ValueError(f"mode must be generator or denoiser, got {self.mode!r}")
        if self.image_channels not in (1, 3):
            raise ValueError(f"image_channels must be 1 or 3, got {self.image_channels}")
        if len(self.base_channels) != len(self.res_blocks):
            raise ValueError("base_channels and res_blocks must have equal length")
        if not self.base_channels:
            raise ValueError("need at least one resolution level")
        if self.width_multiplier <= 0:
            raise ValueError(f"width_multiplier must be > 0, got {self.width_multiplier}")
        self.base_channels = tuple(int(c) for c in self.base_channels)
        self.res_blocks = tuple(int(n) for n in self.res_blocks)
        if any(n < 1 for n in self.res_blocks):
            raise ValueError("res_blocks entries must be >= 1")

    @property
    def in_channels(self) -> int:
        # denoiser sees noisy image plus channel-concatenated condition
        return self.image_channels * (2 if self.mode == "denoiser" else 1)

    def resolved_channels(self) -> tuple[int, ...]:
        out = []
        for c in self.base_channels:
            scaled = int(round(c * self.width_multiplier / self.groups)) * self.groups
            out.append(max(self.groups, scaled))
        return tuple(out)

    @property
    def stem_channels(self) -> int:
        return max(self.groups, self.resolved_channels()[0] // 2)

    @property
    def time_dim(self) -> int:
        return 4 * self.resolved_channels()[0]

    @property
    def downsample_factor(self) -> int:
        return 2 ** len(self.base_channels)


class TimestepEmbedding(nn.Module):
    """Sinusoidal features of continuous t in [0, 1] followed by a small MLP."""

    SIN_DIM = 64
    T_SCALE = 1000.0  # spreads [0, 1] over the classic discrete-step range

    def __init__(self, out_dim: int):
        super().__init__()
        half = self.SIN_DIM // 2
        freqs = torch.exp(-math.log(10000.0) * torch.arange(half) / max(half - 1, 1))
        self.register_buffer("freqs", freqs)
        self.mlp = nn.Sequential(
            nn.Linear(self.SIN_DIM, out_dim), nn.SiLU(), nn.Linear(out_dim, out_dim)
        )

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        if t.ndim != 1:
            raise ValueError(f"t must be 1-D (batch,), got shape {tuple(t.shape)}")
        ang = self.T_SCALE * t[:, None] * self.freqs[None, :]
        return self.mlp(torch.cat([torch.sin(ang), torch.cos(ang)], dim=1))


class ResBlock(nn.Module):
    """GroupNorm/SiLU/conv x2 with optional timestep scale-shift after norm2."""

    def __init__(self, in_ch: int, out_ch: int, groups: int, time_dim: Optional[int] = None):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.norm2 = nn.GroupNorm(groups, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, 2 * out_ch) if time_dim else None
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, temb: Optional[torch.Tensor] = None) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.norm2(h)
        if self.time_proj is not None:
            if temb is None:
                raise ValueError("denoiser res block needs a timestep embedding")
            scale, shift = self.time_proj(F.silu(temb))[:, :, None, None].chunk(2, dim=1)
            h = h * (1 + scale) + shift
        h = self.conv2(F.silu(h))
        return h + self.skip(x)


class CrossAttention(nn.Module):
    """Multi-head attention from image tokens to an external embedding sequence."""

    def __init__(self, ch: int, ctx_dim: int, heads: int, groups: int):
        super().__init__()
        if ch % heads != 0:
            raise ValueError(f"channels {ch} not divisible by heads {heads}")
        self.heads = heads
        self.norm = nn.GroupNorm(groups, ch)
        self.to_q = nn.Linear(ch, ch)
        self.to_k = nn.Linear(ctx_dim, ch)
        self.to_v = nn.Linear(ctx_dim, ch)
        self.to_out = nn.Linear(ch, ch)

    def forward(self, x: torch.Tensor, ctx: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        tokens = self.norm(x).flatten(2).transpose(1, 2)  # (B, HW, C)
        q = self.to_q(tokens)
        k = self.to_k(ctx)
        v = self.to_v(ctx)

        def split(t):
            return t.view(b, -1, self.heads, c // self.heads).transpose(1, 2)

        attn = F.scaled_dot_product_attention(split(q), split(k), split(v))
        attn = attn.transpose(1, 2).reshape(b, h * w, c)
        out = self.to_out(attn).transpose(1, 2).view(b, c, h, w)
        return x + out


class _Level(nn.Module):
    """One resolution level: a stack of res blocks (module holder)."""

    def __init__(self, blocks):
        super().__init__()
        self.blocks = nn.ModuleList(blocks)

    def forward(self, x, temb):
        for blk in self.blocks:
            x = blk(x, temb)
        return x


class UNetBackbone(nn.Module):
    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.cfg = cfg
        ch = cfg.resolved_channels()
        g = cfg.groups
        tdim = cfg.time_dim if cfg.mode == "denoiser" else None
        self.time_embed = TimestepEmbedding(cfg.time_dim) if tdim else None

        self.stem = nn.Conv2d(cfg.in_channels, cfg.stem_channels, 3, padding=1)

        self.down_convs = nn.ModuleList()
        self.down_levels = nn.ModuleList()
        prev = cfg.stem_channels
        for c, n in zip(ch, cfg.res_blocks):
            self.down_convs.append(nn.Conv2d(prev, c, 3, stride=2, padding=1))
            self.down_levels.append(_Level([ResBlock(c, c, g, tdim) for _ in range(n)]))
            prev = c

        bottom = ch[-1]
        if cfg.cross_attention:
            self.enc_attn = CrossAttention(bottom, cfg.text_embed_dim, cfg.attention_heads, g)
            self.mid_attn = CrossAttention(bottom, cfg.text_embed_dim, cfg.attention_heads, g)
            self.dec_attn = CrossAttention(bottom, cfg.text_embed_dim, cfg.attention_heads, g)
        else:
            self.enc_attn = self.mid_attn = self.dec_attn = None

        self.mid1 = ResBlock(bottom, bottom, g, tdim)
        self.mid2 = ResBlock(bottom, bottom, g, tdim)

        self.up_levels = nn.ModuleList()
        self.up_convs = nn.ModuleList()
        for i in reversed(range(len(ch))):
            c, n = ch[i], cfg.res_blocks[i]
            blocks = [ResBlock(2 * c, c, g, tdim)]
            blocks += [ResBlock(c, c, g, tdim) for _ in range(n - 1)]
            self.up_levels.append(_Level(blocks))
            out_c = ch[i - 1] if i > 0 else cfg.stem_channels
            self.up_convs.append(nn.Conv2d(c, out_c, 3, padding=1))

        self.head_norm = nn.GroupNorm(g, cfg.stem_channels)
        self.head = nn.Conv2d(cfg.stem_channels, cfg.image_channels, 3, padding=1)

    def forward(
        self,
        x: torch.Tensor,
        t: Optional[torch.Tensor] = None,
        text: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        cfg = self.cfg
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ValueError(
                f"expected (B, {cfg.in_channels}, H, W) input, got {tuple(x.shape)}"
            )
        factor = cfg.downsample_factor
        if x.shape[2] % factor or x.shape[3] % factor:
            raise ValueError(f"H and W must be divisible by {factor}, got {tuple(x.shape[2:])}")
        if cfg.mode == "denoiser":
            if t is None:
                raise ValueError("denoiser mode requires timesteps t")
            if t.shape != (x.shape[0],):
                raise ValueError(f"t must have shape ({x.shape[0]},), got {tuple(t.shape)}")
            temb = self.time_embed(t)
        else:
            if t is not None:
                raise ValueError("generator mode takes no timesteps")
            temb = None
        if cfg.cross_attention and text is None:
            raise ValueError("cross_attention enabled but no embedding sequence given")
        if not cfg.cross_attention and text is not None:
            raise ValueError("embedding sequence given but cross_attention disabled")

        h = self.stem(x)
        skips = []
        for i, (down, level) in enumerate(zip(self.down_convs, self.down_levels)):
            h = level(down(h), temb)
            if i == len(self.down_convs) - 1 and self.enc_attn is not None:
                h = self.enc_attn(h, text)
            skips.append(h)

        h = self.mid1(h, temb)
        if self.mid_attn is not None:
            h = self.mid_attn(h, text)
        h = self.mid2(h, temb)

        for j, (level, up_conv) in enumerate(zip(self.up_levels, self.up_convs)):
            skip = skips[len(skips) - 1 - j]
            h = level(torch.cat([h, skip], dim=1), temb)
            if j == 0 and self.dec_attn is not None:
                h = self.dec_attn(h, text)
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = up_conv(h)

        return self.head(F.silu(self.head_norm(h)))


def build_backbone(cfg: UNetConfig) -> UNetBackbone:
    return UNetBackbone(cfg)


def forward_generator(model: UNetBackbone, lr_up: torch.Tensor) -> torch.Tensor:
    """Single-step generator pass on the bicubic-upscaled LR batch."""
    if model.cfg.mode != "generator":
        raise ValueError(f"model mode is {model.cfg.mode!r}, expected generator")
    return model(lr_up)


def forward_denoiser(
    model: UNetBackbone,
    z_t: torch.Tensor,
    cond: torch.Tensor,
    t: torch.Tensor,
    text: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Epsilon prediction from the noisy latent and the upscaled-LR condition."""
    if model.cfg.mode != "denoiser":
        raise ValueError(f"model mode is {model.cfg.mode!r}, expected denoiser")
    if z_t.shape != cond.shape:
        raise ValueError(f"z_t {tuple(z_t.shape)} and cond {tuple(cond.shape)} must match")
    return model(torch.cat([z_t, cond], dim=1), t=t, text=text)


# ---------------------------------------------------------------------------
# Discriminator


@dataclasses.dataclass
class DiscriminatorConfig:
    in_channels: int = 3
    base_channels: int = 128  # twice the classic 64-wide reference
    use_spectral_norm: bool = True

    def __post_init__(self):
        if self.in_channels not in (1, 3):
            raise ValueError(f"in_channels must be 1 or 3, got {self.in_channels}")
        if self.base_channels < 4:
            raise ValueError(f"base_channels too small: {self.base_channels}")


class UNetDiscriminator(nn.Module):
    """U-Net discriminator with skip connections and per-pixel logits.

    Three stride-2 downs, bilinear ups, additive skips; spectral norm wraps
    every conv so each linear operator stays near unit spectral norm.
    """

    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        self.cfg = cfg
        nf = cfg.base_channels
        sn = nn.utils.spectral_norm if cfg.use_spectral_norm else (lambda m: m)
        self.conv0 = sn(nn.Conv2d(cfg.in_channels, nf, 3, 1, 1))
        self.conv1 = sn(nn.Conv2d(nf, nf * 2, 4, 2, 1))
        self.conv2 = sn(nn.Conv2d(nf * 2, nf * 4, 4, 2, 1))
        self.conv3 = sn(nn.Conv2d(nf * 4, nf * 8, 4, 2, 1))
        self.conv4 = sn(nn.Conv2d(nf * 8, nf * 4, 3, 1, 1))
        self.conv5 = sn(nn.Conv2d(nf * 4, nf * 2, 3, 1, 1))
        self.conv6 = sn(nn.Conv2d(nf * 2, nf, 3, 1, 1))
        self.conv7 = sn(nn.Conv2d(nf, nf, 3, 1, 1))
        self.conv8 = sn(nn.Conv2d(nf, nf, 3, 1, 1))
        self.conv9 = sn(nn.Conv2d(nf, 1, 3, 1, 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise ValueError(f"expected (B, {self.cfg.in_channels}, H, W), got {tuple(x.shape)}")
        if x.shape[2] % 8 or x.shape[3] % 8:
            raise ValueError(f"H and W must be divisible by 8, got {tuple(x.shape[2:])}")
        lr = lambda v: F.leaky_relu(v, 0.2)
        x0 = lr(self.conv0(x))
        x1 = lr(self.conv1(x0))
        x2 = lr(self.conv2(x1))
        x3 = lr(self.conv3(x2))
        u3 = F.interpolate(x3, scale_factor=2, mode="bilinear", align_corners=False)
        x4 = lr(self.conv4(u3)) + x2
        u4 = F.interpolate(x4, scale_factor=2, mode="bilinear", align_corners=False)
        x5 = lr(self.conv5(u4)) + x1
        u5 = F.interpolate(x5, scale_factor=2, mode="bilinear", align_corners=False)
        x6 = lr(self.conv6(u5)) + x0
        return self.conv9(lr(self.conv8(lr(self.conv7(x6)))))


# ---------------------------------------------------------------------------
# EMA


def ema_update(shadow: torch.Tensor, value: torch.Tensor, decay: float) -> torch.Tensor:
    """shadow <- decay * shadow + (1 - decay) * value."""
    return decay * shadow + (1.0 - decay) * value


class Ema:
    """Shadow copy of a model's trainable parameters with exponential decay."""

    def __init__(self, model: nn.Module, decay: float = 0.999):
        if not 0.0 <= decay < 1.0:
            raise ValueError(f"decay must be in [0, 1), got {decay}")
        self.decay = decay
        self.shadow = {
            name: p.detach().clone() for name, p in model.named_parameters() if p.requires_grad
        }

    @torch.no_grad()
    def update(self, model: nn.Module) -> None:
        for name, p in model.named_parameters():
            if name in self.shadow:
                self.shadow[name] = ema_update(self.shadow[name], p.detach(), self.decay)

    @torch.no_grad()
    def copy_to(self, model: nn.Module) -> None:
        for name, p in model.named_parameters():
            if name in self.shadow:
                p.copy_(self.shadow[name])

    def state_dict(self) -> dict:
        return {"decay": self.decay, "shadow": {k: v.clone() for k, v in self.shadow.items()}}

    def load_state_dict(self, state: dict) -> None:
        self.decay = float(state["decay"])
        self.shadow = {k: v.clone() for k, v in state["shadow"].items()}


@contextlib.contextmanager
def ema_scope(model: nn.Module, ema: Optional[Ema]):
    """Temporarily swap the EMA shadow weights into the model.

    With `ema=None` this is a no-op, so call sites can take an optional EMA
    without branching.
    """
    if ema is None:
        yield model
        return
    backup = {n: p.detach().clone() for n, p in model.named_parameters()}
    ema.copy_to(model)
    try:
        yield model
    finally:
        with torch.no_grad():
            for n, p in model.named_parameters():
                if n in backup:
                    p.copy_(backup[n])


# ---------------------------------------------------------------------------
# Parameter accounting and checkpoints


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def parameter_parity(generator: nn.Module, denoiser: nn.Module) -> float:
    """Ratio of denoiser to generator trainable parameter counts."""
    return count_parameters(denoiser) / count_parameters(generator)


CHECKPOINT_VERSION = 1


def save_checkpoint(
    path,
    model: nn.Module,
    step: int,
    config_hash: str,
    stage: str = "",
    ema: Optional[Ema] = None,
    optimizer=None,
    extra: Optional[dict] = None,
) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "step": int(step),
        "config_hash": config_hash,
        "stage": stage,
        "params": model.state_dict(),
        "ema": ema.state_dict() if ema is not None else None,
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path, model: Optional[nn.Module] = None, strict: bool = True) -> dict:
    """Load a checkpoint dict; optionally restore `model` parameters by name.

    With strict=False, parameters present under matching names are restored
    and the mismatched ones are reported in the returned dict.
    """
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if "format_version" not in payload or "params" not in payload:
        raise ValueError(f"not a recognizable checkpoint: {path}")
    if model is not None:
        if strict:
            model.load_state_dict(payload["params"])
            payload["missing"], payload["unexpected"], payload["mismatched"] = [], [], []
        else:
            own = model.state_dict()
            stored = payload["params"]
            loadable = {
                k: v for k, v in stored.items() if k in own and own[k].shape == v.shape
            }
            model.load_state_dict(loadable, strict=False)
            payload["missing"] = [k for k in own if k not in loadable]
            payload["unexpected"] = [k for k in stored if k not in own]
            payload["mismatched"] = [
                k for k, v in stored.items() if k in own and own[k].shape != v.shape
            ]
    return payload
