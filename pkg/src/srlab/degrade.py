"""Second-order degradation pipeline with replayable traces.

Each round applies blur, random resize, noise, and JPEG compression with
parameters drawn from configured ranges; a final exact-area downscale yields
the LR image. Every sampled parameter is recorded in a trace so any
degradation can be replayed bit-exactly on demand (frozen eval sets, debugging).
"""

from __future__ import annotations

import dataclasses
import io
import json
from typing import Optional

import numpy as np
import scipy.ndimage
from PIL import Image

from .images import from_uint8, resize_area, resize_bicubic, resize_bilinear, to_uint8
from .validation import (
    check_image,
    check_odd,
    check_positive_int,
    check_probability,
    check_range_pair,
)

__all__ = [
    "BlurConfig",
    "ResizeConfig",
    "NoiseConfig",
    "CompressionConfig",
    "DegradationConfig",
    "DegradationError",
    "DegradationTrace",
    "TraceOp",
    "build_gaussian_kernel",
    "gaussian_blur",
    "add_noise",
    "jpeg_compress",
    "degrade",
    "apply_trace",
]


@dataclasses.dataclass
class BlurConfig:
    kernel_size: int = 11
    sigma_range: tuple[float, float] = (0.2, 2.0)
    anisotropy_prob: float = 0.25

    def __post_init__(self):
        self.kernel_size = check_odd(self.kernel_size, "blur.kernel_size")
        self.sigma_range = check_range_pair(self.sigma_range, "blur.sigma_range", lo=0.0)
        self.anisotropy_prob = check_probability(self.anisotropy_prob, "blur.anisotropy_prob")


@dataclasses.dataclass
class ResizeConfig:
    modes: tuple[str, ...] = ("area", "bilinear", "bicubic")
    scale_range: tuple[float, float] = (0.6, 1.4)

    def __post_init__(self):
        if not self.modes:
            raise ValueError("resize.modes must not be empty")
        bad = set(self.modes) - {"area", "bilinear", "bicubic"}
        if bad:
            raise ValueError(f"unknown resize modes: {sorted(bad)}")
        self.modes = tuple(self.modes)
        self.scale_range = check_range_pair(self.scale_range, "resize.scale_range", lo=0.05)


@dataclasses.dataclass
class NoiseConfig:
    gaussian_sigma_range: tuple[float, float] = (0.0, 0.08)
    poisson_scale_range: tuple[float, float] = (200.0, 2000.0)
    poisson_prob: float = 0.5
    gray_prob: float = 0.4

    def __post_init__(self):
        self.gaussian_sigma_range = check_range_pair(
            self.gaussian_sigma_range, "noise.gaussian_sigma_range", lo=0.0
        )
        self.poisson_scale_range = check_range_pair(
            self.poisson_scale_range, "noise.poisson_scale_range", lo=1.0
        )
        self.poisson_prob = check_probability(self.poisson_prob, "noise.poisson_prob")
        self.gray_prob = check_probability(self.gray_prob, "noise.gray_prob")


@dataclasses.dataclass
class CompressionConfig:
    quality_range: tuple[int, int] = (30, 95)

    def __post_init__(self):
        q0, q1 = check_range_pair(self.quality_range, "compression.quality_range", lo=1, hi=100)
        self.quality_range = (int(q0), int(q1))


@dataclasses.dataclass
class DegradationConfig:
    rounds: int = 2
    blur: BlurConfig = dataclasses.field(default_factory=BlurConfig)
    resize: ResizeConfig = dataclasses.field(default_factory=ResizeConfig)
    noise: NoiseConfig = dataclasses.field(default_factory=NoiseConfig)
    compression: CompressionConfig = dataclasses.field(default_factory=CompressionConfig)
    final_scale: int = 4

    def __post_init__(self):
        self.rounds = check_positive_int(self.rounds, "rounds")
        self.final_scale = check_positive_int(self.final_scale, "final_scale")


class DegradationError(Exception):
    """Raised when a pipeline op fails; carries the partial trace."""

    def __init__(self, message: str, partial_trace: Optional["DegradationTrace"] = None):
        super().__init__(message)
        self.partial_trace = partial_trace


@dataclasses.dataclass
class TraceOp:
    name: str
    params: dict


@dataclasses.dataclass
class DegradationTrace:
    """Full record of one degradation: master seed plus every applied op."""

    seed: int
    ops: list[TraceOp] = dataclasses.field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(
            {"seed": self.seed, "ops": [{"name": o.name, "params": o.params} for o in self.ops]}
        )

    @classmethod
    def from_json(cls, text: str) -> "DegradationTrace":
        data = json.loads(text)
        return cls(
            seed=int(data["seed"]),
            ops=[TraceOp(o["name"], o["params"]) for o in data["ops"]],
        )


# ---------------------------------------------------------------------------
# Primitive ops


def build_gaussian_kernel(
    kernel_size: int, sigma_y: float, sigma_x: float, theta: float = 0.0
) -> np.ndarray:
    """Normalized 2-D Gaussian kernel, optionally rotated by `theta` radians.

    Sigma below ~1e-8 on both axes degenerates to a delta (identity) kernel.
    """
    k = check_odd(kernel_size, "kernel_size")
    half = k // 2
    kernel = np.zeros((k, k), dtype=np.float64)
    if sigma_y < 1e-8 and sigma_x < 1e-8:
        kernel[half, half] = 1.0
        return kernel
    sigma_y = max(float(sigma_y), 1e-8)
    sigma_x = max(float(sigma_x), 1e-8)
    yy, xx = np.mgrid[-half : half + 1, -half : half + 1].astype(np.float64)
    ct, st = np.cos(theta), np.sin(theta)
    # rotate coordinates into the kernel frame
    u = ct * xx + st * yy
    v = -st * xx + ct * yy
    kernel = np.exp(-0.5 * ((u / sigma_x) ** 2 + (v / sigma_y) ** 2))
    return kernel / kernel.sum()


def gaussian_blur(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Convolve each channel with `kernel` under reflect padding.

    The kernel must be odd-sized in both dims and sum to 1.
    """
    img = check_image(img)
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 2 or kernel.shape[0] % 2 == 0 or kernel.shape[1] % 2 == 0:
        raise ValueError(f"kernel must be odd-sized 2-D, got shape {kernel.shape}")
    if abs(kernel.sum() - 1.0) > 1e-8:
        raise ValueError(f"kernel not normalized: sum = {kernel.sum():.6g}")
    if img.shape[1] < kernel.shape[0] or img.shape[2] < kernel.shape[1]:
        raise ValueError(
            f"image {img.shape[1]}x{img.shape[2]} smaller than kernel {kernel.shape}"
        )
    out = np.empty_like(img)
    for c in range(img.shape[0]):
        # ndimage 'mirror' == np.pad 'reflect' (edge sample not repeated)
        out[c] = scipy.ndimage.convolve(img[c], kernel, mode="mirror")
    return np.clip(out, 0.0, 1.0)


def add_noise(
    img: np.ndarray,
    kind: str,
    *,
    sigma: float = 0.0,
    scale: float = 0.0,
    gray: bool = False,
    seed: int = 0,
) -> np.ndarray:
    """Add Gaussian (std `sigma`) or Poisson (count scale `scale`) noise.

    Gray noise draws one spatial field shared across channels. Output is
    clipped to [0, 1]; the draw is fully determined by `seed`.
    """
    img = check_image(img)
    rng = np.random.default_rng(seed)
    c, h, w = img.shape
    if kind == "gaussian":
        if sigma < 0:
            raise ValueError(f"negative noise sigma: {sigma}")
        shape = (1, h, w) if gray else (c, h, w)
        noise = sigma * rng.standard_normal(shape)
        out = img + noise
    elif kind == "poisson":
        if scale < 1.0:
            raise ValueError(f"poisson scale must be >= 1, got {scale}")
        if gray:
            base = img.mean(axis=0)
            noisy = rng.poisson(base * scale) / scale
            out = img + (noisy - base)[None]
        else:
            out = rng.poisson(img * scale) / scale
    else:
        raise ValueError(f"unknown noise kind: {kind!r}")
    return np.clip(out, 0.0, 1.0)


def jpeg_compress(img: np.ndarray, quality: int) -> np.ndarray:
    """Round-trip the image through JPEG at `quality` (1..100), 4:4:4 chroma."""
    img = check_image(img)
    quality = check_positive_int(quality, "quality")
    if quality > 100:
        raise ValueError(f"quality must be in [1, 100], got {quality}")
    q = to_uint8(img)
    if q.shape[0] == 1:
        pil = Image.fromarray(q[0], mode="L")
    else:
        pil = Image.fromarray(q.transpose(1, 2, 0), mode="RGB")
    buf = io.BytesIO()
    pil.save(buf, format="JPEG", quality=quality, subsampling=0)
    buf.seek(0)
    with Image.open(buf) as back:
        back.load()
        arr = np.asarray(back, dtype=np.uint8)
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return from_uint8(arr)


def _apply_resize(img: np.ndarray, mode: str, out_hw: tuple[int, int]) -> np.ndarray:
    if mode == "area":
        return resize_area(img, out_hw)
    if mode == "bilinear":
        return resize_bilinear(img, out_hw)
    if mode == "bicubic":
        return resize_bicubic(img, out_hw)
    raise ValueError(f"unknown resize mode: {mode!r}")


# ---------------------------------------------------------------------------
# Parameter sampling and pipeline


def _sample_ops(cfg: DegradationConfig, hw: tuple[int, int], rng: np.random.Generator) -> list[TraceOp]:
    """Draw every random parameter for one degradation; no image work."""
    h, w = hw
    if h % cfg.final_scale or w % cfg.final_scale:
        raise ValueError(f"HR size {h}x{w} not divisible by final_scale {cfg.final_scale}")
    lr_h, lr_w = h // cfg.final_scale, w // cfg.final_scale
    ops: list[TraceOp] = []
    cur_h, cur_w = h, w
    for _ in range(cfg.rounds):
        # blur
        sigma = float(rng.uniform(*cfg.blur.sigma_range))
        if rng.uniform() < cfg.blur.anisotropy_prob:
            sigma2 = float(rng.uniform(*cfg.blur.sigma_range))
            theta = float(rng.uniform(0.0, np.pi))
            blur_params = {"sigma_y": sigma, "sigma_x": sigma2, "theta": theta}
        else:
            blur_params = {"sigma_y": sigma, "sigma_x": sigma, "theta": 0.0}
        blur_params["kernel_size"] = cfg.blur.kernel_size
        ops.append(TraceOp("blur", blur_params))

        # random resize; targets never drop below the final LR size
        mode = cfg.resize.modes[int(rng.integers(len(cfg.resize.modes)))]
        scale = float(rng.uniform(*cfg.resize.scale_range))
        th = max(lr_h, int(round(cur_h * scale)))
        tw = max(lr_w, int(round(cur_w * scale)))
        if mode == "area" and (th > cur_h or tw > cur_w):
            mode = "bilinear"  # area is downscale-only
        ops.append(TraceOp("resize", {"mode": mode, "height": th, "width": tw}))
        cur_h, cur_w = th, tw

        # noise
        kind = "poisson" if rng.uniform() < cfg.noise.poisson_prob else "gaussian"
        gray = bool(rng.uniform() < cfg.noise.gray_prob)
        op_seed = int(rng.integers(0, 2**63))
        if kind == "gaussian":
            params = {"kind": kind, "sigma": float(rng.uniform(*cfg.noise.gaussian_sigma_range))}
        else:
            params = {"kind": kind, "scale": float(rng.uniform(*cfg.noise.poisson_scale_range))}
        params.update({"gray": gray, "seed": op_seed})
        ops.append(TraceOp("noise", params))

        # jpeg
        q0, q1 = cfg.compression.quality_range
        ops.append(TraceOp("jpeg", {"quality": int(rng.integers(q0, q1 + 1))}))

    ops.append(TraceOp("final_resize", {"height": lr_h, "width": lr_w}))
    return ops


def _apply_op(img: np.ndarray, op: TraceOp) -> np.ndarray:
    p = op.params
    if op.name == "blur":
        kernel = build_gaussian_kernel(p["kernel_size"], p["sigma_y"], p["sigma_x"], p["theta"])
        return gaussian_blur(img, kernel)
    if op.name == "resize":
        return _apply_resize(img, p["mode"], (p["height"], p["width"]))
    if op.name == "noise":
        kw = {"gray": p["gray"], "seed": p["seed"]}
        if p["kind"] == "gaussian":
            kw["sigma"] = p["sigma"]
        else:
            kw["scale"] = p["scale"]
        return add_noise(img, p["kind"], **kw)
    if op.name == "jpeg":
        return jpeg_compress(img, p["quality"])
    if op.name == "final_resize":
        return resize_area(img, (p["height"], p["width"]))
    raise ValueError(f"unknown trace op: {op.name!r}")


def _run_ops(img: np.ndarray, ops: list[TraceOp], seed: int) -> np.ndarray:
    done: list[TraceOp] = []
    for op in ops:
        try:
            img = _apply_op(img, op)
        except Exception as exc:
            raise DegradationError(
                f"op {len(done)} ({op.name}) failed: {exc}",
                partial_trace=DegradationTrace(seed=seed, ops=done),
            ) from exc
        done.append(op)
    return img


def degrade(
    hr: np.ndarray, cfg: DegradationConfig, seed: int
) -> tuple[np.ndarray, DegradationTrace]:
    """Degrade an HR image to LR; returns the LR image and a replayable trace."""
    hr = check_image(hr, "hr")
    rng = np.random.default_rng(seed)
    ops = _sample_ops(cfg, hr.shape[1:], rng)
    lr = _run_ops(hr, ops, seed)
    return lr, DegradationTrace(seed=seed, ops=ops)


def apply_trace(hr: np.ndarray, trace: DegradationTrace) -> np.ndarray:
    """Replay a recorded degradation bit-exactly on `hr`."""
    hr = check_image(hr, "hr")
    return _run_ops(hr, trace.ops, trace.seed)
