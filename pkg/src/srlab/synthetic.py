"""Procedural toy images for desk-scale experiments.

Each image is a smooth color gradient with a handful of hard-edged shapes
and a sinusoidal texture patch, so a 4x upscaler has real high-frequency
structure to learn while staying fully seed-reproducible.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .images import DatasetManifest, ManifestEntry, save_image

__all__ = ["make_toy_image", "write_toy_corpus"]


def _disk_mask(h: int, w: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def make_toy_image(
    seed: int,
    size: int = 80,
    channels: int = 3,
    shape_count: tuple[int, int] = (4, 9),
    shape_alpha: tuple[float, float] = (0.6, 1.0),
    texture_freq: tuple[float, float] = (0.5, 1.5),
    texture_amp: tuple[float, float] = (0.3, 0.5),
    line_count: tuple[int, int] = (0, 1),
    line_width: tuple[float, float] = (2.0, 4.0),
    line_colors: list[tuple[float, ...]] | None = None,
) -> np.ndarray:
    """Generate one (channels, size, size) toy image in [0, 1].

    `shape_count` and `line_count` are half-open randint ranges; the
    remaining pairs are uniform ranges. Denser shapes, higher opacity, and
    thin crisp lines make the image harder for naive interpolation (more
    sharp edges per area), which is how the desk experiments tune task
    difficulty. Lines stay identifiable after a 4x downscale (long support),
    so a learned upscaler can re-sharpen them where interpolation cannot.
    `line_colors`, when given, restricts lines to a fixed palette (each line
    picks one entry uniformly); together with a degenerate `line_width`
    range this makes fine detail *predictable* — a generative model can
    learn the palette as a prior, while interpolation gains nothing.
    """
    if channels not in (1, 3):
        raise ValueError(f"channels must be 1 or 3, got {channels}")
    rng = np.random.default_rng(seed)
    h = w = int(size)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yy /= max(h - 1, 1)
    xx /= max(w - 1, 1)

    img = np.empty((channels, h, w), dtype=np.float64)
    for c in range(channels):
        a = rng.uniform(0.2, 0.8)
        gy = rng.uniform(-0.4, 0.4)
        gx = rng.uniform(-0.4, 0.4)
        img[c] = a + gy * (yy - 0.5) + gx * (xx - 0.5)

    n_shapes = int(rng.integers(*shape_count))
    for _ in range(n_shapes):
        color = rng.uniform(0.0, 1.0, size=channels)
        kind = rng.integers(0, 3)
        if kind == 0:  # axis-aligned rectangle
            y0, x0 = rng.integers(0, h, size=2)
            hh = int(rng.integers(h // 8, h // 2))
            ww = int(rng.integers(w // 8, w // 2))
            mask = np.zeros((h, w), dtype=bool)
            mask[y0 : min(y0 + hh, h), x0 : min(x0 + ww, w)] = True
        elif kind == 1:  # disk
            cy = rng.uniform(0, h)
            cx = rng.uniform(0, w)
            r = rng.uniform(h / 12, h / 4)
            mask = _disk_mask(h, w, cy, cx, r)
        else:  # oriented half-plane edge
            theta = rng.uniform(0, np.pi)
            offs = rng.uniform(0.25, 0.75)
            proj = np.cos(theta) * xx + np.sin(theta) * yy
            mask = proj > offs * (np.cos(theta) + np.sin(theta))
        alpha = rng.uniform(*shape_alpha)
        for c in range(channels):
            img[c][mask] = (1 - alpha) * img[c][mask] + alpha * color[c % len(color)]

    # sinusoidal texture patch: high-frequency detail a 4x downscale destroys
    ty0, tx0 = rng.integers(0, max(h // 2, 1), size=2)
    th = int(rng.integers(h // 4, h // 2))
    tw = int(rng.integers(w // 4, w // 2))
    fy = rng.uniform(*texture_freq)
    fx = rng.uniform(*texture_freq)
    phase = rng.uniform(0, 2 * np.pi)
    sl = (slice(ty0, min(ty0 + th, h)), slice(tx0, min(tx0 + tw, w)))
    wave = 0.5 + 0.5 * np.sin(
        2 * np.pi * (fy * yy[sl] * h / 8 + fx * xx[sl] * w / 8) + phase
    )
    amp = rng.uniform(*texture_amp)
    for c in range(channels):
        img[c][sl] = (1 - amp) * img[c][sl] + amp * wave

    n_lines = int(rng.integers(*line_count))
    for _ in range(n_lines):
        if line_colors is not None:
            color = np.asarray(line_colors[int(rng.integers(len(line_colors)))],
                               dtype=np.float64)
        else:
            color = rng.uniform(0.0, 1.0, size=channels)
        theta = rng.uniform(0, np.pi)
        py = rng.uniform(0, h - 1)
        px = rng.uniform(0, w - 1)
        half = 0.5 * rng.uniform(*line_width)
        dist = np.abs(
            np.cos(theta) * (yy * (h - 1) - py) - np.sin(theta) * (xx * (w - 1) - px)
        )
        mask = dist <= half
        for c in range(channels):
            img[c][mask] = color[c]

    return np.clip(img, 0.0, 1.0)


def write_toy_corpus(
    out_dir,
    n_images: int,
    seed: int = 0,
    size: int = 80,
    crop_size_hr: int = 64,
    scale: int = 4,
    channels: int = 3,
    **image_params,
) -> DatasetManifest:
    """Write `n_images` toy PNGs plus a manifest; returns the manifest.

    Extra keyword arguments are forwarded to `make_toy_image` (shape density,
    opacity, texture ranges).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(n_images):
        name = f"toy_{i:04d}.png"
        img = make_toy_image(seed=int(np.random.SeedSequence([seed, i]).generate_state(1)[0]),
                             size=size, channels=channels, **image_params)
        save_image(img, out_dir / name)
        entries.append(ManifestEntry(path=name, source_id=f"toy_{i:04d}"))
    manifest = DatasetManifest(
        root=str(out_dir),
        entries=entries,
        crop_size_hr=crop_size_hr,
        scale=scale,
        seed=seed,
    )
    manifest.save(out_dir / "manifest.jsonl")
    return manifest
