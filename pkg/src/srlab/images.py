"""Image IO, resizing, and deterministic HR/LR pair extraction.

Images are numpy float arrays, channel-first (C, H, W), values in [0, 1],
C in {1, 3}. All resampling here is pure numpy in float64 so results are
bit-reproducible across platforms.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from pathlib import Path

import numpy as np
from PIL import Image

from .validation import check_image, check_positive_int

__all__ = [
    "ImageIOError",
    "load_image",
    "save_image",
    "to_uint8",
    "from_uint8",
    "resize_area",
    "resize_bicubic",
    "resize_bilinear",
    "DatasetManifest",
    "ManifestEntry",
    "PairSample",
    "make_pair",
    "pair_seed",
]


class ImageIOError(Exception):
    """Raised when an image file cannot be read or decoded."""

    def __init__(self, path, reason: str):
        self.path = str(path)
        super().__init__(f"cannot read image {self.path}: {reason}")


def to_uint8(img: np.ndarray) -> np.ndarray:
    """Quantize a [0, 1] float image to uint8 with round-half-up."""
    img = check_image(img)
    return np.clip(np.floor(img * 255.0 + 0.5), 0, 255).astype(np.uint8)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    """Map a uint8 image to float64 in [0, 1]."""
    if arr.dtype != np.uint8:
        raise ValueError(f"expected uint8 array, got {arr.dtype}")
    return arr.astype(np.float64) / 255.0


def load_image(path) -> np.ndarray:
    """Load an 8-bit PNG (or other PIL-readable file) as (C, H, W) float64.

    Grayscale files load as one channel; anything else is converted to RGB.
    Decode failures raise :class:`ImageIOError` naming the path.
    """
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode != "L":
                im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.uint8)
    except (OSError, SyntaxError, ValueError) as exc:
        raise ImageIOError(path, str(exc)) from exc
    if arr.ndim == 2:
        arr = arr[None, :, :]
    else:
        arr = arr.transpose(2, 0, 1)
    return from_uint8(arr)


def save_image(img: np.ndarray, path) -> None:
    """Save a float image as an 8-bit PNG (grayscale or RGB)."""
    q = to_uint8(img)
    if q.shape[0] == 1:
        pil = Image.fromarray(q[0], mode="L")
    else:
        pil = Image.fromarray(q.transpose(1, 2, 0), mode="RGB")
    pil.save(path, format="PNG")


# ---------------------------------------------------------------------------
# Resampling


def _area_weights(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic (n_out, n_in) matrix of exact pixel-area coverage.

    Output pixel i covers the source interval [i*s, (i+1)*s) with
    s = n_in / n_out; each source pixel contributes its overlap fraction.
    For integer s this reduces to the exact block mean.
    """
    s = n_in / n_out
    w = np.zeros((n_out, n_in), dtype=np.float64)
    for i in range(n_out):
        lo = i * s
        hi = (i + 1) * s
        j0 = int(math.floor(lo))
        j1 = min(int(math.ceil(hi)), n_in)
        for j in range(j0, j1):
            cover = min(hi, j + 1.0) - max(lo, float(j))
            if cover > 0.0:
                w[i, j] = cover / s
    return w


def resize_area(img: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Downscale by exact area averaging (box filter with fractional coverage).

    Upscaling is rejected; equal size is the identity.
    """
    img = check_image(img)
    oh = check_positive_int(out_hw[0], "out height")
    ow = check_positive_int(out_hw[1], "out width")
    _, h, w = img.shape
    if oh > h or ow > w:
        raise ValueError(f"area resize is downscale-only: {h}x{w} -> {oh}x{ow}")
    if (oh, ow) == (h, w):
        return img.copy()
    wh = _area_weights(h, oh)
    ww = _area_weights(w, ow)
    out = np.einsum("ij,cjk,lk->cil", wh, img, ww)
    return np.clip(out, 0.0, 1.0)


def _reflect_index(j: int, n: int) -> int:
    """Mirror an out-of-range index without repeating the edge sample."""
    if n == 1:
        return 0
    period = 2 * n - 2
    j = j % period
    return period - j if j >= n else j


def _keys_cubic(x: float) -> float:
    """Keys cubic convolution kernel with a = -0.5."""
    x = abs(x)
    if x <= 1.0:
        return (1.5 * x - 2.5) * x * x + 1.0
    if x < 2.0:
        return ((-0.5 * x + 2.5) * x - 4.0) * x + 2.0
    return 0.0


def _interp_weights(n_in: int, n_out: int, taps: int, kernel) -> np.ndarray:
    """(n_out, n_in) interpolation matrix, half-pixel centers, reflect pad."""
    s = n_in / n_out
    w = np.zeros((n_out, n_in), dtype=np.float64)
    half = taps // 2
    for i in range(n_out):
        src = (i + 0.5) * s - 0.5
        j0 = int(math.floor(src)) - half + 1
        for j in range(j0, j0 + taps):
            w[i, _reflect_index(j, n_in)] += kernel(src - j)
    return w


def _resize_kernel(img: np.ndarray, out_hw: tuple[int, int], taps: int, kernel) -> np.ndarray:
    img = check_image(img)
    oh = check_positive_int(out_hw[0], "out height")
    ow = check_positive_int(out_hw[1], "out width")
    _, h, w = img.shape
    if (oh, ow) == (h, w):
        return img.copy()
    wh = _interp_weights(h, oh, taps, kernel)
    ww = _interp_weights(w, ow, taps, kernel)
    out = np.einsum("ij,cjk,lk->cil", wh, img, ww)
    return np.clip(out, 0.0, 1.0)


def resize_bicubic(img: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Separable cubic-convolution resize (a = -0.5, reflect padding).

    No low-pass prefilter is applied, so this is an interpolator: exact for
    linear ramps in the interior, sharp (and mildly aliasing) on downscale.
    """
    return _resize_kernel(img, out_hw, 4, _keys_cubic)


def _linear(x: float) -> float:
    x = abs(x)
    return 1.0 - x if x < 1.0 else 0.0


def resize_bilinear(img: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Separable linear-interpolation resize, half-pixel centers, reflect pad."""
    return _resize_kernel(img, out_hw, 2, _linear)


# ---------------------------------------------------------------------------
# Dataset manifest and pair extraction


@dataclasses.dataclass
class ManifestEntry:
    path: str
    source_id: str


@dataclasses.dataclass
class DatasetManifest:
    """Lists HR source images plus the crop geometry used to make pairs.

    `crop_size_hr` must be divisible by `scale`; LR crops are
    `crop_size_hr / scale` square. Paths are relative to `root`.
    """

    root: str
    entries: list[ManifestEntry]
    crop_size_hr: int = 64
    scale: int = 4
    seed: int = 0

    def __post_init__(self):
        check_positive_int(self.crop_size_hr, "crop_size_hr")
        check_positive_int(self.scale, "scale")
        if self.crop_size_hr % self.scale != 0:
            raise ValueError(
                f"crop_size_hr {self.crop_size_hr} not divisible by scale {self.scale}"
            )

    @property
    def crop_size_lr(self) -> int:
        return self.crop_size_hr // self.scale

    def resolve(self, entry: ManifestEntry) -> str:
        return os.path.join(self.root, entry.path)

    def save(self, path) -> None:
        """Write as JSONL: one header record, then one record per entry."""
        header = {
            "crop_size_hr": self.crop_size_hr,
            "scale": self.scale,
            "seed": self.seed,
        }
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(header) + "\n")
            for e in self.entries:
                fh.write(json.dumps({"path": e.path, "source_id": e.source_id}) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        with open(path, encoding="utf-8") as fh:
            lines = [ln for ln in (l.strip() for l in fh) if ln]
        if not lines:
            raise ValueError(f"empty manifest: {path}")
        header = json.loads(lines[0])
        if "crop_size_hr" not in header:
            raise ValueError(f"manifest {path} missing header record")
        entries = []
        for ln in lines[1:]:
            rec = json.loads(ln)
            entries.append(ManifestEntry(path=rec["path"], source_id=rec["source_id"]))
        return cls(
            root=str(path.parent),
            entries=entries,
            crop_size_hr=int(header["crop_size_hr"]),
            scale=int(header["scale"]),
            seed=int(header.get("seed", 0)),
        )


@dataclasses.dataclass
class PairSample:
    """One aligned training pair: HR crop and its area-downscaled LR."""

    hr: np.ndarray
    lr: np.ndarray
    source_id: str
    crop_yx: tuple[int, int]
    seed: int


def pair_seed(base_seed: int, epoch: int, index: int) -> int:
    """Counter-based per-sample seed; stable across batch sizes and workers."""
    return int(np.random.SeedSequence([base_seed, epoch, index]).generate_state(1)[0])


def make_pair(
    src: np.ndarray,
    cfg: DatasetManifest,
    seed: int,
    source_id: str = "",
    center: bool = False,
) -> PairSample:
    """Extract a seed-determined HR crop and its LR counterpart.

    The crop offset is uniform over all valid positions under the given seed;
    the LR image is the exact area downscale of the HR crop by `cfg.scale`.
    """
    src = check_image(src, "source image")
    _, h, w = src.shape
    c = cfg.crop_size_hr
    if h < c or w < c:
        raise ValueError(f"source {h}x{w} smaller than crop size {c}")
    if center:
        oy, ox = (h - c) // 2, (w - c) // 2
    else:
        rng = np.random.default_rng(seed)
        oy = int(rng.integers(0, h - c + 1))
        ox = int(rng.integers(0, w - c + 1))
    hr = src[:, oy : oy + c, ox : ox + c].copy()
    lr = resize_area(hr, (cfg.crop_size_lr, cfg.crop_size_lr))
    return PairSample(hr=hr, lr=lr, source_id=source_id, crop_yx=(oy, ox), seed=seed)
