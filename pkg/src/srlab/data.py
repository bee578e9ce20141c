"""Deterministic batch assembly from a dataset manifest.

Batches are a pure function of the global step: the epoch permutation and
every crop / degradation seed derive from (base_seed, epoch, entry index), so
runs and resumes reproduce identical batches regardless of batch size.
"""

from __future__ import annotations

import dataclasses
from typing import Optional

import numpy as np
import torch

from .degrade import DegradationConfig, DegradationTrace, apply_trace, degrade
from .images import DatasetManifest, load_image, make_pair, pair_seed, resize_bicubic
from .validation import check_positive_int

__all__ = ["PairBatcher", "EvalPair", "build_eval_pairs", "to_model_range", "from_model_range"]


def to_model_range(x: np.ndarray) -> torch.Tensor:
    """[0, 1] numpy image (or batch) to [-1, 1] float32 torch tensor."""
    return torch.from_numpy(np.ascontiguousarray(x * 2.0 - 1.0)).float()


def from_model_range(x: torch.Tensor) -> np.ndarray:
    """[-1, 1] torch tensor back to clipped [0, 1] float64 numpy."""
    arr = x.detach().cpu().numpy().astype(np.float64)
    return np.clip((arr + 1.0) / 2.0, 0.0, 1.0)


class PairBatcher:
    """Serves (lr, lr_upscaled, hr) training batches for a manifest.

    Source images are held in memory (desk-scale corpora). The LR side is the
    exact area downscale, or the full degradation pipeline when `degradation`
    is given.
    """

    def __init__(
        self,
        manifest: DatasetManifest,
        batch_size: int,
        base_seed: int = 0,
        degradation: Optional[DegradationConfig] = None,
    ):
        if not manifest.entries:
            raise ValueError("manifest has no entries")
        self.manifest = manifest
        self.batch_size = check_positive_int(batch_size, "batch_size")
        self.base_seed = base_seed
        self.degradation = degradation
        self.sources = [load_image(manifest.resolve(e)) for e in manifest.entries]
        self.batches_per_epoch = max(len(self.sources) // self.batch_size, 1)

    def _epoch_order(self, epoch: int) -> np.ndarray:
        rng = np.random.default_rng(np.random.SeedSequence([self.base_seed, epoch, 0xB00C]))
        return rng.permutation(len(self.sources))

    def batch_at(self, step: int) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Deterministic batch for a global step: (lr, lr_up, hr), all [-1, 1]."""
        if step < 0:
            raise ValueError(f"step must be >= 0, got {step}")
        epoch = step // self.batches_per_epoch
        pos = (step % self.batches_per_epoch) * self.batch_size
        order = self._epoch_order(epoch)
        idx = [int(order[(pos + i) % len(order)]) for i in range(self.batch_size)]
        lrs, lr_ups, hrs = [], [], []
        hr_size = self.manifest.crop_size_hr
        for entry_idx in idx:
            pair = make_pair(
                self.sources[entry_idx],
                self.manifest,
                seed=pair_seed(self.base_seed, epoch, entry_idx),
                source_id=self.manifest.entries[entry_idx].source_id,
            )
            if self.degradation is not None:
                deg_seed = pair_seed(self.base_seed ^ 0x5EED, epoch, entry_idx)
                lr, _ = degrade(pair.hr, self.degradation, seed=deg_seed)
            else:
                lr = pair.lr
            lrs.append(lr)
            lr_ups.append(resize_bicubic(lr, (hr_size, hr_size)))
            hrs.append(pair.hr)
        return (
            to_model_range(np.stack(lrs)),
            to_model_range(np.stack(lr_ups)),
            to_model_range(np.stack(hrs)),
        )


@dataclasses.dataclass
class EvalPair:
    """Frozen evaluation pair: every field fixed at construction time."""

    source_id: str
    lr: np.ndarray
    lr_up: np.ndarray
    hr: np.ndarray
    trace: Optional[DegradationTrace] = None


def build_eval_pairs(
    manifest: DatasetManifest,
    degradation: Optional[DegradationConfig] = None,
    traces: Optional[list[DegradationTrace]] = None,
) -> list[EvalPair]:
    """Center-crop eval pairs; degradations are frozen via traces.

    Passing `degradation` samples a trace once per image (seeded by the
    manifest seed); passing `traces` replays existing ones instead.
    """
    if degradation is not None and traces is not None:
        raise ValueError("give either a degradation config or frozen traces, not both")
    if traces is not None and len(traces) != len(manifest.entries):
        raise ValueError(
            f"got {len(traces)} traces for {len(manifest.entries)} manifest entries"
        )
    pairs = []
    hr_size = manifest.crop_size_hr
    for i, entry in enumerate(manifest.entries):
        src = load_image(manifest.resolve(entry))
        pair = make_pair(src, manifest, seed=0, source_id=entry.source_id, center=True)
        trace = None
        if degradation is not None:
            lr, trace = degrade(pair.hr, degradation, seed=pair_seed(manifest.seed, 0, i))
        elif traces is not None:
            trace = traces[i]
            lr = apply_trace(pair.hr, trace)
        else:
            lr = pair.lr
        pairs.append(
            EvalPair(
                source_id=entry.source_id,
                lr=lr,
                lr_up=resize_bicubic(lr, (hr_size, hr_size)),
                hr=pair.hr,
                trace=trace,
            )
        )
    return pairs
