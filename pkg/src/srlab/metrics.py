"""Evaluation metrics and the side-by-side (SbS) statistical protocol.

Covers pixel metrics (PSNR, windowed SSIM), pairwise judgment tallies with
the exact two-sided binomial test, win rates, the doubling checkpoint grid,
and three-strikes early stopping.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Callable, Optional

import numpy as np
import scipy.signal

from .validation import check_image, check_positive_int, check_same_shape

__all__ = [
    "psnr",
    "ssim",
    "SbsTally",
    "win_rate",
    "binom_sbs_test",
    "significance",
    "checkpoint_grid",
    "EarlyStopState",
    "early_stop_update",
    "MetricReport",
    "evaluate_pair",
    "register_metric",
    "metric_registry",
    "format_metric_table",
    "format_win_matrix",
    "MetricDeltaJudge",
    "PsnrPairJudge",
    "BETTER",
    "WORSE",
    "EQUAL",
]

BETTER = "better"
WORSE = "worse"
EQUAL = "equal"


# ---------------------------------------------------------------------------
# Pixel metrics


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR in dB over all channels jointly, peak 1.0; inf for identical."""
    a = check_image(a, "a")
    b = check_image(b, "b")
    check_same_shape(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = size // 2
    g = np.exp(-0.5 * ((np.arange(size) - half) / sigma) ** 2)
    g /= g.sum()
    return np.outer(g, g)


def ssim(
    a: np.ndarray,
    b: np.ndarray,
    window_size: int = 11,
    sigma: float = 1.5,
    k1: float = 0.01,
    k2: float = 0.03,
) -> float:
    """Mean structural similarity with a Gaussian window, valid positions only.

    Computed per channel and averaged; dynamic range is 1.0. Images smaller
    than the window are rejected.
    """
    a = check_image(a, "a")
    b = check_image(b, "b")
    check_same_shape(a, b)
    if window_size % 2 == 0 or window_size < 3:
        raise ValueError(f"window_size must be odd and >= 3, got {window_size}")
    _, h, w = a.shape
    if h < window_size or w < window_size:
        raise ValueError(f"image {h}x{w} smaller than SSIM window {window_size}")
    win = _gaussian_window(window_size, sigma)
    c1 = (k1 * 1.0) ** 2
    c2 = (k2 * 1.0) ** 2

    def filt(x):
        return scipy.signal.convolve2d(x, win, mode="valid")

    vals = []
    for c in range(a.shape[0]):
        x, y = a[c], b[c]
        mu_x = filt(x)
        mu_y = filt(y)
        var_x = filt(x * x) - mu_x * mu_x
        var_y = filt(y * y) - mu_y * mu_y
        cov = filt(x * y) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
        den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
        vals.append(float(np.mean(num / den)))
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# SbS tallies and the exact binomial test


@dataclasses.dataclass
class SbsTally:
    """Pairwise judgment counts: wins for side 1, side 2, and ties."""

    wins_1: int = 0
    wins_2: int = 0
    ties: int = 0

    def __post_init__(self):
        for name in ("wins_1", "wins_2", "ties"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 0:
                raise ValueError(f"{name} must be a non-negative int, got {v!r}")

    @property
    def total(self) -> int:
        return self.wins_1 + self.wins_2 + self.ties

    def add(self, verdict: str) -> "SbsTally":
        if verdict == "1":
            return SbsTally(self.wins_1 + 1, self.wins_2, self.ties)
        if verdict == "2":
            return SbsTally(self.wins_1, self.wins_2 + 1, self.ties)
        if verdict == "tie":
            return SbsTally(self.wins_1, self.wins_2, self.ties + 1)
        raise ValueError(f"verdict must be '1', '2', or 'tie', got {verdict!r}")


def win_rate(tally: SbsTally) -> float:
    """Percentage (wins_1 + ties/2) / total * 100; ties split evenly."""
    if tally.total == 0:
        raise ValueError("win rate undefined for an empty tally")
    return 100.0 * (tally.wins_1 + tally.ties / 2.0) / tally.total


def binom_sbs_test(tally: SbsTally) -> float:
    """Exact two-sided binomial test at p=0.5 on the de-tied counts.

    Half the ties (integer floor, one odd tie dropped) are credited to each
    side; the p-value sums all outcomes no more likely than the observed one.
    All arithmetic is exact integers until the final division.
    """
    t1 = tally.wins_1 + tally.ties // 2
    t2 = tally.wins_2 + tally.ties // 2
    n = t1 + t2
    if n == 0:
        raise ValueError("binomial test undefined: no effective trials")
    # full row of binomial coefficients, exact
    row = [1] * (n + 1)
    for i in range(1, n + 1):
        row[i] = row[i - 1] * (n - i + 1) // i
    ck = row[t1]
    acc = sum(c for c in row if c <= ck)
    p = acc / (1 << n)
    return min(1.0, p)


def significance(tally: SbsTally, p_value: Optional[float] = None, alpha: float = 0.05) -> str:
    """Map a tally (and optionally a precomputed p) to better/worse/equal.

    'better' means side 1 wins at level alpha (strict p < alpha); the
    boundary p == alpha stays 'equal'.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    p = binom_sbs_test(tally) if p_value is None else p_value
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p-value outside [0, 1]: {p}")
    if p < alpha:
        return BETTER if tally.wins_1 > tally.wins_2 else WORSE
    return EQUAL


# ---------------------------------------------------------------------------
# Checkpoint grid and early stopping


def checkpoint_grid(n: int, initial: int = 10) -> list[int]:
    """First n checkpoint positions: each interval is used twice, then doubles.

    With the default initial interval 10: 10, 20, 40, 60, 100, 140, 220, ...
    Values are in milestone units; callers scale to steps.
    """
    n = check_positive_int(n, "n")
    initial = check_positive_int(initial, "initial")
    out = []
    step = initial
    val = 0
    used = 0
    for _ in range(n):
        val += step
        out.append(val)
        used += 1
        if used == 2:
            step *= 2
            used = 0
    return out


@dataclasses.dataclass(frozen=True)
class EarlyStopState:
    """Three-strikes stopping: consecutive non-better verdicts accumulate."""

    strikes: int = 0
    decided: bool = False
    max_strikes: int = 3

    def __post_init__(self):
        check_positive_int(self.max_strikes, "max_strikes")
        if self.strikes < 0:
            raise ValueError(f"strikes must be >= 0, got {self.strikes}")


def early_stop_update(state: EarlyStopState, verdict: str) -> EarlyStopState:
    """Fold one verdict into the state; better resets, equal/worse strikes."""
    if state.decided:
        raise ValueError("early stop already decided; no further updates accepted")
    if verdict == BETTER:
        return dataclasses.replace(state, strikes=0)
    if verdict in (EQUAL, WORSE):
        strikes = state.strikes + 1
        return dataclasses.replace(state, strikes=strikes, decided=strikes >= state.max_strikes)
    raise ValueError(f"unknown verdict {verdict!r}")


# ---------------------------------------------------------------------------
# Metric reports, registry, and judges


_REGISTRY: dict[str, Callable[[np.ndarray, np.ndarray], float]] = {}


def register_metric(name: str, fn: Callable[[np.ndarray, np.ndarray], float]) -> None:
    if not name or not callable(fn):
        raise ValueError("metric needs a non-empty name and a callable")
    _REGISTRY[name] = fn


def metric_registry() -> dict[str, Callable]:
    return dict(_REGISTRY)


register_metric("psnr_db", psnr)
register_metric("ssim", ssim)


@dataclasses.dataclass
class MetricReport:
    psnr_db: float
    ssim: float
    extras: dict = dataclasses.field(default_factory=dict)

    def as_dict(self) -> dict:
        out = {"psnr_db": self.psnr_db, "ssim": self.ssim}
        out.update(self.extras)
        return out


def evaluate_pair(
    pred: np.ndarray, target: np.ndarray, extra_metrics: Optional[list[str]] = None
) -> MetricReport:
    """Compute the standard metric suite plus any registered extras."""
    extras = {}
    for name in extra_metrics or []:
        if name in ("psnr_db", "ssim"):
            continue
        if name not in _REGISTRY:
            raise KeyError(f"metric {name!r} not registered")
        extras[name] = float(_REGISTRY[name](pred, target))
    return MetricReport(psnr_db=psnr(pred, target), ssim=ssim(pred, target), extras=extras)


def _fmt(v) -> str:
    if v == math.inf:
        return "identical"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def format_metric_table(columns: dict[str, MetricReport]) -> str:
    """Metric rows x model columns, aligned plain text."""
    if not columns:
        raise ValueError("no models to tabulate")
    names = list(columns)
    metrics: list[str] = []
    for rep in columns.values():
        for key in rep.as_dict():
            if key not in metrics:
                metrics.append(key)
    width = max(len(m) for m in metrics + ["metric"]) + 2
    cols = [max(len(n), 10) + 2 for n in names]
    lines = ["metric".ljust(width) + "".join(n.rjust(c) for n, c in zip(names, cols))]
    for m in metrics:
        row = m.ljust(width)
        for n, c in zip(names, cols):
            row += _fmt(columns[n].as_dict().get(m, float("nan"))).rjust(c)
        lines.append(row)
    return "\n".join(lines)


def format_win_matrix(
    names: list[str], tallies: dict[tuple[str, str], SbsTally], alpha: float = 0.05
) -> str:
    """Win-rate matrix (row beats column, percent); '*' marks significance."""
    width = max(len(n) for n in names) + 2
    lines = ["".ljust(width) + "".join(n.rjust(width) for n in names)]
    for a in names:
        row = a.ljust(width)
        for b in names:
            if a == b:
                row += "-".rjust(width)
                continue
            t = tallies.get((a, b))
            if t is None:
                rev = tallies.get((b, a))
                if rev is None:
                    row += "?".rjust(width)
                    continue
                t = SbsTally(rev.wins_2, rev.wins_1, rev.ties)
            mark = "*" if significance(t, alpha=alpha) != EQUAL else ""
            row += f"{win_rate(t):.1f}{mark}".rjust(width)
        lines.append(row)
    return "\n".join(lines)


@dataclasses.dataclass
class MetricDeltaJudge:
    """Milestone judge: compares a metric between consecutive reports.

    Stands in for human SbS in headless runs; movements within the dead band
    count as equal.
    """

    metric: str = "psnr_db"
    dead_band: float = 0.1

    def verdict(self, prev: MetricReport, new: MetricReport) -> str:
        a = prev.as_dict()[self.metric]
        b = new.as_dict()[self.metric]
        if b > a + self.dead_band:
            return BETTER
        if b < a - self.dead_band:
            return WORSE
        return EQUAL


@dataclasses.dataclass
class PsnrPairJudge:
    """Pairwise proxy judge: prefers the output closer to the reference."""

    tie_band_db: float = 0.05

    def verdict(self, out_1: np.ndarray, out_2: np.ndarray, reference: np.ndarray) -> str:
        p1 = psnr(out_1, reference)
        p2 = psnr(out_2, reference)
        if p1 == p2:  # covers both identical to reference
            return "tie"
        if p1 > p2 + self.tie_band_db:
            return "1"
        if p2 > p1 + self.tie_band_db:
            return "2"
        return "tie"
