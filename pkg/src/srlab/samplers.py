"""Deterministic ODE samplers for epsilon-prediction diffusion models.

Implements DDIM, multistep DPM-Solver++ (2M), and an order-2 UniPC
predictor-corrector, all on the continuous VP schedule. Model evaluations are
counted explicitly; every sampler performs exactly `steps` evaluations.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Literal, Optional

import numpy as np

from .schedule import NoiseSchedule
from .validation import check_positive_int

__all__ = [
    "SamplerConfig",
    "SamplingError",
    "parse_sampler_spec",
    "timestep_grid",
    "to_data_prediction",
    "ddim_step",
    "dpmpp_first_order_step",
    "dpmpp_2m_step",
    "unipc_correct",
    "AnalyticGaussianDenoiser",
    "sample_latent",
]

SAMPLER_KINDS = ("ddim", "dpmpp_2m", "unipc")


@dataclasses.dataclass
class SamplerConfig:
    kind: Literal["ddim", "dpmpp_2m", "unipc"] = "dpmpp_2m"
    steps: int = 13
    t_max: float = 1.0
    t_min: float = 1e-3
    spacing: Literal["uniform_t", "uniform_lambda"] = "uniform_t"
    lower_order_final: bool = True

    def __post_init__(self):
        if self.kind not in SAMPLER_KINDS:
            raise ValueError(f"unknown sampler kind {self.kind!r}; choose from {SAMPLER_KINDS}")
        self.steps = check_positive_int(self.steps, "steps")
        if not 0.0 < self.t_min < self.t_max <= 1.0:
            raise ValueError(f"need 0 < t_min < t_max <= 1, got ({self.t_min}, {self.t_max})")
        if self.spacing not in ("uniform_t", "uniform_lambda"):
            raise ValueError(f"unknown spacing {self.spacing!r}")


class SamplingError(Exception):
    """Raised when sampling produces non-finite values; carries the step index."""

    def __init__(self, message: str, step: Optional[int] = None):
        super().__init__(message)
        self.step = step


def parse_sampler_spec(spec: str) -> SamplerConfig:
    """Parse 'kind:steps' strings such as 'dpmpp_2m:13' or 'ddim:64'."""
    parts = spec.split(":")
    if len(parts) != 2 or not parts[1].isdigit() or int(parts[1]) < 1:
        raise ValueError(f"sampler spec must look like 'dpmpp_2m:13', got {spec!r}")
    return SamplerConfig(kind=parts[0], steps=int(parts[1]))


def timestep_grid(cfg: SamplerConfig, schedule: NoiseSchedule) -> np.ndarray:
    """Descending grid of steps+1 times from t_max to t_min."""
    if cfg.spacing == "uniform_t":
        grid = np.linspace(cfg.t_max, cfg.t_min, cfg.steps + 1)
    else:
        lams = np.linspace(schedule.lam(cfg.t_max), schedule.lam(cfg.t_min), cfg.steps + 1)
        grid = schedule.t_from_lambda(lams)
        grid = np.atleast_1d(grid)
        grid[0], grid[-1] = cfg.t_max, cfg.t_min  # pin endpoints against round-off
    return grid


def to_data_prediction(z_t, eps_hat, t: float, schedule: NoiseSchedule, t_min: float = 1e-6):
    """Convert an epsilon estimate to x0_hat = (z_t - sigma_t * eps_hat) / alpha_t."""
    if t < t_min:
        raise ValueError(f"t={t} below t_min={t_min}; sigma_t too small for conversion")
    a = schedule.alpha(t)
    s = schedule.sigma(t)
    return (z_t - s * eps_hat) / a


def ddim_step(z_t, t: float, s: float, eps_hat, schedule: NoiseSchedule):
    """Deterministic DDIM update from time t to s <= t."""
    if s > t:
        raise ValueError(f"ddim step must move backward in time, got t={t} -> s={s}")
    if s == t:
        return z_t + 0 * z_t  # identity (copy keeps callers from aliasing)
    x0 = to_data_prediction(z_t, eps_hat, t, schedule)
    return schedule.alpha(s) * x0 + schedule.sigma(s) * eps_hat


def dpmpp_first_order_step(z, x0_cur, t_from: float, t_to: float, schedule: NoiseSchedule):
    """First-order (DDIM-equivalent) data-prediction exponential-integrator step."""
    if t_to > t_from:
        raise ValueError(f"step must move backward in time, got {t_from} -> {t_to}")
    h = schedule.lam(t_to) - schedule.lam(t_from)
    ratio = schedule.sigma(t_to) / schedule.sigma(t_from)
    return ratio * z - schedule.alpha(t_to) * math.expm1(-h) * x0_cur


def dpmpp_2m_step(
    z,
    x0_cur,
    t_from: float,
    t_to: float,
    schedule: NoiseSchedule,
    prev: Optional[tuple[float, object]] = None,
):
    """One multistep DPM-Solver++(2M) update from t_from to t_to.

    `x0_cur` is the data prediction evaluated at (z, t_from); `prev` carries
    (t, x0) from the previous solver point. With no history the update falls
    back to first order.
    """
    if prev is None:
        return dpmpp_first_order_step(z, x0_cur, t_from, t_to, schedule)
    t_prev, x0_prev = prev
    if not (t_to < t_from < t_prev):
        raise ValueError(
            f"times must be strictly decreasing, got {t_prev} -> {t_from} -> {t_to}"
        )
    lam_prev = schedule.lam(t_prev)
    lam_from = schedule.lam(t_from)
    lam_to = schedule.lam(t_to)
    h = lam_to - lam_from
    h_prev = lam_from - lam_prev
    r = h_prev / h
    # extrapolate the two latest data predictions to the lambda midpoint
    d = (1.0 + 1.0 / (2.0 * r)) * x0_cur - (1.0 / (2.0 * r)) * x0_prev
    ratio = schedule.sigma(t_to) / schedule.sigma(t_from)
    return ratio * z - schedule.alpha(t_to) * math.expm1(-h) * d


def unipc_correct(
    z_prev,
    x0_prev,
    x0_new,
    t_from: float,
    t_to: float,
    schedule: NoiseSchedule,
):
    """Order-2 corrector: redo the t_from -> t_to step using the fresh x0_new.

    Trapezoid-flavored exponential integrator: the first-order term plus a
    slope correction from (x0_new - x0_prev). Exact when x0 is constant.
    """
    if t_to >= t_from:
        raise ValueError(f"corrector must move backward in time, got {t_from} -> {t_to}")
    h = schedule.lam(t_to) - schedule.lam(t_from)
    ratio = schedule.sigma(t_to) / schedule.sigma(t_from)
    a_to = schedule.alpha(t_to)
    base = ratio * z_prev - a_to * math.expm1(-h) * x0_prev
    slope = (h + math.expm1(-h)) / h  # -> 0 as h -> 0
    return base + a_to * slope * (x0_new - x0_prev)


class AnalyticGaussianDenoiser:
    """Exact epsilon predictor for Gaussian data x0 ~ N(mu, s^2 I).

    eps*(z, t) = sigma_t * (z - alpha_t * mu) / (alpha_t^2 s^2 + sigma_t^2);
    the posterior mean of the injected noise. Used as a ground-truth model
    for sampler statistics tests.
    """

    def __init__(self, mu: float, s: float, schedule: Optional[NoiseSchedule] = None):
        if s < 0:
            raise ValueError(f"s must be >= 0, got {s}")
        self.mu = mu
        self.s = s
        self.schedule = schedule or NoiseSchedule()

    def __call__(self, z, cond, t: float):
        a = self.schedule.alpha(t)
        sig = self.schedule.sigma(t)
        return sig * (z - a * self.mu) / (a * a * self.s * self.s + sig * sig)


def _all_finite(x) -> bool:
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return bool(np.all(np.isfinite(np.asarray(x))))


def sample_latent(
    model,
    cond,
    init,
    cfg: SamplerConfig,
    schedule: NoiseSchedule,
    check_finite: bool = True,
):
    """Integrate the sampling ODE from `init` at t_max down to t_min.

    `model(z, cond, t)` must return the epsilon estimate. Returns
    (z_at_t_min, nfe); nfe always equals cfg.steps. Non-finite intermediate
    states raise SamplingError with the offending step index.
    """
    grid = timestep_grid(cfg, schedule)
    z = init
    nfe = 0
    hist: list[tuple[float, object]] = []
    z_prev_state = None
    for i in range(cfg.steps):
        t_cur = float(grid[i])
        t_next = float(grid[i + 1])
        eps = model(z, cond, t_cur)
        nfe += 1
        if check_finite and not _all_finite(eps):
            raise SamplingError(f"non-finite model output at step {i} (t={t_cur:.4g})", step=i)
        x0 = to_data_prediction(z, eps, t_cur, schedule)
        if cfg.kind == "unipc" and hist:
            z = unipc_correct(z_prev_state, hist[-1][1], x0, hist[-1][0], t_cur, schedule)
        if cfg.kind == "ddim":
            z_next = ddim_step(z, t_cur, t_next, eps, schedule)
        else:
            last = (i == cfg.steps - 1) and cfg.lower_order_final
            if not hist or last:
                z_next = dpmpp_first_order_step(z, x0, t_cur, t_next, schedule)
            else:
                z_next = dpmpp_2m_step(z, x0, t_cur, t_next, schedule, prev=hist[-1])
        if check_finite and not _all_finite(z_next):
            raise SamplingError(f"non-finite latent after step {i} (t={t_next:.4g})", step=i)
        z_prev_state = z
        hist.append((t_cur, x0))
        z = z_next
    return z, nfe
