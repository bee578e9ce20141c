"""Continuous-time variance-preserving noise schedule.

alpha(t) = exp(-0.5 * (beta_min*t + 0.5*(beta_max - beta_min)*t^2)),
sigma(t) = sqrt(1 - alpha(t)^2), lambda(t) = log(alpha/sigma), t in [0, 1].
All methods accept python floats or numpy arrays and preserve the type.
"""

from __future__ import annotations

import dataclasses

import numpy as np

__all__ = ["NoiseSchedule", "forward_diffuse"]


@dataclasses.dataclass(frozen=True)
class NoiseSchedule:
    beta_min: float = 0.1
    beta_max: float = 20.0

    def __post_init__(self):
        if not 0.0 < self.beta_min <= self.beta_max:
            raise ValueError(
                f"need 0 < beta_min <= beta_max, got ({self.beta_min}, {self.beta_max})"
            )

    def _check_t(self, t):
        t = np.asarray(t, dtype=np.float64)
        if np.any(t < 0.0) or np.any(t > 1.0):
            raise ValueError(f"t outside [0, 1]: {t}")
        return t

    def _beta_integral(self, t):
        # B(t) = int_0^t beta(u) du with beta linear from beta_min to beta_max
        return self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t

    def alpha(self, t):
        t = self._check_t(t)
        out = np.exp(-0.5 * self._beta_integral(t))
        return float(out) if out.ndim == 0 else out

    def sigma(self, t):
        t = self._check_t(t)
        out = np.sqrt(-np.expm1(-self._beta_integral(t)))
        return float(out) if out.ndim == 0 else out

    def lam(self, t):
        """Half log-SNR log(alpha/sigma); +inf at t = 0."""
        t = self._check_t(t)
        with np.errstate(divide="ignore"):
            out = np.log(self.alpha(t)) - np.log(self.sigma(t))
        return float(out) if out.ndim == 0 else out

    def t_from_lambda(self, lam):
        """Invert lam(t) in closed form (quadratic in t)."""
        lam = np.asarray(lam, dtype=np.float64)
        # B(t) = log(1 + exp(-2*lambda)), computed stably
        b = np.logaddexp(0.0, -2.0 * lam)
        d = self.beta_max - self.beta_min
        if d == 0.0:
            t = b / self.beta_min
        else:
            t = (np.sqrt(self.beta_min**2 + 2.0 * d * b) - self.beta_min) / d
        t = np.clip(t, 0.0, 1.0)
        return float(t) if t.ndim == 0 else t


def forward_diffuse(x0, t, eps, schedule: NoiseSchedule):
    """z_t = alpha(t) * x0 + sigma(t) * eps; works for numpy and torch alike."""
    a = schedule.alpha(t)
    s = schedule.sigma(t)
    return a * x0 + s * eps
