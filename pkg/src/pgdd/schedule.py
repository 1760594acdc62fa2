"""Continuous-time variance-preserving noise schedules.

Time runs from t=0 (clean data) to t=1 (pure noise). Both schedules keep
alpha(t)**2 + sigma(t)**2 == 1, and the log-SNR lambda(t) = log(alpha**2 / sigma**2)
decreases strictly in t.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

T_MIN = 1e-3
T_MAX = 1.0 - 1e-3

KINDS = ("cosine", "linear-snr")
WEIGHTINGS = ("constant-one", "truncated-snr")


class ScheduleDomainError(ValueError):
    """Raised when a time value falls outside the schedule's clamp range."""


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str = "cosine"
    t_min: float = T_MIN
    t_max: float = T_MAX
    # log-SNR endpoints, only read by the linear-snr kind
    snr_start: float = 10.0
    snr_end: float = -10.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}; expected one of {KINDS}")
        if not 0.0 < self.t_min < 0.5:
            raise ValueError(f"t_min must lie in (0, 0.5), got {self.t_min}")
        if not 0.5 < self.t_max <= 1.0:
            raise ValueError(f"t_max must lie in (0.5, 1], got {self.t_max}")
        if self.kind == "linear-snr" and not self.snr_start > self.snr_end:
            raise ValueError("linear-snr needs snr_start > snr_end")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return cls(**d)

    def check(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        # tolerate grid round-off at the endpoints
        tol = 1e-12
        if np.any(t < self.t_min - tol) or np.any(t > self.t_max + tol) or np.any(~np.isfinite(t)):
            raise ScheduleDomainError(f"t outside [{self.t_min}, {self.t_max}]: {t}")
        return t

    def log_snr(self, t) -> np.ndarray:
        t = self.check(t)
        if self.kind == "cosine":
            return 2.0 * np.log(1.0 / np.tan(0.5 * np.pi * t))
        return self.snr_start + (self.snr_end - self.snr_start) * t

    def alpha_sigma(self, t) -> tuple[np.ndarray, np.ndarray]:
        t = self.check(t)
        if self.kind == "cosine":
            return np.cos(0.5 * np.pi * t), np.sin(0.5 * np.pi * t)
        lam = self.log_snr(t)
        # alpha^2 = sigmoid(lam), sigma^2 = sigmoid(-lam)
        return np.sqrt(1.0 / (1.0 + np.exp(-lam))), np.sqrt(1.0 / (1.0 + np.exp(lam)))


def alpha_sigma(sched: NoiseSchedule, t) -> tuple[np.ndarray, np.ndarray]:
    return sched.alpha_sigma(t)


def snr(sched: NoiseSchedule, t) -> np.ndarray:
    """Log signal-to-noise ratio log(alpha_t**2 / sigma_t**2)."""
    return sched.log_snr(t)


def loss_weight(sched: NoiseSchedule, t, weighting: str = "constant-one") -> np.ndarray:
    """Per-sample objective weight omega(lambda_t).

    ``truncated-snr`` is max(exp(lambda_t), 1), the usual choice when an
    epsilon-prediction loss should emphasise low-noise levels.
    """
    t = sched.check(t)
    if weighting == "constant-one":
        return np.ones_like(t)
    if weighting == "truncated-snr":
        return np.maximum(np.exp(sched.log_snr(t)), 1.0)
    raise ValueError(f"unknown loss weighting {weighting!r}; expected one of {WEIGHTINGS}")


def _bcast(coef: np.ndarray, ndim: int) -> np.ndarray:
    coef = np.asarray(coef, dtype=np.float64)
    if coef.ndim == 0:
        return coef
    return coef.reshape(coef.shape + (1,) * (ndim - coef.ndim))


def diffuse(x, t, eps, sched: NoiseSchedule) -> np.ndarray:
    """Forward map z_t = alpha_t * x + sigma_t * eps.

    ``t`` may be a scalar or hold one value per leading batch entry.
    """
    x = np.asarray(x, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x.shape != eps.shape:
        raise ValueError(f"x and eps shapes differ: {x.shape} vs {eps.shape}")
    a, s = sched.alpha_sigma(t)
    return _bcast(a, x.ndim) * x + _bcast(s, x.ndim) * eps


def timestep_grid(sched: NoiseSchedule, n: int) -> np.ndarray:
    """N+1 uniformly spaced times from t_max down to t_min."""
    if int(n) != n or n < 1:
        raise ValueError(f"grid needs N >= 1 steps, got {n}")
    return np.linspace(sched.t_max, sched.t_min, int(n) + 1)
