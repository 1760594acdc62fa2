"""Closed-form epsilon predictors for diagonal Gaussian-mixture data.

For data x ~ sum_k w_k N(mu_k, diag(v_k)) the diffused marginal of
z_t = alpha x + sigma eps is again a mixture, and the Bayes-optimal epsilon is

    eps*(z, t) = (z - alpha * E[x | z]) / sigma = -sigma * grad_z log q_t(z).

A NULL condition marginalises over classes with the configured class priors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .network import NULL
from .sampler import SampleTrace, SingularityError, cfg_combine, run_ddim
from .schedule import NoiseSchedule


@dataclass(frozen=True)
class Component:
    weight: float
    mean: tuple[float, ...]
    var: tuple[float, ...]


@dataclass
class MixtureSpec:
    """Per-class lists of diagonal Gaussian components."""

    classes: list[list[Component]]
    priors: list[float] | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.classes:
            raise ValueError("mixture needs at least one class")
        dims = {len(c.mean) for comps in self.classes for c in comps}
        if len(dims) != 1:
            raise ValueError("all components must share one dimensionality")
        for k, comps in enumerate(self.classes):
            if not comps:
                raise ValueError(f"class {k} has no components")
            if abs(sum(c.weight for c in comps) - 1.0) > 1e-9:
                raise ValueError(f"class {k} weights do not sum to 1")
            for c in comps:
                if len(c.var) != len(c.mean) or min(c.var) <= 0:
                    raise ValueError(f"class {k}: variances must be positive and match the mean")
        if self.priors is None:
            self.priors = [1.0 / len(self.classes)] * len(self.classes)
        if len(self.priors) != len(self.classes) or abs(sum(self.priors) - 1.0) > 1e-9:
            raise ValueError("class priors must have one entry per class and sum to 1")

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def dim(self) -> int:
        return len(self.classes[0][0].mean)

    def flat(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(class id, log weight within class, means, variances) per component."""
        cls, logw, mu, var = [], [], [], []
        for k, comps in enumerate(self.classes):
            for c in comps:
                cls.append(k)
                logw.append(np.log(c.weight))
                mu.append(c.mean)
                var.append(c.var)
        return np.array(cls), np.array(logw), np.array(mu, dtype=np.float64), np.array(var, dtype=np.float64)

    def sample(self, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        cls, logw, mu, var = self.flat()
        x = np.empty((len(labels), self.dim))
        for k in range(self.num_classes):
            idx = np.flatnonzero(labels == k)
            comp_ids = np.flatnonzero(cls == k)
            pick = rng.choice(comp_ids, size=len(idx), p=np.exp(logw[comp_ids]))
            x[idx] = mu[pick] + np.sqrt(var[pick]) * rng.standard_normal((len(idx), self.dim))
        return x

    def to_dict(self) -> dict:
        return {
            "classes": [[{"weight": c.weight, "mean": list(c.mean), "var": list(c.var)} for c in comps] for comps in self.classes],
            "priors": list(self.priors),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MixtureSpec":
        classes = [[Component(c["weight"], tuple(c["mean"]), tuple(c["var"])) for c in comps] for comps in d["classes"]]
        return cls(classes, d.get("priors"))


def ring_mixture(
    num_classes: int,
    radius: float = 2.0,
    std: float = 0.35,
    rotation_deg: float = 0.0,
    scale: float = 1.0,
) -> MixtureSpec:
    """One isotropic Gaussian per class, class means evenly spaced on a ring."""
    if num_classes < 1:
        raise ValueError(f"num_classes must be >= 1, got {num_classes}")
    classes = []
    for k in range(num_classes):
        ang = 2 * np.pi * k / num_classes + np.deg2rad(rotation_deg)
        mean = (radius * scale * np.cos(ang), radius * scale * np.sin(ang))
        classes.append([Component(1.0, tuple(float(m) for m in mean), (std**2, std**2))])
    return MixtureSpec(classes)


def gaussian(mean, std) -> MixtureSpec:
    mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
    var = np.broadcast_to(np.asarray(std, dtype=np.float64) ** 2, mean.shape)
    return MixtureSpec([[Component(1.0, tuple(mean), tuple(var))]])


def _class_log_prior(mix: MixtureSpec, c: np.ndarray, cls: np.ndarray, logw: np.ndarray) -> np.ndarray:
    """(B, M) log mixing weights; -inf for components outside the condition."""
    logpri = np.log(np.asarray(mix.priors))
    out = np.where(c[:, None] == cls[None, :], logw[None, :], -np.inf)
    null = c == NULL
    out[null] = (logw + logpri[cls])[None, :]
    return out


def _prep(mix: MixtureSpec, z, t, c, sched: NoiseSchedule):
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != mix.dim:
        raise ValueError(f"z must have shape (B, {mix.dim}), got {z.shape}")
    B = len(z)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
    c = np.broadcast_to(np.asarray(c, dtype=np.int64), (B,))
    if np.any(c >= mix.num_classes) or np.any(c < NULL):
        raise ValueError("class id out of range")
    a, s = sched.alpha_sigma(t)
    return z, c, a[:, None], s[:, None]


def _log_joint(mix: MixtureSpec, z, c, a, s):
    cls, logw, mu, var = mix.flat()
    tot = a[:, :, None] ** 2 * var[None] + s[:, :, None] ** 2  # (B, M, d)
    diff = z[:, None, :] - a[:, :, None] * mu[None]
    logn = -0.5 * (np.log(2 * np.pi * tot) + diff**2 / tot).sum(axis=2)
    return _class_log_prior(mix, c, cls, logw) + logn, mu, var, tot, diff


def log_density(mix: MixtureSpec, z, t, c, sched: NoiseSchedule) -> np.ndarray:
    """log q_t(z | c) of the diffused mixture, shape (B,)."""
    z, c, a, s = _prep(mix, z, t, c, sched)
    lj = _log_joint(mix, z, c, a, s)[0]
    return logsumexp(lj, axis=1)


def posterior_mean(mix: MixtureSpec, z, t, c, sched: NoiseSchedule) -> np.ndarray:
    z, c, a, s = _prep(mix, z, t, c, sched)
    lj, mu, var, tot, diff = _log_joint(mix, z, c, a, s)
    resp = np.exp(lj - logsumexp(lj, axis=1, keepdims=True))
    comp_mean = mu[None] + (a[:, :, None] * var[None] / tot) * diff
    return (resp[:, :, None] * comp_mean).sum(axis=1)


def analytic_eps(mix: MixtureSpec, z_t, t, c, sched: NoiseSchedule) -> np.ndarray:
    """Bayes-optimal epsilon for the mixture, per sample."""
    z, cc, a, s = _prep(mix, z_t, t, c, sched)
    if np.any(s < 1e-8):
        raise SingularityError("sigma_t below 1e-8")
    m = posterior_mean(mix, z, t, c, sched)
    return (z - a * m) / s


def oracle_cfg_target(mix: MixtureSpec, z_t, t, c, g, sched: NoiseSchedule) -> np.ndarray:
    eps_c = analytic_eps(mix, z_t, t, c, sched)
    eps_u = analytic_eps(mix, z_t, t, NULL, sched)
    return cfg_combine(eps_c, eps_u, g)


def oracle_sample(
    mix: MixtureSpec,
    c,
    g: float,
    grid,
    seed: int,
    n: int | None = None,
    sched: NoiseSchedule | None = None,
    record: str = "full",
) -> SampleTrace:
    """DDIM driven by the analytic epsilon (with CFG when g > 0)."""
    sched = sched or NoiseSchedule()
    c = np.asarray(c)
    if c.ndim == 0:
        if n is None:
            raise ValueError("pass n when c is a single class id")
        c = np.full(n, int(c))

    def step(z, t, trace):
        if g == 0:
            return analytic_eps(mix, z, t, c, sched)
        return oracle_cfg_target(mix, z, t, c, g, sched)

    trace = run_ddim(step, (len(c), mix.dim), grid, sched, seed, record)
    trace.g = float(g)
    return trace
