"""Deterministic DDIM sampling under three regimes.

* two-pass classifier-free guidance (the teacher),
* single guided pass with guide injections (the student),
* any epsilon function, e.g. the closed-form mixture oracle.

All regimes draw z_1 from the same seeded stream, so runs with equal seeds
start from identical noise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .guide import guide_forward
from .network import NULL, ParameterSet, PortShapeError, denoise_forward
from .rng import initial_noise
from .schedule import NoiseSchedule

ALPHA_FLOOR = 1e-8


class SingularityError(ArithmeticError):
    """A sampler step would divide by a vanishing alpha_t."""


@dataclass
class SampleTrace:
    """Per-step record of a sampling run.

    ``zs[i]`` and ``eps[i]`` are the state and epsilon prediction at ``ts[i]``;
    the run ends at ``ts[-1]`` with ``x0``. With ``record="summary"`` only the
    per-step mean and std of z are kept.
    """

    ts: np.ndarray
    x0: np.ndarray
    zs: list = field(default_factory=list)
    eps: list = field(default_factory=list)
    z_mean: list = field(default_factory=list)
    z_std: list = field(default_factory=list)
    inj_l1: list = field(default_factory=list)
    inj_maps: list = field(default_factory=list)
    g: float | None = None
    base_passes: int = 0
    guide_passes: int = 0

    @property
    def num_steps(self) -> int:
        return len(self.ts) - 1

    @property
    def has_injections(self) -> bool:
        return len(self.inj_l1) > 0


def cfg_combine(eps_c, eps_u, g) -> np.ndarray:
    """(1 + g) * eps_c - g * eps_u."""
    eps_c = np.asarray(eps_c, dtype=np.float64)
    eps_u = np.asarray(eps_u, dtype=np.float64)
    if eps_c.shape != eps_u.shape:
        raise ValueError(f"eps shapes differ: {eps_c.shape} vs {eps_u.shape}")
    g = np.asarray(g, dtype=np.float64)
    if g.ndim == 1:
        g = g.reshape((-1,) + (1,) * (eps_c.ndim - 1))
    return (1.0 + g) * eps_c - g * eps_u


def _per_sample(v: np.ndarray, ndim: int) -> np.ndarray:
    return v if v.ndim == 0 else v.reshape((-1,) + (1,) * (ndim - 1))


def ddim_step(z_t, eps_hat, t, s, sched: NoiseSchedule) -> np.ndarray:
    """Deterministic DDIM update from time t to an earlier time s.

    ``t`` and ``s`` are scalars or hold one time per batch entry.
    """
    z_t = np.asarray(z_t, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if np.any(s > t):
        raise ValueError(f"ddim_step goes backwards in time only (s={s} > t={t})")
    a_t, s_t = sched.alpha_sigma(t)
    a_s, s_s = sched.alpha_sigma(s)
    if np.any(a_t < ALPHA_FLOOR):
        raise SingularityError(f"alpha_t={a_t} below {ALPHA_FLOOR} at t={t}")
    nd = z_t.ndim
    a_t, s_t, a_s, s_s = (_per_sample(v, nd) for v in (a_t, s_t, a_s, s_s))
    x0 = (z_t - s_t * eps_hat) / a_t
    z_s = a_s * x0 + s_s * eps_hat
    return np.where(_per_sample(s == t, nd), z_t, z_s)


def _conditions(c, n: int | None) -> np.ndarray:
    c = np.asarray(c)
    if c.ndim == 0:
        if n is None:
            raise ValueError("pass n when c is a single class id")
        return np.full(n, int(c))
    return c.astype(np.int64)


def _summarize_injections(trace: SampleTrace, inj: Sequence[np.ndarray]) -> None:
    trace.inj_l1.append(np.array([np.abs(v).mean() for v in inj]))
    if inj[0].ndim == 4:
        trace.inj_maps.append([np.abs(v).mean(axis=(0, 1)) for v in inj])


def run_ddim(
    eps_fn: Callable[[np.ndarray, float, SampleTrace], np.ndarray],
    shape: tuple[int, ...],
    grid: np.ndarray,
    sched: NoiseSchedule,
    seed: int,
    record: str = "full",
) -> SampleTrace:
    """Generic sampling loop; ``eps_fn(z, t, trace)`` may record into the trace."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 1 or len(grid) < 2 or np.any(np.diff(grid) >= 0):
        raise ValueError("grid must be a strictly decreasing sequence of at least two times")
    z = initial_noise(seed, shape)
    trace = SampleTrace(ts=grid.copy(), x0=z)
    for i in range(len(grid) - 1):
        t, s = grid[i], grid[i + 1]
        e = eps_fn(z, t, trace)
        if record == "full":
            trace.zs.append(z)
            trace.eps.append(e)
        trace.z_mean.append(z.mean(axis=0))
        trace.z_std.append(z.std(axis=0))
        z = ddim_step(z, e, t, s, sched)
    trace.x0 = z
    return trace


def sample_conditional(base: ParameterSet, c, grid, seed: int, n: int | None = None, record: str = "full") -> SampleTrace:
    """Plain conditional sampling: one base pass per step, no guidance."""
    cc = _conditions(c, n)
    spec = base.spec

    def step(z, t, trace):
        trace.base_passes += 1
        return denoise_forward(base, z, t, cc)

    return run_ddim(step, (len(cc),) + spec.data_shape, grid, spec.schedule, seed, record)


def sample_cfg(base: ParameterSet, c, g: float, grid, seed: int, n: int | None = None, record: str = "full") -> SampleTrace:
    """Teacher sampling: conditional and NULL passes combined per step."""
    if base.owner != "base":
        raise ValueError("sample_cfg needs a base checkpoint")
    cc = _conditions(c, n)
    nulls = np.full_like(cc, NULL)
    spec = base.spec

    def step(z, t, trace):
        trace.base_passes += 2
        return cfg_combine(denoise_forward(base, z, t, cc), denoise_forward(base, z, t, nulls), g)

    trace = run_ddim(step, (len(cc),) + spec.data_shape, grid, spec.schedule, seed, record)
    trace.g = float(g)
    return trace


def check_pairing(base: ParameterSet, guide: ParameterSet) -> None:
    """Raise PortShapeError listing every port where guide and base disagree."""
    if base.owner != "base" or guide.owner != "guide":
        raise ValueError("expected a (base, guide) parameter pair")
    bspec, gspec = base.spec, guide.spec.base_spec
    problems = []
    if bspec.mode != gspec.mode:
        problems.append(f"mode: base {bspec.mode} vs guide {gspec.mode}")
    if bspec.num_ports != gspec.num_ports:
        problems.append(f"port count: base {bspec.num_ports} vs guide {gspec.num_ports}")
    for p, (a, b) in enumerate(zip(bspec.port_shapes(1), gspec.port_shapes(1))):
        if a != b:
            problems.append(f"port {p}: base {a[1:]} vs guide {b[1:]}")
    if bspec.num_classes != gspec.num_classes:
        problems.append(f"classes: base {bspec.num_classes} vs guide {gspec.num_classes}")
    if problems:
        raise PortShapeError("guide/base mismatch: " + "; ".join(problems))


def guided_eps(base: ParameterSet, guide: ParameterSet, z, t, c, g) -> tuple[np.ndarray, list]:
    inj = guide_forward(guide, g, z, t, c)
    return denoise_forward(base, z, t, c, inj), inj


def sample_guided(
    base: ParameterSet, guide: ParameterSet, c, g: float, grid, seed: int, n: int | None = None, record: str = "full"
) -> SampleTrace:
    """Student sampling: guide forward plus one injected base pass per step."""
    check_pairing(base, guide)
    cc = _conditions(c, n)
    spec = base.spec

    def step(z, t, trace):
        trace.base_passes += 1
        trace.guide_passes += 1
        e, inj = guided_eps(base, guide, z, t, cc, g)
        _summarize_injections(trace, inj)
        return e

    trace = run_ddim(step, (len(cc),) + spec.data_shape, grid, spec.schedule, seed, record)
    trace.g = float(g)
    return trace


def write_trace(trace: SampleTrace, path: str | Path) -> None:
    """One JSON record per step: t, per-port injection L1 and z summaries."""
    lines = []
    for i in range(trace.num_steps):
        rec = {
            "step": i,
            "t": float(trace.ts[i]),
            "t_next": float(trace.ts[i + 1]),
            "g": trace.g,
            "injection_l1": [float(v) for v in trace.inj_l1[i]] if trace.has_injections else None,
            "z_mean": np.ravel(trace.z_mean[i]).tolist() if trace.z_mean else None,
            "z_std": np.ravel(trace.z_std[i]).tolist() if trace.z_std else None,
        }
        lines.append(json.dumps(rec, sort_keys=True))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def read_trace(path: str | Path) -> SampleTrace:
    """Rebuild the summary parts of a trace written by :func:`write_trace`."""
    recs = [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]
    if not recs:
        raise ValueError(f"{path}: empty trace")
    ts = np.array([r["t"] for r in recs] + [recs[-1]["t_next"]])
    trace = SampleTrace(ts=ts, x0=np.empty(0), g=recs[0]["g"])
    if recs[0]["injection_l1"] is not None:
        trace.inj_l1 = [np.array(r["injection_l1"]) for r in recs]
    trace.z_mean = [np.array(r["z_mean"]) for r in recs if r["z_mean"] is not None]
    trace.z_std = [np.array(r["z_std"]) for r in recs if r["z_std"] is not None]
    return trace
