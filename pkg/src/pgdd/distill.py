"""Training loops: base denoiser, CFG distillation into a guide, fixed-guidance
variant, progressive step distillation of the guide, and base fine-tuning.

The base model is never updated by any guide-training loop. Its parameters enter
the graph as constants; a gradient showing up on any of them is treated as a
contract violation.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import autograd as ag
from .data import Dataset
from .guide import guide_graph
from .network import NULL, ParameterSet, denoise_forward, denoise_graph, graph_params
from .rng import stream
from .sampler import SingularityError, cfg_combine, check_pairing, ddim_step, guided_eps
from .schedule import NoiseSchedule, diffuse, loss_weight, timestep_grid

Logger = Callable[[dict], None]

G_BUCKETS = (0.0, 4.0, 6.0, 8.0, math.inf)


class TrainingDiverged(RuntimeError):
    pass


class FrozenBaseViolation(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 128
    steps: int = 1000
    learning_rate: float = 2e-4
    seed: int = 0
    loss_weighting: str = "constant-one"
    guidance_range: tuple[float, float] = (2.0, 9.0)
    guidance_fixed: float | None = None
    cond_dropout_prob: float = 0.1
    optimizer: str = "adam"
    betas: tuple[float, float] = (0.9, 0.999)
    lr_schedule: str = "constant"
    log_every: int = 100

    def __post_init__(self):
        self.guidance_range = tuple(float(g) for g in self.guidance_range)
        self.betas = tuple(float(b) for b in self.betas)
        if self.batch_size < 1 or self.steps < 0 or self.log_every < 1:
            raise ValueError("batch_size and log_every must be positive, steps non-negative")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        lo, hi = self.guidance_range
        if self.guidance_fixed is None and not (0 <= lo < hi):
            raise ValueError(f"guidance range needs 0 <= lo < hi, got {self.guidance_range}")
        if self.guidance_fixed is not None and self.guidance_fixed < 0:
            raise ValueError("guidance_fixed must be >= 0")
        if not 0.0 <= self.cond_dropout_prob <= 1.0:
            raise ValueError("cond_dropout_prob must lie in [0, 1]")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["guidance_range"] = list(self.guidance_range)
        d["betas"] = list(self.betas)
        return d

    def lr_at(self, step: int) -> float:
        if self.lr_schedule == "constant" or self.steps == 0:
            return self.learning_rate
        return self.learning_rate * 0.5 * (1.0 + math.cos(math.pi * step / self.steps))

    def draw_guidance(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.guidance_fixed is not None:
            return np.full(n, float(self.guidance_fixed))
        return rng.uniform(*self.guidance_range, size=n)


@dataclass(frozen=True)
class DistillRound:
    teacher_steps: int
    index: int = 0

    def __post_init__(self):
        if self.teacher_steps < 2 or self.teacher_steps % 2:
            raise ValueError(f"teacher grid size must be even and >= 2, got {self.teacher_steps}")

    @property
    def student_steps(self) -> int:
        return self.teacher_steps // 2


class Adam:
    """Adam (or plain SGD) over a dict of float32 arrays, updated in place.

    Moments are kept in float64; the stored parameters stay float32.
    """

    def __init__(self, kind: str = "adam", betas=(0.9, 0.999), eps: float = 1e-8):
        self.kind = kind
        self.b1, self.b2 = betas
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        for name, g in grads.items():
            p = params[name]
            if self.kind == "sgd":
                params[name] = (p - lr * g).astype(np.float32)
                continue
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros(p.shape)
                self.v[name] = np.zeros(p.shape)
            v = self.v[name]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            mhat = m / (1 - self.b1**self.t)
            vhat = v / (1 - self.b2**self.t)
            params[name] = (p - lr * mhat / (np.sqrt(vhat) + self.eps)).astype(np.float32)


@dataclass
class _Window:
    """Running loss aggregates between two log records."""

    losses: list = field(default_factory=list)
    g: list = field(default_factory=list)

    def add(self, per_sample: np.ndarray, g: np.ndarray | None = None) -> None:
        self.losses.append(per_sample)
        if g is not None:
            self.g.append(g)

    def record(self, phase: str, step: int) -> dict:
        per = np.concatenate(self.losses)
        rec = {"phase": phase, "step": step, "loss": float(per.mean())}
        if self.g:
            g = np.concatenate(self.g)
            buckets = {}
            for lo, hi in zip(G_BUCKETS[:-1], G_BUCKETS[1:]):
                sel = (g >= lo) & (g < hi)
                if sel.any():
                    buckets[f"[{lo:g},{hi:g})"] = float(per[sel].mean())
            rec["loss_by_g"] = buckets
        self.losses.clear()
        self.g.clear()
        return rec


def _check_finite(loss: float, phase: str, step: int) -> None:
    if not np.isfinite(loss):
        raise TrainingDiverged(f"{phase}: loss became {loss} at step {step}; lower the learning rate")


def _sample_t(sched: NoiseSchedule, rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.uniform(sched.t_min, sched.t_max, size=n)


def _assert_frozen(PB: dict) -> None:
    leaked = [k for k, v in PB.items() if v.grad is not None]
    if leaked:
        raise FrozenBaseViolation(f"gradient reached base parameters: {leaked[:5]}")


# ------------------------------------------------------------------ base model


def base_loss(params: ParameterSet, x, c, t, eps, weighting: str = "constant-one", trainable: bool = True):
    """Per-sample weighted epsilon-prediction loss and the graph parameters."""
    spec = params.spec
    P = graph_params(params.tensors, trainable=trainable)
    z = diffuse(x, t, eps, spec.schedule)
    e = denoise_graph(P, spec, z, t, c)
    per = ag.sum_squares(e - eps) * loss_weight(spec.schedule, t, weighting)
    return per, P


def train_base(
    spec,
    dataset: Dataset,
    cfg: TrainConfig,
    *,
    init: ParameterSet | None = None,
    log: Logger | None = None,
    phase: str = "train-base",
) -> ParameterSet:
    """Denoising training with condition dropout so the NULL row learns the
    unconditional model. ``init`` continues from existing weights."""
    from .network import init_denoiser

    params = init.copy() if init is not None else init_denoiser(spec, cfg.seed)
    spec = params.spec
    if dataset.num_classes != spec.num_classes:
        raise ValueError(f"dataset has {dataset.num_classes} classes, spec expects {spec.num_classes}")
    rng = stream(cfg.seed, "training", _phase_id(phase))
    opt = Adam(cfg.optimizer, cfg.betas)
    window = _Window()
    for step in range(1, cfg.steps + 1):
        x, c = dataset.batch(rng, cfg.batch_size)
        drop = rng.random(cfg.batch_size) < cfg.cond_dropout_prob
        c = np.where(drop, NULL, c)
        t = _sample_t(spec.schedule, rng, cfg.batch_size)
        eps = rng.standard_normal(x.shape)
        per, P = base_loss(params, x, c, t, eps, cfg.loss_weighting)
        loss = ag.mean(per)
        _check_finite(float(loss.data), phase, step)
        loss.backward()
        opt.step(params.tensors, {k: v.grad for k, v in P.items() if v.grad is not None}, cfg.lr_at(step - 1))
        window.add(per.data)
        if log is not None and (step == 1 or step % cfg.log_every == 0 or step == cfg.steps):
            log(window.record(phase, step))
    params.meta.update(trainer_step=params.meta.get("trainer_step", 0) + cfg.steps, train=cfg.to_dict())
    return params


def finetune_base(base: ParameterSet, shifted: Dataset, cfg: TrainConfig, *, log: Logger | None = None) -> ParameterSet:
    """Continue base training on a domain-shifted dataset. Guides are untouched."""
    if base.owner != "base":
        raise ValueError("finetune_base needs base parameters")
    out = train_base(base.spec, shifted, cfg, init=base, log=log, phase="finetune-base")
    out.meta["parent"] = base.checksum()
    return out


_PHASES = ("train-base", "finetune-base", "distill-cfg", "distill-steps")


def _phase_id(phase: str) -> int:
    return _PHASES.index(phase) if phase in _PHASES else len(_PHASES)


# ------------------------------------------------------------ CFG distillation


def cfg_teacher(base: ParameterSet, z, t, c, g) -> np.ndarray:
    eps_c = denoise_forward(base, z, t, c)
    eps_u = denoise_forward(base, z, t, np.full(len(z), NULL))
    return cfg_combine(eps_c, eps_u, g)


def student_graph(base: ParameterSet, guide: ParameterSet, z, t, c, g):
    """Single guided pass with the guide trainable and the base frozen."""
    PB = graph_params(base.tensors, trainable=False)
    PG = graph_params(guide.tensors, trainable=True)
    inj = guide_graph(PG, guide.spec, g, z, t, c)
    return denoise_graph(PB, base.spec, z, t, c, inj), PB, PG


def cfg_distill_losses(base: ParameterSet, guide: ParameterSet, x, c, t, g, eps, weighting: str = "constant-one"):
    """Per-sample ||e_teacher - e_student||^2; returns (per-sample Tensor, PB, PG)."""
    sched = base.spec.schedule
    z = diffuse(x, t, eps, sched)
    teacher = cfg_teacher(base, z, t, c, g)
    e, PB, PG = student_graph(base, guide, z, t, c, g)
    per = ag.sum_squares(e - teacher) * loss_weight(sched, t, weighting)
    return per, PB, PG


def _update_guide(guide: ParameterSet, per, PB, PG, opt: Adam, lr: float) -> float:
    loss = ag.mean(per)
    loss.backward()
    _assert_frozen(PB)
    opt.step(guide.tensors, {k: v.grad for k, v in PG.items() if v.grad is not None}, lr)
    return float(loss.data)


def cfg_distill_step(
    base: ParameterSet,
    guide: ParameterSet,
    batch: tuple[np.ndarray, np.ndarray],
    cfg: TrainConfig,
    rng: np.random.Generator,
    opt: Adam | None = None,
    step: int = 0,
) -> tuple[float, ParameterSet, np.ndarray, np.ndarray]:
    """One CFG-distillation update of the guide on ``batch = (x, c)``.

    Draws t ~ U[t_min, t_max], g from the config and eps ~ N(0, I), regresses the
    single guided pass onto the two-pass CFG target and steps the guide only.
    Returns (loss, guide, per-sample losses, g).
    """
    x, c = batch
    n = len(x)
    t = _sample_t(base.spec.schedule, rng, n)
    g = cfg.draw_guidance(rng, n)
    eps = rng.standard_normal(x.shape)
    per, PB, PG = cfg_distill_losses(base, guide, x, c, t, g, eps, cfg.loss_weighting)
    _check_finite(float(per.data.mean()), "distill-cfg", step)
    opt = opt or Adam(cfg.optimizer, cfg.betas)
    loss = _update_guide(guide, per, PB, PG, opt, cfg.lr_at(step))
    return loss, guide, per.data, g


def distill_cfg(
    base: ParameterSet,
    guide: ParameterSet,
    dataset: Dataset,
    cfg: TrainConfig,
    *,
    log: Logger | None = None,
    phase: str = "distill-cfg",
) -> ParameterSet:
    """Run CFG distillation for ``cfg.steps`` updates; returns the trained guide."""
    check_pairing(base, guide)
    before = base.checksum()
    guide = guide.copy()
    rng = stream(cfg.seed, "training", _phase_id("distill-cfg"))
    opt = Adam(cfg.optimizer, cfg.betas)
    window = _Window()
    for step in range(1, cfg.steps + 1):
        batch = dataset.batch(rng, cfg.batch_size)
        _, guide, per, g = cfg_distill_step(base, guide, batch, cfg, rng, opt, step - 1)
        window.add(per, g)
        if log is not None and (step == 1 or step % cfg.log_every == 0 or step == cfg.steps):
            log(window.record(phase, step))
    if base.checksum() != before:
        raise FrozenBaseViolation("base parameters changed during distillation")
    guide.meta.update(
        parent=base.checksum(),
        trainer_step=guide.meta.get("trainer_step", 0) + cfg.steps,
        train=cfg.to_dict(),
        sampling_steps=None,
    )
    return guide


def distill_fixed_guidance(
    base: ParameterSet, guide: ParameterSet, dataset: Dataset, cfg: TrainConfig, g_fixed: float = 8.0, **kw
) -> ParameterSet:
    """CFG distillation with one constant guidance value."""
    fixed = TrainConfig(**{**cfg.to_dict(), "guidance_fixed": float(g_fixed)})
    return distill_cfg(base, guide, dataset, fixed, **kw)


# ------------------------------------------------------ progressive distillation


def progressive_target(teacher_fn, z_t, t, s, sched: NoiseSchedule, mid=None) -> np.ndarray:
    """Epsilon a one-step student must predict to land on the teacher's
    two-step DDIM endpoint t -> mid -> s.

    ``teacher_fn(z, t)`` returns epsilon. ``t``, ``s`` and ``mid`` may be scalars
    or per-sample arrays; ``mid`` defaults to the midpoint.
    """
    z_t = np.asarray(z_t, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    mid = 0.5 * (t + s) if mid is None else np.asarray(mid, dtype=np.float64)
    z_mid = ddim_step(z_t, teacher_fn(z_t, t), t, mid, sched)
    z_s = ddim_step(z_mid, teacher_fn(z_mid, mid), mid, s, sched)
    a_t, s_t = sched.alpha_sigma(t)
    a_s, s_s = sched.alpha_sigma(s)
    ratio = a_s / a_t
    denom = s_s - ratio * s_t
    if np.any(np.abs(denom) < 1e-8):
        raise SingularityError("equal-SNR endpoints: one-step inversion is singular")
    shape = (-1,) + (1,) * (z_t.ndim - 1)
    if np.ndim(ratio):
        ratio, denom = ratio.reshape(shape), denom.reshape(shape)
    return (z_s - ratio * z_t) / denom


def progressive_distill_round(
    base: ParameterSet,
    teacher: ParameterSet,
    rnd: DistillRound,
    dataset: Dataset,
    cfg: TrainConfig,
    *,
    log: Logger | None = None,
) -> ParameterSet:
    """Train a guide student (warm-started from ``teacher``) whose single guided
    pass reproduces two teacher DDIM steps in one, on the halved grid."""
    check_pairing(base, teacher)
    before = base.checksum()
    sched = base.spec.schedule
    student = teacher.copy()
    grid_t = timestep_grid(sched, rnd.teacher_steps)
    grid_s = grid_t[::2]
    rng = stream(cfg.seed, "training", _phase_id("distill-steps"), rnd.index)
    opt = Adam(cfg.optimizer, cfg.betas)
    window = _Window()
    phase = f"distill-steps/{rnd.teacher_steps}->{rnd.student_steps}"
    for step in range(1, cfg.steps + 1):
        x, c = dataset.batch(rng, cfg.batch_size)
        n = len(x)
        g = cfg.draw_guidance(rng, n)
        i = rng.integers(0, rnd.student_steps, n)
        t, s, mid = grid_s[i], grid_s[i + 1], grid_t[2 * i + 1]
        eps = rng.standard_normal(x.shape)
        z = diffuse(x, t, eps, sched)

        def teacher_fn(zz, tt):
            return guided_eps(base, teacher, zz, tt, c, g)[0]

        target = progressive_target(teacher_fn, z, t, s, sched, mid)
        e, PB, PG = student_graph(base, student, z, t, c, g)
        per = ag.sum_squares(e - target) * loss_weight(sched, t, cfg.loss_weighting)
        _check_finite(float(per.data.mean()), phase, step)
        _update_guide(student, per, PB, PG, opt, cfg.lr_at(step - 1))
        window.add(per.data, g)
        if log is not None and (step == 1 or step % cfg.log_every == 0 or step == cfg.steps):
            log(window.record(phase, step))
    if base.checksum() != before:
        raise FrozenBaseViolation("base parameters changed during step distillation")
    student.meta.update(
        parent=teacher.checksum(),
        trainer_step=teacher.meta.get("trainer_step", 0) + cfg.steps,
        sampling_steps=rnd.student_steps,
        warm_start=True,
        train=cfg.to_dict(),
    )
    return student


def progressive_ladder(
    base: ParameterSet,
    guide: ParameterSet,
    dataset: Dataset,
    cfg: TrainConfig,
    ladder=(64, 32, 16, 8),
    *,
    log: Logger | None = None,
) -> list[tuple[int, ParameterSet, float]]:
    """Halve the sampling steps round by round; returns (steps, guide, last loss)."""
    out = []
    teacher = guide
    for k, (n_t, n_s) in enumerate(zip(ladder[:-1], ladder[1:])):
        if n_s * 2 != n_t:
            raise ValueError(f"ladder must halve each round, got {n_t} -> {n_s}")
        records: list[dict] = []

        def sink(rec, records=records):
            records.append(rec)
            if log is not None:
                log(rec)

        teacher = progressive_distill_round(base, teacher, DistillRound(n_t, k), dataset, cfg, log=sink)
        out.append((n_s, teacher, records[-1]["loss"] if records else float("nan")))
    return out


# ----------------------------------------------------------------- evaluation


def cfg_relative_error(
    base: ParameterSet,
    guide: ParameterSet,
    x: np.ndarray,
    c: np.ndarray,
    gs=(2.0, 4.0, 8.0),
    n_t: int = 20,
    seed: int = 0,
) -> float:
    """Mean over (g, t) of ||e_student - e_teacher|| / ||e_teacher|| on held-out data."""
    check_pairing(base, guide)
    sched = base.spec.schedule
    ts = np.linspace(sched.t_min, sched.t_max, n_t)
    rng = stream(seed, "eval")
    errs = []
    x = np.asarray(x, dtype=np.float64)
    for g in gs:
        for t in ts:
            eps = rng.standard_normal(x.shape)
            z = diffuse(x, t, eps, sched)
            teacher = cfg_teacher(base, z, t, c, g)
            student = guided_eps(base, guide, z, t, c, g)[0]
            errs.append(np.linalg.norm(student - teacher) / np.linalg.norm(teacher))
    return float(np.mean(errs))
