"""Command-line driver: ``pgdd <subcommand> --config FILE``.

Every subcommand works inside the run directory ``[run] out`` (or ``--out``),
echoes the resolved config there, appends its metrics to
``metrics/<subcommand>.jsonl`` and its wall-clock timings to ``timing.jsonl``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    atomic_write,
    class_alignment,
    count_cost,
    emit_report,
    injection_stats,
    shared_bounds,
    sliced_wasserstein,
    train_probe,
)
from .checkpoint import CheckpointError, file_hash, load_dataset, load_params, save_dataset, save_params
from .config import Config, ConfigError, load
from .data import gen_dataset, shifted_params
from .distill import (
    FrozenBaseViolation,
    TrainingDiverged,
    cfg_relative_error,
    distill_cfg,
    finetune_base,
    progressive_ladder,
    train_base,
)
from .guide import init_guide
from .network import ParameterSet, PortShapeError
from .oracle import oracle_sample
from .sampler import check_pairing, sample_cfg, sample_guided, write_trace
from .schedule import timestep_grid

COMMANDS = ("gen-data", "train-base", "distill-cfg", "distill-steps", "finetune-base", "sample", "analyze", "report")


class RunError(RuntimeError):
    pass


@dataclass
class Pair:
    """A (base, guide) pairing that has passed the port compatibility check."""

    base: ParameterSet
    guide: ParameterSet
    base_hash: str
    guide_hash: str

    def eps(self, z, t, c, g):
        from .sampler import guided_eps

        return guided_eps(self.base, self.guide, z, t, c, g)[0]


def plug(guide_ckpt, base_ckpt) -> Pair:
    """Pair a trained guide with any compatible base. Both files are only read."""
    base = load_params(base_ckpt, owner="base")
    guide = load_params(guide_ckpt, owner="guide")
    check_pairing(base, guide)
    return Pair(base, guide, file_hash(base_ckpt), file_hash(guide_ckpt))


# ------------------------------------------------------------------ helpers


class Run:
    def __init__(self, cfg: Config, command: str):
        self.cfg = cfg
        self.command = command
        self.dir = cfg.out
        self.dir.mkdir(parents=True, exist_ok=True)
        self.records: list[dict] = []
        self.t0 = time.perf_counter()
        atomic_write(self.dir / f"resolved.{command}.cfg", f"# pgdd {__version__}\n" + cfg.text())

    def path(self, name: str) -> Path:
        return self.dir / name

    def log(self, rec: dict) -> None:
        self.records.append(rec)

    def finish(self, **extra) -> None:
        lines = "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)
        atomic_write(self.dir / "metrics" / f"{self.command}.jsonl", lines)
        timing = {"command": self.command, "wall_seconds": round(time.perf_counter() - self.t0, 3), **extra}
        with open(self.dir / "timing.jsonl", "a", encoding="utf-8") as f:
            f.write(json.dumps(timing, sort_keys=True) + "\n")

    def need(self, name: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise RunError(f"missing {p}; run the producing subcommand first")
        return p


def _dataset(run: Run, shifted: bool = False):
    name = "data_shifted.pgdd" if shifted else "data.pgdd"
    p = run.path(name)
    if p.exists():
        return load_dataset(p)
    cfg = run.cfg
    params = cfg.data_params()
    if shifted:
        params = shifted_params(cfg["data"]["kind"], params, cfg["finetune-base"]["shift"])
    ds = gen_dataset(cfg["data"]["kind"], params, cfg.seed)
    save_dataset(ds, p)
    return ds


def _ckpt(run: Run, path: str, default: str) -> Path:
    """Checkpoint path; relative paths are taken inside the run directory."""
    if not path:
        return run.need(default)
    p = Path(path)
    return p if p.is_absolute() else run.need(path)


def _base(run: Run, path: str = "") -> ParameterSet:
    return load_params(_ckpt(run, path, "base.pgdd"), owner="base")


def _classes(spec: str, count: int, num_classes: int) -> np.ndarray:
    if spec == "all":
        return np.arange(count) % num_classes
    return np.full(count, int(spec))


# -------------------------------------------------------------- subcommands


def cmd_gen_data(run: Run, args) -> None:
    for p in ("data.pgdd", "data_shifted.pgdd"):
        if run.path(p).exists():
            run.path(p).unlink()
    ds = _dataset(run)
    run.log({"phase": "gen-data", "count": int(len(ds.x)), "holdout": int(len(ds.x_holdout)), "hash": file_hash(run.path("data.pgdd"))})


def cmd_train_base(run: Run, args) -> None:
    cfg = run.cfg
    tc = cfg.train_config("train-base")
    base = train_base(cfg.base_spec(), _dataset(run), tc, log=run.log)
    h = save_params(base, run.path("base.pgdd"))
    run.log({"phase": "train-base", "checkpoint": h})


def cmd_finetune_base(run: Run, args) -> None:
    cfg = run.cfg
    base = _base(run)
    out = finetune_base(base, _dataset(run, shifted=True), cfg.train_config("finetune-base"), log=run.log)
    out.meta["parent"] = file_hash(run.path("base.pgdd"))
    h = save_params(out, run.path("base_finetuned.pgdd"))
    run.log({"phase": "finetune-base", "checkpoint": h, "parent": out.meta["parent"]})


def cmd_distill_cfg(run: Run, args) -> None:
    cfg = run.cfg
    base = _base(run)
    gspec = cfg.guide_spec()
    guide = init_guide(gspec, cfg.seed, base if gspec.variant == "full" else None)
    before = base.checksum()
    guide = distill_cfg(base, guide, _dataset(run), cfg.train_config("distill-cfg"), log=run.log)
    guide.meta["parent"] = file_hash(run.path("base.pgdd"))
    h = save_params(guide, run.path("guide.pgdd"))
    run.log({"phase": "distill-cfg", "checkpoint": h, "base_checksum_before": before, "base_checksum_after": base.checksum()})


def cmd_distill_steps(run: Run, args) -> None:
    cfg = run.cfg
    base = _base(run)
    teacher = load_params(run.need("guide.pgdd"), owner="guide")
    ladder = cfg["distill-steps"]["ladder"]
    before = base.checksum()
    rounds = progressive_ladder(base, teacher, _dataset(run), cfg.train_config("distill-steps"), ladder, log=run.log)
    parent = file_hash(run.path("guide.pgdd"))
    for n, g, loss in rounds:
        g.meta["parent"] = parent
        h = parent = save_params(g, run.path(f"guide_{n}.pgdd"))
        run.log({"phase": "distill-steps", "student_steps": n, "final_loss": loss, "checkpoint": h})
    run.log({"phase": "distill-steps", "base_checksum_before": before, "base_checksum_after": base.checksum()})


def cmd_sample(run: Run, args) -> None:
    cfg = run.cfg
    s = cfg["sample"]
    mode = args.mode or s["mode"]
    g = s["guidance"] if args.guidance is None else args.guidance
    n_steps = s["steps"] if args.steps is None else args.steps
    spec = cfg.base_spec()
    c = _classes(s["classes"], s["count"], spec.num_classes)
    grid = timestep_grid(spec.schedule, n_steps)
    seed = cfg.seed
    if mode == "oracle":
        ds = _dataset(run)
        trace = oracle_sample(ds.mixture(), c, g, grid, seed, sched=spec.schedule, record="summary")
    elif mode == "cfg":
        trace = sample_cfg(_base(run, s["base"]), c, g, grid, seed, record="summary")
    else:
        pair = plug(_ckpt(run, s["guide"], "guide.pgdd"), _ckpt(run, s["base"], "base.pgdd"))
        trace = sample_guided(pair.base, pair.guide, c, g, grid, seed, record="summary")
    tag = f"{mode}_g{g:g}_n{n_steps}"
    from .checkpoint import _atomic_bytes, encode

    data = encode({"owner": "samples", "mode": mode, "g": g, "steps": n_steps}, {"x": trace.x0.astype(np.float32), "labels": c.astype(np.float32)})
    _atomic_bytes(run.path(f"samples_{tag}.pgdd"), data)
    write_trace(trace, run.path(f"trace_{tag}.jsonl"))
    run.log({"phase": "sample", "mode": mode, "g": g, "steps": n_steps, "base_passes": trace.base_passes, "guide_passes": trace.guide_passes})


def _analysis(run: Run, args) -> dict:
    cfg = run.cfg
    a = cfg["analyze"]
    ds = _dataset(run)
    base = _base(run, cfg["sample"]["base"])
    spec = base.spec
    out: dict = {}
    cost = count_cost(spec, cfg.guide_spec())
    out["cost.flop_ratio"] = cost.flop_ratio
    out["cost.param_ratio"] = cost.param_ratio
    n_eval = min(a["eval_count"], len(ds.x_holdout))
    xh, ch = ds.x_holdout[:n_eval], ds.labels_holdout[:n_eval]
    heatmaps = []
    guide_path = run.dir / cfg["sample"]["guide"] if cfg["sample"]["guide"] else run.path("guide.pgdd")
    if guide_path.exists():
        pair = plug(guide_path, _ckpt(run, cfg["sample"]["base"], "base.pgdd"))
        out["cfg_relative_error"] = cfg_relative_error(pair.base, pair.guide, xh, ch, a["eval_guidance"], a["eval_t_points"], cfg.seed)
        grid = timestep_grid(spec.schedule, cfg["sample"]["steps"])
        c = _classes("all", a["heatmap_count"], spec.num_classes)
        for g in a["heatmap_guidance"]:
            tr = sample_guided(pair.base, pair.guide, c, g, grid, cfg.seed, record="summary")
            heatmaps.append(injection_stats(tr))
        heatmaps = shared_bounds(heatmaps)
    probe = train_probe(ds, cfg.seed)
    out["probe.test_accuracy"] = probe.test_accuracy
    for f in sorted(run.dir.glob("samples_*.pgdd")):
        from .checkpoint import decode

        meta, t = decode(f.read_bytes(), str(f))
        x, lab = t["x"], t["labels"].astype(np.int64)
        key = f.stem[len("samples_") :]
        out[f"swd.{key}"] = sliced_wasserstein(x, ds.x_holdout, a["num_projections"], cfg.seed)
        out[f"alignment.{key}"] = class_alignment(x, lab, probe)
    return {"metrics": out, "cost": cost, "heatmaps": heatmaps}


def cmd_analyze(run: Run, args) -> None:
    res = _analysis(run, args)
    atomic_write(run.path("analysis.json"), json.dumps(res["metrics"], sort_keys=True, indent=1) + "\n")
    run.log({"phase": "analyze", **res["metrics"]})


def cmd_report(run: Run, args) -> None:
    res = _analysis(run, args)
    curves = {}
    if res["heatmaps"]:
        curves["injection_time_mean"] = {f"g={h.g:g}": h.raw.mean(axis=0) for h in res["heatmaps"]}
    files = emit_report(run.path("report"), res["cost"], res["heatmaps"], res["metrics"], curves)
    run.log({"phase": "report", "files": [p.name for p in files]})


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train-base": cmd_train_base,
    "distill-cfg": cmd_distill_cfg,
    "distill-steps": cmd_distill_steps,
    "finetune-base": cmd_finetune_base,
    "sample": cmd_sample,
    "analyze": cmd_analyze,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pgdd", description="Guide distillation experiments on synthetic data.")
    p.add_argument("--version", action="version", version=f"pgdd {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="experiment config (INI)")
        sp.add_argument("--seed", type=int, help="root seed, overrides [run] seed")
        sp.add_argument("--out", help="run directory, overrides [run] out")
        sp.add_argument("--steps", type=int, help="training steps, or sampling steps for 'sample'")
        sp.add_argument("--guidance", type=float, help="guidance value for 'sample'")
        sp.add_argument("--mode", choices=("cfg", "guided", "oracle"), help="sampling regime for 'sample'")
    return p


def _apply_overrides(cfg: Config, args) -> None:
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2**64:
            raise ConfigError("--seed", None, "seed must fit in an unsigned 64-bit integer")
        cfg.values["run"]["seed"] = args.seed
    if args.out:
        cfg.values["run"]["out"] = args.out
    if args.steps is not None and args.command in cfg.values and "steps" in cfg.values[args.command]:
        if args.steps < (1 if args.command == "sample" else 0):
            raise ConfigError("--steps", None, "steps out of range")
        cfg.values[args.command]["steps"] = args.steps
        args.steps = None if args.command != "sample" else args.steps
    if args.guidance is not None:
        cfg.values["sample"]["guidance"] = args.guidance
    if args.mode:
        cfg.values["sample"]["mode"] = args.mode


def _threads() -> int | None:
    v = os.environ.get("PGDD_THREADS")
    if not v:
        return None
    n = int(v)
    if n < 1:
        raise ValueError("PGDD_THREADS must be >= 1")
    return n


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load(args.config)
        _apply_overrides(cfg, args)
        n = _threads()
        r = Run(cfg, args.command)
        if n is not None:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=n):
                HANDLERS[args.command](r, args)
        else:
            HANDLERS[args.command](r, args)
        r.finish()
    except (ConfigError, CheckpointError, PortShapeError, RunError, TrainingDiverged, FrozenBaseViolation, ValueError) as e:
        print(f"pgdd {args.command}: error: {e}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())
