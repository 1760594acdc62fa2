"""Cost accounting, injection statistics and desk-scale sample-quality metrics.

FLOPs are counted analytically as 2 x multiply-accumulates of every dense and
convolution layer. Elementwise work (activations, additions, pooling) and the
class-embedding lookup are not counted.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import wasserstein_distance

from .checkpoint import _atomic_bytes
from .guide import GuideSpec, init_guide
from .network import DenoiserSpec, init_denoiser
from .rng import stream
from .sampler import SampleTrace


class UnsupportedLayer(ValueError):
    pass


@dataclass(frozen=True)
class CostReport:
    base_flops: float
    guide_flops: float
    base_params: float
    guide_params: float
    layers: tuple = ()  # (owner, layer, flops, params) rows

    def __post_init__(self):
        for name in ("base_flops", "guide_flops", "base_params", "guide_params"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.base_flops <= 0 or self.base_params <= 0:
            raise ValueError("base totals must be positive")

    @property
    def student_step(self) -> float:
        return self.base_flops + self.guide_flops

    @property
    def cfg_step(self) -> float:
        return 2.0 * self.base_flops

    @property
    def flop_ratio(self) -> float:
        """Student-step FLOPs over CFG-step FLOPs."""
        return self.student_step / self.cfg_step

    @property
    def param_ratio(self) -> float:
        return self.guide_params / self.base_params

    def rows(self) -> list[dict]:
        return [
            {"component": "base", "flops": self.base_flops, "params": self.base_params},
            {"component": "guide", "flops": self.guide_flops, "params": self.guide_params},
            {"component": "student_step", "flops": self.student_step, "params": self.base_params + self.guide_params},
            {"component": "cfg_step", "flops": self.cfg_step, "params": self.base_params},
        ]


def cost_from_totals(base_flops, guide_flops, base_params, guide_params) -> CostReport:
    """Cost report for externally published per-pass totals."""
    return CostReport(float(base_flops), float(guide_flops), float(base_params), float(guide_params))


def _level(name: str, spec: DenoiserSpec, variant: str | None) -> int:
    L = spec.num_ports
    head = name.split(".")[0]
    if head in ("stem", "out", "hint"):
        return 0
    if head == "mid":
        return L - 1
    idx = int(name.split(".")[1])
    if head == "enc":
        return idx
    if head in ("dec", "port"):
        return L - 1 - idx
    raise UnsupportedLayer(f"no spatial level known for layer {name!r}")


def layer_costs(tensors: dict, spec: DenoiserSpec, variant: str | None = None) -> list[tuple[str, float, int]]:
    """(layer, FLOPs per sample, params) for every parameterised layer."""
    out = []
    seen = set()
    for name in sorted(tensors):
        layer = name.rsplit(".", 1)[0]
        if layer in seen:
            continue
        seen.add(layer)
        params = sum(int(v.size) for k, v in tensors.items() if k.rsplit(".", 1)[0] == layer)
        if name == "cond.table":
            out.append((layer, 0.0, params))
            continue
        W = tensors.get(f"{layer}.W")
        if W is None:
            raise UnsupportedLayer(f"layer {layer!r} has no weight tensor")
        if W.ndim == 2:
            macs = W.shape[0] * W.shape[1]
        elif W.ndim == 4:
            size = spec.level_size(_level(layer, spec, variant))
            macs = W.shape[0] * W.shape[1] * W.shape[2] * W.shape[3] * size * size
        else:
            raise UnsupportedLayer(f"layer {layer!r}: weights of rank {W.ndim}")
        out.append((layer, 2.0 * macs, params))
    return out


def count_cost(base_spec: DenoiserSpec, guide_spec: GuideSpec) -> CostReport:
    """Per-sample FLOPs of one base pass and one guide pass, plus parameter counts."""
    if guide_spec.base_spec != base_spec:
        raise ValueError("guide spec was built for a different base spec")
    base = init_denoiser(base_spec, 0).tensors
    guide = init_guide(guide_spec, 0).tensors
    b = layer_costs(base, base_spec)
    g = layer_costs(guide, base_spec, guide_spec.variant)
    rows = tuple(("base",) + r for r in b) + tuple(("guide",) + r for r in g)
    return CostReport(
        base_flops=sum(r[1] for r in b),
        guide_flops=sum(r[1] for r in g),
        base_params=sum(r[2] for r in b),
        guide_params=sum(r[2] for r in g),
        layers=rows,
    )


# ------------------------------------------------------------ injection maps


@dataclass
class InjectionHeatmap:
    """Per-port, per-step injection magnitudes of one sampling run.

    ``raw[p, i]`` is the mean absolute injection at port p and step i.
    ``maps[p]`` (image mode) stacks the channel-mean |injection| maps over steps.
    Normalised values use the shared ``bounds`` (global min-max by default).
    """

    ts: np.ndarray
    raw: np.ndarray
    g: float | None
    bounds: tuple[float, float]
    maps: list = field(default_factory=list)
    normalization: str = "global-minmax"

    @property
    def num_ports(self) -> int:
        return self.raw.shape[0]

    def _scale(self, v: np.ndarray) -> np.ndarray:
        lo, hi = self.bounds
        if hi <= lo:
            return np.zeros_like(v)
        return np.clip((v - lo) / (hi - lo), 0.0, 1.0)

    @property
    def normalized(self) -> np.ndarray:
        return self._scale(self.raw)

    def normalized_maps(self) -> list[np.ndarray]:
        return [self._scale(m) for m in self.maps]

    def time_mean(self) -> np.ndarray:
        return self.raw.mean(axis=1)

    def early_late(self) -> tuple[np.ndarray, np.ndarray]:
        """Mean magnitude over the first and last quartile of steps, per port."""
        n = self.raw.shape[1]
        q = max(1, n // 4)
        return self.raw[:, :q].mean(axis=1), self.raw[:, -q:].mean(axis=1)


def injection_stats(trace: SampleTrace, normalization: str = "global-minmax", bounds=None) -> InjectionHeatmap:
    """Heatmap of a guided trace. Pass ``bounds`` to share a scale across figures."""
    if not trace.has_injections:
        raise ValueError("trace carries no injection summaries; sample in guided mode")
    if normalization not in ("global-minmax", "none"):
        raise ValueError(f"unknown normalization {normalization!r}")
    raw = np.stack(trace.inj_l1, axis=1)  # (ports, steps)
    maps = []
    if trace.inj_maps:
        maps = [np.stack([step[p] for step in trace.inj_maps]) for p in range(raw.shape[0])]
    if bounds is None:
        if normalization == "none":
            bounds = (0.0, 1.0)
        else:
            vals = [raw.ravel()] + [m.ravel() for m in maps]
            allv = np.concatenate(vals)
            bounds = (float(allv.min()), float(allv.max()))
    return InjectionHeatmap(np.asarray(trace.ts[:-1]), raw, trace.g, tuple(bounds), maps, normalization)


def shared_bounds(heatmaps: Sequence[InjectionHeatmap]) -> list[InjectionHeatmap]:
    """Rescale several heatmaps onto one global min-max range."""
    lo = min(float(h.raw.min()) for h in heatmaps)
    hi = max(float(h.raw.max()) for h in heatmaps)
    for h in heatmaps:
        if h.maps:
            lo = min(lo, min(float(m.min()) for m in h.maps))
            hi = max(hi, max(float(m.max()) for m in h.maps))
    return [InjectionHeatmap(h.ts, h.raw, h.g, (lo, hi), h.maps, h.normalization) for h in heatmaps]


# ----------------------------------------------------------- sample quality


def sliced_wasserstein(a, b, num_projections: int = 128, seed: int = 0) -> float:
    """Mean 1-D Wasserstein-1 distance over random unit projections."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("sliced_wasserstein needs non-empty sample sets")
    a = a.reshape(len(a), -1)
    b = b.reshape(len(b), -1)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimensionality differs: {a.shape[1]} vs {b.shape[1]}")
    if num_projections < 1:
        raise ValueError("num_projections must be >= 1")
    d = a.shape[1]
    dirs = stream(seed, "eval", 1).standard_normal((num_projections, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    pa, pb = a @ dirs.T, b @ dirs.T
    return float(np.mean([wasserstein_distance(pa[:, i], pb[:, i]) for i in range(num_projections)]))


class Probe:
    """Logistic-regression classifier trained on real data."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.model = None
        self.test_accuracy: float | None = None

    @property
    def trained(self) -> bool:
        return self.model is not None

    def fit(self, x, labels, x_test=None, labels_test=None) -> "Probe":
        from sklearn.linear_model import LogisticRegression
        from sklearn.pipeline import make_pipeline
        from sklearn.preprocessing import StandardScaler

        x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
        self.model = make_pipeline(StandardScaler(), LogisticRegression(max_iter=2000, random_state=self.seed))
        self.model.fit(x, labels)
        if x_test is not None:
            self.test_accuracy = float(np.mean(self.predict(x_test) == np.asarray(labels_test)))
        return self

    def predict(self, x) -> np.ndarray:
        if not self.trained:
            raise ValueError("probe has not been trained")
        x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
        return self.model.predict(x)


def train_probe(dataset, seed: int = 0) -> Probe:
    return Probe(seed).fit(dataset.x, dataset.labels, dataset.x_holdout, dataset.labels_holdout)


def class_alignment(samples, labels, probe: Probe) -> float:
    """Fraction of samples the probe assigns to their conditioning class."""
    if not isinstance(probe, Probe) or not probe.trained:
        raise ValueError("class_alignment needs a trained probe")
    labels = np.asarray(labels)
    if len(samples) != len(labels):
        raise ValueError("one label per sample required")
    return float(np.mean(probe.predict(samples) == labels))


# ------------------------------------------------------------------ reports


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _csv_text(header: Sequence[str], rows: Iterable[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(r[h]) for h in header])
    return buf.getvalue()


def atomic_write(path: Path, text: str) -> None:
    _atomic_bytes(Path(path), text.encode("utf-8"))


def heatmap_svg(h: InjectionHeatmap, cell: int = 12) -> str:
    """Ports as rows, sampling steps as columns, grey level = normalised magnitude."""
    P, S = h.raw.shape
    norm = h.normalized
    left, top = 60, 30
    width, height = left + S * cell + 10, top + P * cell + 30
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<text x="{left}" y="18" font-family="monospace" font-size="11">injection g={_fmt(h.g)}</text>',
    ]
    for p in range(P):
        out.append(f'<text x="4" y="{top + p * cell + cell - 2}" font-family="monospace" font-size="10">port {p}</text>')
        for i in range(S):
            v = int(round(255 * (1.0 - norm[p, i])))
            out.append(f'<rect x="{left + i * cell}" y="{top + p * cell}" width="{cell}" height="{cell}" fill="rgb({v},{v},{v})"/>')
    out.append(f'<text x="{left}" y="{height - 8}" font-family="monospace" font-size="10">step 0 .. {S - 1} (t high to low)</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def curve_svg(series: dict, title: str = "", w: int = 360, h: int = 220) -> str:
    """Line plot of named y-series over their index."""
    pad = 40
    ys = [float(v) for s in series.values() for v in s]
    lo, hi = (min(ys), max(ys)) if ys else (0.0, 1.0)
    if hi <= lo:
        hi = lo + 1.0
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
        f'<text x="{pad}" y="16" font-family="monospace" font-size="11">{title}</text>',
        f'<line x1="{pad}" y1="{h - pad}" x2="{w - 10}" y2="{h - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="20" x2="{pad}" y2="{h - pad}" stroke="black"/>',
    ]
    shades = ["#000000", "#555555", "#999999", "#cc3333", "#3366cc"]
    for k, (name, s) in enumerate(sorted(series.items())):
        s = [float(v) for v in s]
        n = max(len(s) - 1, 1)
        pts = " ".join(
            f"{pad + (w - pad - 10) * i / n:.2f},{h - pad - (h - pad - 20) * (v - lo) / (hi - lo):.2f}" for i, v in enumerate(s)
        )
        col = shades[k % len(shades)]
        out.append(f'<polyline fill="none" stroke="{col}" points="{pts}"/>')
        out.append(f'<text x="{w - 110}" y="{30 + 12 * k}" font-family="monospace" font-size="10" fill="{col}">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


METRIC_HEADER = ("name", "value")
COST_HEADER = ("component", "flops", "params")
INJECTION_HEADER = ("g", "port", "step", "t", "raw", "normalized")


def emit_report(
    out_dir,
    cost: CostReport | None = None,
    heatmaps: Sequence[InjectionHeatmap] = (),
    metrics: dict | None = None,
    curves: dict | None = None,
) -> list[Path]:
    """Write CSV tables and SVG figures; identical inputs give identical bytes."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create report directory {out_dir}: {e}") from e
    written = []

    def put(name, text):
        atomic_write(out_dir / name, text)
        written.append(out_dir / name)

    put("metrics.csv", _csv_text(METRIC_HEADER, ({"name": k, "value": v} for k, v in sorted((metrics or {}).items()))))
    put("cost.csv", _csv_text(COST_HEADER, cost.rows() if cost else []))
    inj_rows = []
    for h in heatmaps:
        norm = h.normalized
        for p in range(h.num_ports):
            for i in range(h.raw.shape[1]):
                inj_rows.append({"g": h.g, "port": p, "step": i, "t": h.ts[i], "raw": h.raw[p, i], "normalized": norm[p, i]})
    put("injection.csv", _csv_text(INJECTION_HEADER, inj_rows))
    for h in heatmaps:
        put(f"heatmap_g{h.g:g}.svg", heatmap_svg(h))
    for name, series in sorted((curves or {}).items()):
        put(f"{name}.svg", curve_svg(series, name))
    meta = {
        "normalization": sorted({h.normalization for h in heatmaps}),
        "bounds": [list(h.bounds) for h in heatmaps],
        "files": sorted(p.name for p in written),
    }
    put("report.json", json.dumps(meta, sort_keys=True, indent=1) + "\n")
    return written
