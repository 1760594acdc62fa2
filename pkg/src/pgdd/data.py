"""Synthetic labelled datasets and the domain shifts used for fine-tuning.

``mixture2d``: K isotropic Gaussian classes with means on a ring.
``shapes16``: 16x16 grayscale primitives in [-1, 1], one primitive per class.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .oracle import MixtureSpec, ring_mixture
from .rng import stream

KINDS = ("mixture2d", "shapes16")
SHAPES = ("square", "disk", "hbar", "vbar", "cross", "ring")
SHIFTS = ("none", "rotate45", "scale1.5", "invert")

MIXTURE_DEFAULTS = {"num_classes": 2, "radius": 2.0, "std": 0.35, "rotation_deg": 0.0, "scale": 1.0, "count": 20000, "holdout": 2000}
SHAPES_DEFAULTS = {"num_classes": 4, "polarity": 1.0, "count": 8000, "holdout": 800}


@dataclass
class Dataset:
    kind: str
    x: np.ndarray
    labels: np.ndarray
    x_holdout: np.ndarray
    labels_holdout: np.ndarray
    params: dict = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return int(self.params["num_classes"])

    def batch(self, rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
        idx = rng.integers(0, len(self.x), size)
        return self.x[idx].astype(np.float64), self.labels[idx]

    def mixture(self) -> MixtureSpec:
        if self.kind != "mixture2d":
            raise ValueError("only mixture2d datasets have a closed-form mixture")
        return mixture_from_params(self.params)


def mixture_from_params(params: dict) -> MixtureSpec:
    return ring_mixture(
        int(params["num_classes"]),
        radius=float(params["radius"]),
        std=float(params["std"]),
        rotation_deg=float(params["rotation_deg"]),
        scale=float(params["scale"]),
    )


def _draw_shape(kind: str, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:16, 0:16] + 0.5
    cy, cx = rng.uniform(5.0, 11.0, size=2)
    r = rng.uniform(2.5, 4.5)
    if kind == "square":
        on = (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
    elif kind == "disk":
        on = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    elif kind == "hbar":
        on = (np.abs(yy - cy) <= 1.5) & (np.abs(xx - cx) <= r + 2)
    elif kind == "vbar":
        on = (np.abs(xx - cx) <= 1.5) & (np.abs(yy - cy) <= r + 2)
    elif kind == "cross":
        on = ((np.abs(yy - cy) <= 1.0) | (np.abs(xx - cx) <= 1.0)) & (np.abs(yy - cy) <= r + 1) & (np.abs(xx - cx) <= r + 1)
    else:
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        on = (d2 <= (r + 1) ** 2) & (d2 >= (r - 1) ** 2)
    return np.where(on, 1.0, -1.0)


def _shapes(labels: np.ndarray, rng: np.random.Generator, polarity: float) -> np.ndarray:
    imgs = np.stack([_draw_shape(SHAPES[k], rng) for k in labels]) * polarity
    return imgs[:, None, :, :]


def gen_dataset(kind: str, params: dict | None = None, seed: int = 0) -> Dataset:
    """Deterministic labelled dataset with a disjoint held-out split."""
    if kind not in KINDS:
        raise ValueError(f"unknown dataset kind {kind!r}; expected one of {KINDS}")
    base = MIXTURE_DEFAULTS if kind == "mixture2d" else SHAPES_DEFAULTS
    unknown = set(params or {}) - set(base)
    if unknown:
        raise ValueError(f"unknown {kind} parameters: {sorted(unknown)}")
    p = {**base, **(params or {})}
    K = int(p["num_classes"])
    if K < 1 or (kind == "shapes16" and K > len(SHAPES)):
        raise ValueError(f"invalid number of classes K={K} for {kind}")
    rng = stream(seed, "data")
    n, nh = int(p["count"]), int(p["holdout"])
    labels = rng.integers(0, K, n + nh)
    if kind == "mixture2d":
        x = mixture_from_params(p).sample(labels, rng)
    else:
        x = _shapes(labels, rng, float(p["polarity"]))
    x = x.astype(np.float32)
    return Dataset(kind, x[:n], labels[:n], x[n:], labels[n:], p)


def shifted_params(kind: str, params: dict, shift: str) -> dict:
    """Parameters of the domain-shifted dataset standing in for a style fine-tune."""
    p = dict(params)
    if shift == "none":
        return p
    if kind == "mixture2d" and shift == "rotate45":
        p["rotation_deg"] = float(p["rotation_deg"]) + 45.0
    elif kind == "mixture2d" and shift == "scale1.5":
        p["scale"] = float(p["scale"]) * 1.5
    elif kind == "shapes16" and shift == "invert":
        p["polarity"] = -float(p["polarity"])
    else:
        raise ValueError(f"shift {shift!r} does not apply to {kind}")
    return p
