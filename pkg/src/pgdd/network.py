"""Conditional epsilon-predicting denoiser with additive decoder injection ports.

Two backbones share one encoder/decoder layout:

* ``point2d``: residual MLP blocks on 2-D points.
* ``image16``: residual 3x3-conv blocks on 1x16x16 images, average-pool
  downsampling and nearest upsampling between levels.

Each decoder block concatenates the running features with the matching encoder
skip; the guide's injection for that port is added to the merged tensor right
after the concatenation. The raw network output F is wrapped as

    eps_hat = c_skip(t) * z + c_out(t) * F

with c_skip, c_out chosen so a zero F already gives the Bayes-optimal epsilon for
data of variance ``sigma_data**2``. This keeps x0 estimates well conditioned where
alpha_t is tiny, which the few-step samplers rely on.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .schedule import NoiseSchedule

NULL = -1
MODES = ("point2d", "image16")


class PortShapeError(ValueError):
    """Injection tensors do not match the denoiser's decoder ports."""


@dataclass(frozen=True)
class DenoiserSpec:
    mode: str = "point2d"
    widths: tuple[int, ...] = (128, 128, 128)
    num_classes: int = 2
    embed_dim: int = 64
    sigma_data: float = 1.0
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if not self.widths or min(self.widths) < 1:
            raise ValueError("widths must be a nonempty list of positive sizes")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.embed_dim < 2 or self.embed_dim % 2:
            raise ValueError("embed_dim must be an even integer >= 2")
        if self.mode == "image16" and len(self.widths) > 4:
            raise ValueError("image16 supports at most 4 levels")
        if self.sigma_data <= 0:
            raise ValueError("sigma_data must be positive")

    @property
    def num_ports(self) -> int:
        return len(self.widths)

    @property
    def data_shape(self) -> tuple[int, ...]:
        return (2,) if self.mode == "point2d" else (1, 16, 16)

    def level_size(self, level: int) -> int:
        return 16 // 2**level

    def port_channels(self) -> list[int]:
        """Channel width of each decoder port, deepest block first."""
        w = self.widths
        L = len(w)
        out = []
        for p in range(L):
            j = L - 1 - p
            below = w[L - 1] if p == 0 else w[j + 1]
            out.append(below + w[j])
        return out

    def port_shapes(self, batch: int) -> list[tuple[int, ...]]:
        chans = self.port_channels()
        if self.mode == "point2d":
            return [(batch, c) for c in chans]
        L = len(self.widths)
        return [(batch, c, self.level_size(L - 1 - p), self.level_size(L - 1 - p)) for p, c in enumerate(chans)]

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "widths": list(self.widths),
            "num_classes": self.num_classes,
            "embed_dim": self.embed_dim,
            "sigma_data": self.sigma_data,
            "schedule": self.schedule.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "DenoiserSpec":
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        d["schedule"] = NoiseSchedule.from_dict(d.get("schedule", {}))
        return cls(**d)


POINT2D_DEFAULT = DenoiserSpec("point2d", (128, 128, 128), num_classes=2, embed_dim=64, sigma_data=1.5)
IMAGE16_DEFAULT = DenoiserSpec("image16", (32, 64, 128), num_classes=4, embed_dim=128, sigma_data=1.0)


@dataclass
class ParameterSet:
    """Named float32 tensors plus the spec they were built for."""

    owner: str
    spec: object
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.owner not in ("base", "guide"):
            raise ValueError(f"owner must be 'base' or 'guide', got {self.owner!r}")

    def num_params(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.tensors):
            v = np.ascontiguousarray(self.tensors[name], dtype="<f4")
            h.update(name.encode())
            h.update(str(v.shape).encode())
            h.update(v.tobytes())
        return h.hexdigest()

    def copy(self) -> "ParameterSet":
        return ParameterSet(self.owner, self.spec, {k: v.copy() for k, v in self.tensors.items()}, dict(self.meta))


def param_count(params: ParameterSet) -> int:
    return params.num_params()


# --------------------------------------------------------------------------- init


def _normal(rng: np.random.Generator, shape, fan_in: int, gain: float = 1.0) -> np.ndarray:
    return (rng.standard_normal(shape) * gain / np.sqrt(fan_in)).astype(np.float32)


def dense_params(rng, name: str, n_in: int, n_out: int, *, zero: bool = False, gain: float = 1.0) -> dict:
    if zero:
        return {f"{name}.W": np.zeros((n_in, n_out), np.float32), f"{name}.b": np.zeros(n_out, np.float32)}
    return {f"{name}.W": _normal(rng, (n_in, n_out), n_in, gain), f"{name}.b": np.zeros(n_out, np.float32)}


def conv_params(rng, name: str, n_in: int, n_out: int, k: int, *, zero: bool = False, gain: float = 1.0) -> dict:
    if zero:
        return {f"{name}.W": np.zeros((n_out, n_in, k, k), np.float32), f"{name}.b": np.zeros(n_out, np.float32)}
    return {f"{name}.W": _normal(rng, (n_out, n_in, k, k), n_in * k * k, gain), f"{name}.b": np.zeros(n_out, np.float32)}


def _layer(rng, spec: DenoiserSpec, name: str, n_in: int, n_out: int, **kw) -> dict:
    if spec.mode == "point2d":
        return dense_params(rng, name, n_in, n_out, **kw)
    return conv_params(rng, name, n_in, n_out, 3, **kw)


def _skip_layer(rng, spec: DenoiserSpec, name: str, n_in: int, n_out: int, **kw) -> dict:
    if spec.mode == "point2d":
        return dense_params(rng, name, n_in, n_out, **kw)
    return conv_params(rng, name, n_in, n_out, 1, **kw)


def _block_params(rng, spec: DenoiserSpec, name: str, n_in: int, n_out: int) -> dict:
    p = {}
    p.update(_layer(rng, spec, f"{name}.lin1", n_in, n_out))
    p.update(dense_params(rng, f"{name}.emb", spec.embed_dim, n_out))
    # residual branches start small so the stack stays near identity at init
    p.update(_layer(rng, spec, f"{name}.lin2", n_out, n_out, gain=0.5))
    if n_in != n_out:
        p.update(_skip_layer(rng, spec, f"{name}.skip", n_in, n_out))
    return p


def embedding_params(rng, spec: DenoiserSpec) -> dict:
    E = spec.embed_dim
    p = {}
    p.update(dense_params(rng, "time.l1", E, E))
    p.update(dense_params(rng, "time.l2", E, E))
    p["cond.table"] = rng.standard_normal((spec.num_classes + 1, E)).astype(np.float32)
    return p


def encoder_params(rng, spec: DenoiserSpec) -> dict:
    """Stem, encoder blocks and middle block (the part the full guide copies)."""
    w = spec.widths
    d_in = spec.data_shape[0]
    p = {}
    p.update(_layer(rng, spec, "stem", d_in, w[0]))
    prev = w[0]
    for i, wi in enumerate(w):
        p.update(_block_params(rng, spec, f"enc.{i}", prev, wi))
        prev = wi
    p.update(_block_params(rng, spec, "mid", w[-1], w[-1]))
    return p


def init_denoiser(spec: DenoiserSpec, seed: int) -> ParameterSet:
    from .rng import stream

    if not isinstance(spec, DenoiserSpec):
        raise TypeError("init_denoiser needs a DenoiserSpec")
    rng = stream(seed, "init", 0)
    w = spec.widths
    L = len(w)
    p = embedding_params(rng, spec)
    p.update(encoder_params(rng, spec))
    chans = spec.port_channels()
    for k in range(L):
        p.update(_block_params(rng, spec, f"dec.{k}", chans[k], w[L - 1 - k]))
    p.update(_layer(rng, spec, "out", w[0], spec.data_shape[0], gain=0.5))
    return ParameterSet("base", spec, p, {"seed": int(seed)})


# ------------------------------------------------------------------- forward


def graph_params(tensors: Mapping[str, np.ndarray], trainable: bool = False) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=trainable) for k, v in tensors.items()}


def time_features(t, dim: int) -> np.ndarray:
    """Sinusoidal features of 1000*t, shape (B, dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    arg = 1000.0 * t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


def condition_rows(c, num_classes: int, batch: int) -> np.ndarray:
    """Map class ids (NULL=-1) to embedding-table rows; NULL gets the last row."""
    c = np.asarray(c)
    if c.ndim == 0:
        c = np.full(batch, int(c))
    if c.shape != (batch,):
        raise ValueError(f"condition must be a scalar or have shape ({batch},), got {c.shape}")
    if np.any(c != np.round(c)):
        raise ValueError("class ids must be integers")
    c = c.astype(np.int64)
    if np.any(c >= num_classes) or np.any(c < NULL):
        raise ValueError(f"class id out of range for K={num_classes}: {np.unique(c)}")
    return np.where(c == NULL, num_classes, c)


def apply_layer(P, name: str, x, mode: str):
    if mode == "point2d":
        return ag.linear(x, P[f"{name}.W"], P[f"{name}.b"])
    return ag.conv2d(x, P[f"{name}.W"], P[f"{name}.b"])


def _emb_bias(P, name: str, emb_act, mode: str):
    e = ag.linear(emb_act, P[f"{name}.W"], P[f"{name}.b"])
    if mode == "point2d":
        return e
    return ag.reshape(e, e.shape + (1, 1))


def block(P, name: str, x, emb_act, mode: str):
    h = apply_layer(P, f"{name}.lin1", ag.silu(x), mode)
    h = h + _emb_bias(P, f"{name}.emb", emb_act, mode)
    h = apply_layer(P, f"{name}.lin2", ag.silu(h), mode)
    skip = apply_layer(P, f"{name}.skip", x, mode) if f"{name}.skip.W" in P else x
    return skip + h


def embed(P, spec: DenoiserSpec, t: np.ndarray, c, batch: int):
    tf = time_features(t, spec.embed_dim)
    te = ag.linear(ag.silu(ag.linear(tf, P["time.l1.W"], P["time.l1.b"])), P["time.l2.W"], P["time.l2.b"])
    rows = condition_rows(c, spec.num_classes, batch)
    table = P["cond.table"]
    onehot = np.zeros((batch, spec.num_classes + 1))
    onehot[np.arange(batch), rows] = 1.0
    ce = ag.linear(onehot, table)
    return te + ce


def encode(P, spec: DenoiserSpec, h, emb_act) -> tuple[list, Tensor]:
    """Run encoder blocks and the middle block; returns (skips, middle)."""
    skips = []
    L = len(spec.widths)
    for i in range(L):
        h = block(P, f"enc.{i}", h, emb_act, spec.mode)
        skips.append(h)
        if spec.mode == "image16" and i < L - 1:
            h = ag.avg_pool2(h)
    return skips, block(P, "mid", h, emb_act, spec.mode)


def precondition(spec: DenoiserSpec, t: np.ndarray, ndim: int) -> tuple[np.ndarray, np.ndarray]:
    a, s = spec.schedule.alpha_sigma(t)
    sd2 = spec.sigma_data**2
    denom = a * a * sd2 + s * s
    c_skip = s / denom
    c_out = a * spec.sigma_data / np.sqrt(denom)
    shape = (-1,) + (1,) * (ndim - 1)
    return c_skip.reshape(shape), c_out.reshape(shape)


def check_injections(spec: DenoiserSpec, injections: Sequence, batch: int) -> None:
    expected = spec.port_shapes(batch)
    if len(injections) != len(expected):
        raise PortShapeError(f"expected {len(expected)} injection ports, got {len(injections)}")
    bad = []
    for p, (inj, want) in enumerate(zip(injections, expected)):
        got = tuple(inj.shape)
        # spatially constant injections may arrive as (B, C, 1, 1)
        ok = got == want or (len(got) == 4 and got[:2] == want[:2] and got[2:] == (1, 1))
        if not ok:
            bad.append(f"port {p}: expected {want}, got {got}")
    if bad:
        raise PortShapeError("; ".join(bad))


def _batch_t(t, batch: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        return np.full(batch, float(t))
    if t.shape != (batch,):
        raise ValueError(f"t must be a scalar or have shape ({batch},), got {t.shape}")
    return t


def denoise_graph(P, spec: DenoiserSpec, z, t, c, injections: Sequence | None = None) -> Tensor:
    """Build the forward graph. ``P`` maps parameter names to Tensors."""
    z = ag.as_tensor(z)
    if z.shape[1:] != spec.data_shape:
        raise ValueError(f"z has shape {z.shape}, expected (B,) + {spec.data_shape}")
    B = z.shape[0]
    t = spec.schedule.check(_batch_t(t, B))
    if injections:
        check_injections(spec, injections, B)
    emb_act = ag.silu(embed(P, spec, t, c, B))
    h = apply_layer(P, "stem", z, spec.mode)
    skips, h = encode(P, spec, h, emb_act)
    L = len(spec.widths)
    for k in range(L):
        j = L - 1 - k
        h = ag.concat([h, skips[j]], axis=1)
        if injections:
            h = h + injections[k]
        h = block(P, f"dec.{k}", h, emb_act, spec.mode)
        if spec.mode == "image16" and j > 0:
            h = ag.upsample2(h)
    F = apply_layer(P, "out", ag.silu(h), spec.mode)
    c_skip, c_out = precondition(spec, t, z.data.ndim)
    return z * c_skip + F * c_out


def denoise_forward(params: ParameterSet, z, t, c, injections: Sequence | None = None) -> np.ndarray:
    """eps_hat for a batch; empty ``injections`` gives the plain conditional pass."""
    if params.owner != "base":
        raise ValueError("denoise_forward needs base parameters")
    P = graph_params(params.tensors)
    inj = [np.asarray(i, dtype=np.float64) for i in injections] if injections else None
    return denoise_graph(P, params.spec, np.asarray(z, dtype=np.float64), t, c, inj).data


def embed_time(params: ParameterSet, t) -> np.ndarray:
    spec = params.spec
    t = spec.schedule.check(np.atleast_1d(t))
    P = graph_params(params.tensors)
    tf = time_features(t, spec.embed_dim)
    h = ag.silu(ag.linear(tf, P["time.l1.W"], P["time.l1.b"]))
    return ag.linear(h, P["time.l2.W"], P["time.l2.b"]).data


def embed_condition(params: ParameterSet, c) -> np.ndarray:
    spec = params.spec
    c = np.atleast_1d(c)
    rows = condition_rows(c, spec.num_classes, len(c))
    return params.tensors["cond.table"][rows].astype(np.float64)
