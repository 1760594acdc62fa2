"""External guide networks that turn a guidance value into decoder injections.

``full``: a trainable copy of the base stem, encoder and middle block. The
guidance value is broadcast to z_t's shape as a hint image, run through a small
hint stack and added to the stem output. Every encoder level then feeds one
zero-initialised projection per decoder port.

``tiny``: no encoder and no access to z_t. Parameter-free time features and a
condition embedding pass through affine maps, are summed with the guidance vector
``g * ones(hidden)``, and a final zero-initialised projection per port produces
the injections. In image mode each port vector is tiled over H x W.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autograd as ag
from .network import (
    DenoiserSpec,
    ParameterSet,
    _layer,
    conv_params,
    dense_params,
    embed,
    embedding_params,
    encode,
    encoder_params,
    apply_layer,
    condition_rows,
    graph_params,
    time_features,
)
from .rng import stream

VARIANTS = ("full", "tiny")


@dataclass(frozen=True)
class GuideSpec:
    variant: str
    base_spec: DenoiserSpec
    zero_init: bool = True
    hidden: int = 8

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown guide variant {self.variant!r}; expected one of {VARIANTS}")
        if not isinstance(self.base_spec, DenoiserSpec):
            raise TypeError("base_spec must be a DenoiserSpec")
        if self.hidden < 1:
            raise ValueError("hidden must be >= 1")

    @property
    def num_ports(self) -> int:
        return self.base_spec.num_ports

    def port_shapes(self, batch: int) -> list[tuple[int, ...]]:
        return self.base_spec.port_shapes(batch)

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "base_spec": self.base_spec.to_dict(),
            "zero_init": self.zero_init,
            "hidden": self.hidden,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "GuideSpec":
        d = dict(d)
        d["base_spec"] = DenoiserSpec.from_dict(d["base_spec"])
        return cls(**d)


def _port_projection(rng, spec: DenoiserSpec, name: str, n_in: int, n_out: int, zero: bool) -> dict:
    if spec.mode == "point2d":
        return dense_params(rng, name, n_in, n_out, zero=zero)
    return conv_params(rng, name, n_in, n_out, 1, zero=zero)


def init_guide(gspec: GuideSpec, seed: int, base: ParameterSet | None = None) -> ParameterSet:
    """Fresh guide parameters.

    With ``zero_init`` every port projection (and the full variant's last hint
    layer) starts at exactly zero. For the full variant, passing ``base`` starts
    the encoder copy from the base weights.
    """
    if not isinstance(gspec, GuideSpec):
        raise TypeError("init_guide needs a GuideSpec")
    spec = gspec.base_spec
    rng = stream(seed, "init", 1)
    zero = gspec.zero_init
    chans = spec.port_channels()
    L = spec.num_ports
    p: dict[str, np.ndarray] = {}
    if gspec.variant == "tiny":
        E, r = spec.embed_dim, gspec.hidden
        p["cond.table"] = rng.standard_normal((spec.num_classes + 1, E)).astype(np.float32)
        p.update(dense_params(rng, "z_time", E, r))
        p.update(dense_params(rng, "z_cond", E, r))
        p.update(dense_params(rng, "z_mix", r, r))
        for k in range(L):
            p.update(dense_params(rng, f"port.{k}", r, chans[k], zero=zero))
    else:
        p.update(embedding_params(rng, spec))
        p.update(encoder_params(rng, spec))
        if base is not None:
            if base.spec != spec:
                raise ValueError("base parameters were built for a different spec")
            for name in list(p):
                p[name] = base.tensors[name].copy()
        d_in, w0 = spec.data_shape[0], spec.widths[0]
        p.update(_layer(rng, spec, "hint.0", d_in, w0))
        p.update(_layer(rng, spec, "hint.1", w0, w0, zero=zero))
        for k in range(L):
            j = L - 1 - k
            p.update(_port_projection(rng, spec, f"port.{k}", spec.widths[j], chans[k], zero))
    meta = {"seed": int(seed)}
    if base is not None:
        meta["init_from"] = base.checksum()
    return ParameterSet("guide", gspec, p, meta)


def _g_vector(g, batch: int) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    if g.ndim == 0:
        g = np.full(batch, float(g))
    if g.shape != (batch,):
        raise ValueError(f"g must be a scalar or have shape ({batch},), got {g.shape}")
    if np.any(g < 0):
        raise ValueError("guidance values must be >= 0")
    return g


def tiny_graph(P, gspec: GuideSpec, g, t, c, batch: int) -> list:
    spec = gspec.base_spec
    t = spec.schedule.check(np.broadcast_to(np.asarray(t, dtype=np.float64), (batch,)))
    g = _g_vector(g, batch)
    tf = time_features(t, spec.embed_dim)
    rows = condition_rows(c, spec.num_classes, batch)
    onehot = np.zeros((batch, spec.num_classes + 1))
    onehot[np.arange(batch), rows] = 1.0
    cemb = ag.linear(onehot, P["cond.table"])
    gamma = np.repeat(g[:, None], gspec.hidden, axis=1)
    h = ag.silu(gamma + ag.linear(tf, P["z_time.W"], P["z_time.b"]) + ag.linear(cemb, P["z_cond.W"], P["z_cond.b"]))
    y = ag.silu(ag.linear(h, P["z_mix.W"], P["z_mix.b"]))
    out = []
    for k in range(spec.num_ports):
        v = ag.linear(y, P[f"port.{k}.W"], P[f"port.{k}.b"])
        if spec.mode == "image16":
            v = ag.reshape(v, v.shape + (1, 1))
        out.append(v)
    return out


def full_graph(P, gspec: GuideSpec, g, z_t, t, c) -> list:
    spec = gspec.base_spec
    z_t = ag.as_tensor(z_t)
    if z_t.shape[1:] != spec.data_shape:
        raise ValueError(f"z_t has shape {z_t.shape}, expected (B,) + {spec.data_shape}")
    B = z_t.shape[0]
    t = spec.schedule.check(np.broadcast_to(np.asarray(t, dtype=np.float64), (B,)))
    g = _g_vector(g, B)
    hint = np.broadcast_to(g.reshape((B,) + (1,) * len(spec.data_shape)), z_t.shape)
    emb_act = ag.silu(embed(P, spec, t, c, B))
    hh = apply_layer(P, "hint.1", ag.silu(apply_layer(P, "hint.0", hint, spec.mode)), spec.mode)
    h = apply_layer(P, "stem", z_t, spec.mode) + hh
    skips, mid = encode(P, spec, h, emb_act)
    L = spec.num_ports
    out = []
    for k in range(L):
        j = L - 1 - k
        feat = mid if k == 0 else skips[j]
        if spec.mode == "point2d":
            out.append(ag.linear(feat, P[f"port.{k}.W"], P[f"port.{k}.b"]))
        else:
            out.append(ag.conv2d(feat, P[f"port.{k}.W"], P[f"port.{k}.b"]))
    return out


def guide_graph(P, gspec: GuideSpec, g, z_t, t, c) -> list:
    if gspec.variant == "tiny":
        return tiny_graph(P, gspec, g, t, c, np.shape(z_t)[0])
    return full_graph(P, gspec, g, z_t, t, c)


def _full_shapes(gspec: GuideSpec, inj: list, batch: int) -> list[np.ndarray]:
    shapes = gspec.port_shapes(batch)
    return [np.broadcast_to(v.data, s) for v, s in zip(inj, shapes)]


def tiny_forward(params: ParameterSet, g, t, c, batch: int | None = None) -> list[np.ndarray]:
    """InjectionSet from (g, t, c) alone; z_t is never read."""
    gspec = params.spec
    if gspec.variant != "tiny":
        raise ValueError("tiny_forward needs tiny-guide parameters")
    if batch is None:
        batch = max(np.size(g), np.size(t), np.size(c))
    inj = tiny_graph(graph_params(params.tensors), gspec, g, t, c, batch)
    return _full_shapes(gspec, inj, batch)


def full_forward(params: ParameterSet, g, z_t, t, c) -> list[np.ndarray]:
    gspec = params.spec
    if gspec.variant != "full":
        raise ValueError("full_forward needs full-guide parameters")
    z_t = np.asarray(z_t, dtype=np.float64)
    inj = full_graph(graph_params(params.tensors), gspec, g, z_t, t, c)
    return _full_shapes(gspec, inj, z_t.shape[0])


def guide_forward(params: ParameterSet, g, z_t, t, c) -> list[np.ndarray]:
    if params.spec.variant == "tiny":
        return tiny_forward(params, g, t, c, batch=np.shape(z_t)[0])
    return full_forward(params, g, z_t, t, c)
