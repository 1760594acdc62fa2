"""Experiment configuration files (INI syntax).

Every key has a typed default; unknown sections or keys are rejected with a
``file:line`` message. :func:`resolve` returns the fully materialised config,
which runs echo to their output directory.
"""

from __future__ import annotations

import configparser
import re
from pathlib import Path

from .data import MIXTURE_DEFAULTS, SHAPES_DEFAULTS, SHIFTS
from .distill import TrainConfig
from .guide import GuideSpec
from .network import DenoiserSpec
from .schedule import NoiseSchedule


class ConfigError(ValueError):
    def __init__(self, path, line, msg):
        self.path, self.line = str(path), line
        where = f"{path}:{line}" if line else str(path)
        super().__init__(f"{where}: {msg}")


def _floats(s):
    return tuple(float(v) for v in s.split(",") if v.strip())


def _ints(s):
    return tuple(int(v) for v in s.split(",") if v.strip())


def _bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _opt_float(s):
    return None if s.strip().lower() in ("", "none") else float(s)


def _str(s):
    return s.strip()


def _train(steps, lr, bs, **extra):
    base = {
        "steps": (int, steps),
        "batch_size": (int, bs),
        "learning_rate": (float, lr),
        "lr_schedule": (_str, "cosine"),
        "loss_weighting": (_str, "constant-one"),
        "optimizer": (_str, "adam"),
        "log_every": (int, 100),
    }
    base.update(extra)
    return base


_DATA = {"kind": (_str, "mixture2d")}
_DATA.update({k: (float, v) for k, v in MIXTURE_DEFAULTS.items()})
_DATA.update({k: (float, v) for k, v in SHAPES_DEFAULTS.items() if k not in _DATA})
for _k in ("num_classes", "count", "holdout"):
    _DATA[_k] = (int, None)

SCHEMA = {
    "run": {"seed": (int, 0), "out": (_str, "runs/default")},
    "data": _DATA,
    "model": {
        "widths": (_ints, None),
        "embed_dim": (int, None),
        "sigma_data": (float, None),
        "schedule": (_str, "cosine"),
    },
    "guide": {"variant": (_str, "tiny"), "hidden": (int, 8), "zero_init": (_bool, True)},
    "train-base": _train(6000, 1e-3, 128, cond_dropout_prob=(float, 0.1)),
    "distill-cfg": _train(
        6000, 5e-4, 128, guidance_range=(_floats, (2.0, 9.0)), guidance_fixed=(_opt_float, None)
    ),
    "distill-steps": _train(
        1500,
        2e-4,
        128,
        ladder=(_ints, (64, 32, 16, 8)),
        guidance_range=(_floats, (2.0, 9.0)),
        guidance_fixed=(_opt_float, None),
    ),
    "finetune-base": _train(2000, 5e-4, 128, shift=(_str, "rotate45"), cond_dropout_prob=(float, 0.1)),
    "sample": {
        "mode": (_str, "guided"),
        "guidance": (float, 8.0),
        "steps": (int, 64),
        "count": (int, 1000),
        "classes": (_str, "all"),
        "base": (_str, ""),
        "guide": (_str, ""),
    },
    "analyze": {
        "eval_guidance": (_floats, (2.0, 4.0, 8.0)),
        "eval_t_points": (int, 20),
        "eval_count": (int, 500),
        "num_projections": (int, 128),
        "heatmap_guidance": (_floats, (2.0, 4.0, 8.0)),
        "heatmap_count": (int, 64),
    },
}


def _model_defaults(kind: str) -> dict:
    from .network import IMAGE16_DEFAULT, POINT2D_DEFAULT

    d = POINT2D_DEFAULT if kind == "mixture2d" else IMAGE16_DEFAULT
    return {"widths": d.widths, "embed_dim": d.embed_dim, "sigma_data": d.sigma_data}


def _line_of(lines: list[str], section: str | None, key: str | None) -> int | None:
    cur = None
    for i, raw in enumerate(lines, 1):
        s = raw.strip()
        m = re.match(r"^\[(.+)\]$", s)
        if m:
            cur = m.group(1).strip()
            if key is None and cur == section:
                return i
            continue
        if cur == section and key is not None:
            k = re.split(r"[=:]", s, maxsplit=1)[0].strip().lower()
            if k == key:
                return i
    return None


def _format(v) -> str:
    if isinstance(v, tuple):
        return ",".join(_format(x) for x in v)
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


class Config:
    """Parsed and validated configuration with every default filled in."""

    def __init__(self, values: dict, path: str = "<memory>"):
        self.values = values
        self.path = path

    def __getitem__(self, section) -> dict:
        return self.values[section]

    @property
    def seed(self) -> int:
        return self.values["run"]["seed"]

    @property
    def out(self) -> Path:
        return Path(self.values["run"]["out"])

    def data_params(self) -> dict:
        d = self.values["data"]
        keys = MIXTURE_DEFAULTS if d["kind"] == "mixture2d" else SHAPES_DEFAULTS
        return {k: d[k] for k in keys}

    def base_spec(self) -> DenoiserSpec:
        m, d = self.values["model"], self.values["data"]
        return DenoiserSpec(
            mode="point2d" if d["kind"] == "mixture2d" else "image16",
            widths=tuple(m["widths"]),
            num_classes=int(d["num_classes"]),
            embed_dim=int(m["embed_dim"]),
            sigma_data=float(m["sigma_data"]),
            schedule=NoiseSchedule(kind=m["schedule"]),
        )

    def guide_spec(self) -> GuideSpec:
        g = self.values["guide"]
        return GuideSpec(g["variant"], self.base_spec(), zero_init=g["zero_init"], hidden=g["hidden"])

    def train_config(self, section: str) -> TrainConfig:
        s = self.values[section]
        kw = {k: s[k] for k in ("steps", "batch_size", "learning_rate", "lr_schedule", "loss_weighting", "optimizer", "log_every")}
        for k in ("cond_dropout_prob", "guidance_range", "guidance_fixed"):
            if k in s:
                kw[k] = s[k]
        return TrainConfig(seed=self.seed, **kw)

    def text(self) -> str:
        """INI rendering of the resolved values."""
        lines = []
        for sec, keys in self.values.items():
            lines.append(f"[{sec}]")
            lines += [f"{k} = {_format(v)}" for k, v in keys.items()]
            lines.append("")
        return "\n".join(lines)


def parse(text: str, path: str = "<memory>") -> Config:
    lines = text.splitlines()
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text, source=path)
    except configparser.MissingSectionHeaderError as e:
        raise ConfigError(path, e.lineno, "key outside of any [section]") from None
    except configparser.ParsingError as e:
        ln = e.errors[0][0] if e.errors else None
        raise ConfigError(path, ln, "could not parse line") from None
    except (configparser.DuplicateOptionError, configparser.DuplicateSectionError) as e:
        raise ConfigError(path, e.lineno, e.message.split(": ", 1)[-1]) from None
    values: dict[str, dict] = {}
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise ConfigError(path, _line_of(lines, sec, None), f"unknown section [{sec}]")
        for key in cp[sec]:
            if key not in SCHEMA[sec]:
                raise ConfigError(path, _line_of(lines, sec, key), f"unknown key {key!r} in [{sec}]")
    for sec, keys in SCHEMA.items():
        values[sec] = {}
        for key, (conv, default) in keys.items():
            if cp.has_option(sec, key):
                raw = cp.get(sec, key)
                try:
                    values[sec][key] = conv(raw)
                except (TypeError, ValueError) as e:
                    raise ConfigError(path, _line_of(lines, sec, key), f"bad value for {key}: {e}") from None
            else:
                values[sec][key] = default
    kind = values["data"]["kind"]
    if kind not in ("mixture2d", "shapes16"):
        raise ConfigError(path, _line_of(lines, "data", "kind"), f"unknown dataset kind {kind!r}")
    dd = MIXTURE_DEFAULTS if kind == "mixture2d" else SHAPES_DEFAULTS
    for k in ("num_classes", "count", "holdout"):
        if values["data"][k] is None:
            values["data"][k] = dd[k]
    for k, v in _model_defaults(kind).items():
        if values["model"][k] is None:
            values["model"][k] = v
    shift = values["finetune-base"]["shift"]
    if shift not in SHIFTS:
        raise ConfigError(path, _line_of(lines, "finetune-base", "shift"), f"unknown shift {shift!r}")
    if values["sample"]["mode"] not in ("cfg", "guided", "oracle"):
        raise ConfigError(path, _line_of(lines, "sample", "mode"), f"unknown sample mode {values['sample']['mode']!r}")
    cfg = Config(values, path)
    # object-level validation, anchored to the section that failed
    for sec, build in (
        ("model", cfg.base_spec),
        ("guide", cfg.guide_spec),
        ("train-base", lambda: cfg.train_config("train-base")),
        ("distill-cfg", lambda: cfg.train_config("distill-cfg")),
        ("distill-steps", lambda: cfg.train_config("distill-steps")),
        ("finetune-base", lambda: cfg.train_config("finetune-base")),
    ):
        try:
            build()
        except (TypeError, ValueError) as e:
            raise ConfigError(path, _line_of(lines, sec, None), str(e)) from None
    return cfg


def load(path) -> Config:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(path, None, f"cannot read config: {e.strerror}") from None
    return parse(text, str(path))
