import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from pgdd.checkpoint import decode, file_hash, load_params, save_params
from pgdd.cli import plug, run
from pgdd.guide import GuideSpec, init_guide
from pgdd.network import DenoiserSpec, PortShapeError, init_denoiser
from pgdd.sampler import guided_eps

SMALL = """
[run]
seed = 5
out = {out}

[data]
kind = mixture2d
count = 400
holdout = 100

[model]
widths = 16, 16
embed_dim = 8

[guide]
variant = {variant}

[train-base]
steps = 20
batch_size = 32
log_every = 5

[distill-cfg]
steps = 10
batch_size = 32
log_every = 5

[distill-steps]
ladder = 8, 4
steps = 4
batch_size = 16
log_every = 2

[finetune-base]
steps = 5
batch_size = 32

[sample]
count = 20
steps = 8
guidance = 4

[analyze]
eval_count = 40
eval_t_points = 4
heatmap_count = 6
num_projections = 16
"""


def _config(tmp_path, variant="tiny", name="run"):
    out = tmp_path / name
    p = tmp_path / f"{name}.cfg"
    p.write_text(SMALL.format(out=out, variant=variant))
    return p, out


def _pgdd(cfg, *cmds_and_flags):
    for cmd in cmds_and_flags:
        argv = cmd.split() if isinstance(cmd, str) else list(cmd)
        assert run([argv[0], "--config", str(cfg), *argv[1:]]) == 0, argv


def test_end_to_end(tmp_path):
    cfg, out = _config(tmp_path, "full")
    _pgdd(
        cfg,
        "gen-data",
        "train-base",
        "distill-cfg",
        "distill-steps",
        "finetune-base",
        "sample --mode cfg",
        "sample --mode oracle",
        "sample --mode guided",
        "analyze",
        "report",
    )
    for name in (
        "data.pgdd",
        "data_shifted.pgdd",
        "base.pgdd",
        "guide.pgdd",
        "guide_4.pgdd",
        "base_finetuned.pgdd",
        "samples_guided_g4_n8.pgdd",
        "samples_cfg_g4_n8.pgdd",
        "samples_oracle_g4_n8.pgdd",
        "trace_guided_g4_n8.jsonl",
        "analysis.json",
        "timing.jsonl",
        "report/metrics.csv",
        "report/cost.csv",
        "report/injection.csv",
        "report/heatmap_g8.svg",
        "report/report.json",
    ):
        assert (out / name).exists(), name
    for cmd in ("gen-data", "train-base", "distill-cfg", "distill-steps", "finetune-base", "sample", "analyze", "report"):
        assert (out / f"resolved.{cmd}.cfg").exists()
        assert (out / "metrics" / f"{cmd}.jsonl").exists()
    a = json.loads((out / "analysis.json").read_text())
    assert {"cost.flop_ratio", "cfg_relative_error", "swd.guided_g4_n8", "alignment.cfg_g4_n8"} <= set(a)
    # lineage: guide -> base, step student -> its teacher
    guide = load_params(out / "guide.pgdd")
    assert guide.meta["parent"] == file_hash(out / "base.pgdd")
    assert load_params(out / "guide_4.pgdd").meta["parent"] == file_hash(out / "guide.pgdd")
    passes = [json.loads(line) for line in (out / "metrics" / "sample.jsonl").read_text().splitlines()]
    assert passes[0]["base_passes"] == 8 and passes[0]["guide_passes"] == 8


def test_resolved_config_reproduces(tmp_path):
    cfg, out = _config(tmp_path)
    _pgdd(cfg, "gen-data", "train-base")
    first = (out / "metrics" / "train-base.jsonl").read_bytes()
    resolved = out / "resolved.train-base.cfg"
    _pgdd(resolved, f"train-base --out {tmp_path / 'again'}")
    assert (tmp_path / "again" / "metrics" / "train-base.jsonl").read_bytes() == first


def test_distill_refuses_non_base_owner(tmp_path, capsys):
    cfg, out = _config(tmp_path)
    _pgdd(cfg, "gen-data", "train-base", "distill-cfg")
    shutil.copyfile(out / "guide.pgdd", out / "base.pgdd")
    assert run(["distill-cfg", "--config", str(cfg)]) == 2
    assert "owner" in capsys.readouterr().err


def test_port_mismatch_exit(tmp_path, capsys):
    cfg, out = _config(tmp_path)
    _pgdd(cfg, "gen-data", "train-base")
    other = DenoiserSpec("point2d", (16, 24), num_classes=2, embed_dim=8, sigma_data=1.5)
    save_params(init_guide(GuideSpec("tiny", other), 0), out / "guide.pgdd")
    assert run(["sample", "--config", str(cfg), "--mode", "guided"]) == 2
    assert "port" in capsys.readouterr().err


def test_config_error_exit(tmp_path, capsys):
    p = tmp_path / "bad.cfg"
    p.write_text("[run]\nseed = 1\nbogus = 2\n")
    assert run(["gen-data", "--config", str(p)]) == 2
    assert f"{p}:3" in capsys.readouterr().err


def test_missing_input_exit(tmp_path, capsys):
    cfg, _ = _config(tmp_path)
    assert run(["distill-cfg", "--config", str(cfg)]) == 2
    assert "base.pgdd" in capsys.readouterr().err


def test_seed_override(tmp_path):
    cfg, out = _config(tmp_path)
    _pgdd(cfg, "gen-data --seed 9")
    assert "seed = 9" in (out / "resolved.gen-data.cfg").read_text()


def test_plug_is_read_only_and_matches(tmp_path):
    base = init_denoiser(DenoiserSpec("point2d", (16, 16), num_classes=2, embed_dim=8, sigma_data=1.5), 0)
    guide = init_guide(GuideSpec("tiny", base.spec, zero_init=False), 1)
    save_params(base, tmp_path / "b.pgdd")
    save_params(guide, tmp_path / "g.pgdd")
    before = (file_hash(tmp_path / "b.pgdd"), file_hash(tmp_path / "g.pgdd"))
    pair = plug(tmp_path / "g.pgdd", tmp_path / "b.pgdd")
    z = np.random.default_rng(0).standard_normal((5, 2))
    np.testing.assert_array_equal(pair.eps(z, 0.5, np.zeros(5, int), 3.0), guided_eps(base, guide, z, 0.5, np.zeros(5, int), 3.0)[0])
    assert (pair.base_hash, pair.guide_hash) == before
    assert (file_hash(tmp_path / "b.pgdd"), file_hash(tmp_path / "g.pgdd")) == before


def test_plug_rejects_other_width(tmp_path):
    spec = DenoiserSpec("point2d", (16, 16), num_classes=2, embed_dim=8, sigma_data=1.5)
    wide = DenoiserSpec("point2d", (32, 32), num_classes=2, embed_dim=8, sigma_data=1.5)
    save_params(init_denoiser(wide, 0), tmp_path / "b.pgdd")
    save_params(init_guide(GuideSpec("tiny", spec), 0), tmp_path / "g.pgdd")
    with pytest.raises(PortShapeError, match="port 0"):
        plug(tmp_path / "g.pgdd", tmp_path / "b.pgdd")


def test_console_entry_point(tmp_path):
    cfg, out = _config(tmp_path)
    r = subprocess.run([sys.executable, "-m", "pgdd", "gen-data", "--config", str(cfg)], capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    meta, t = decode((out / "data.pgdd").read_bytes())
    assert meta["owner"] == "dataset" and t["x"].shape == (400, 2)


def test_thread_cap(tmp_path, monkeypatch):
    cfg, _ = _config(tmp_path)
    monkeypatch.setenv("PGDD_THREADS", "1")
    assert run(["gen-data", "--config", str(cfg)]) == 0
    monkeypatch.setenv("PGDD_THREADS", "0")
    assert run(["gen-data", "--config", str(cfg)]) == 2
