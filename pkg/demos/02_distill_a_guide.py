"""Train a small base on the 2-D mixture, then distill guidance into a guide.

The base stays frozen. Only the guide learns to reproduce the two-pass CFG
prediction from a single injected pass. About three minutes on one core.
Run:  python demos/02_distill_a_guide.py
"""

import numpy as np

from pgdd.data import gen_dataset
from pgdd.distill import TrainConfig, cfg_relative_error, distill_cfg, train_base
from pgdd.guide import GuideSpec, init_guide
from pgdd.network import DenoiserSpec
from pgdd.sampler import sample_cfg, sample_guided
from pgdd.schedule import timestep_grid

ds = gen_dataset("mixture2d", {"count": 10000, "holdout": 500}, seed=0)
spec = DenoiserSpec("point2d", (64, 64, 64), num_classes=2, embed_dim=32, sigma_data=1.5)

# %% base: conditional denoiser with 10% label dropout
losses = []
base = train_base(spec, ds, TrainConfig(steps=2000, learning_rate=1e-3, lr_schedule="cosine", log_every=500), log=losses.append)
print("base loss:", [round(r["loss"], 3) for r in losses])
checksum = base.checksum()

# %% the two guide variants start as exact no-ops
xh, ch = ds.x_holdout[:200], ds.labels_holdout[:200]
cfg = TrainConfig(steps=1500, learning_rate=1e-3, lr_schedule="cosine", log_every=500)
for variant in ("tiny", "full"):
    gspec = GuideSpec(variant, spec)
    guide = init_guide(gspec, 0, base if variant == "full" else None)
    print(variant, "params:", guide.num_params(), "error before:", round(cfg_relative_error(base, guide, xh, ch, n_t=10), 3))
    guide = distill_cfg(base, guide, ds, cfg)
    print(variant, "error after:", round(cfg_relative_error(base, guide, xh, ch, n_t=10), 3))

assert base.checksum() == checksum  # never touched

# %% one pass per step instead of two
grid = timestep_grid(spec.schedule, 32)
c = np.arange(1000) % 2
s = sample_guided(base, guide, c, 6.0, grid, seed=1, record="summary")
t = sample_cfg(base, c, 6.0, grid, seed=1, record="summary")
print("base passes: student", s.base_passes, "teacher", t.base_passes)
print("mean distance student/teacher samples:", np.linalg.norm(s.x0 - t.x0, axis=1).mean().round(3))
