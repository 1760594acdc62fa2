"""Reuse a trained guide on a base that was fine-tuned afterwards.

The base is fine-tuned on a rotated copy of the mixture. The guide file is
only read; its hash is the same before and after.
Run:  python demos/04_plug_into_a_finetuned_base.py [work_dir]
"""

import sys
from pathlib import Path

from pgdd.checkpoint import file_hash, save_params
from pgdd.cli import plug
from pgdd.data import gen_dataset, shifted_params
from pgdd.distill import TrainConfig, cfg_relative_error, distill_cfg, finetune_base, train_base
from pgdd.guide import GuideSpec, init_guide
from pgdd.network import DenoiserSpec

work = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_plug")
ds = gen_dataset("mixture2d", {"count": 10000, "holdout": 500}, 0)
rotated = gen_dataset("mixture2d", shifted_params("mixture2d", ds.params, "rotate45"), 0)
spec = DenoiserSpec("point2d", (64, 64, 64), num_classes=2, embed_dim=32, sigma_data=1.5)

base = train_base(spec, ds, TrainConfig(steps=2000, learning_rate=1e-3, lr_schedule="cosine"))
guide = distill_cfg(base, init_guide(GuideSpec("tiny", spec), 0), ds, TrainConfig(steps=1500, learning_rate=2e-3, lr_schedule="cosine"))
tuned = finetune_base(base, rotated, TrainConfig(steps=1000, learning_rate=5e-4))

save_params(base, work / "base.pgdd")
save_params(tuned, work / "base_rotated.pgdd")
save_params(guide, work / "guide.pgdd")
before = file_hash(work / "guide.pgdd")

# %% same guide, two bases
home = plug(work / "guide.pgdd", work / "base.pgdd")
away = plug(work / "guide.pgdd", work / "base_rotated.pgdd")
e_home = cfg_relative_error(home.base, home.guide, ds.x_holdout[:300], ds.labels_holdout[:300], n_t=10)
e_away = cfg_relative_error(away.base, away.guide, rotated.x_holdout[:300], rotated.labels_holdout[:300], n_t=10)
print(f"error vs CFG teacher: own base {e_home:.3f}, fine-tuned base {e_away:.3f}")
print("guide file unchanged:", file_hash(work / "guide.pgdd") == before)
