"""Where the guide spends its capacity: FLOPs, parameters and injection maps.

Counts are analytic (2 x multiply-accumulates per dense or conv layer).
The second half trains a tiny guide on 16x16 shapes and writes heatmaps of
the per-port injection magnitude over sampling steps.
Run:  python demos/03_cost_and_injection_maps.py [out_dir]
"""

import sys

import numpy as np

from pgdd.analysis import count_cost, cost_from_totals, emit_report, injection_stats, shared_bounds
from pgdd.data import gen_dataset
from pgdd.distill import TrainConfig, distill_cfg, train_base
from pgdd.guide import GuideSpec, init_guide
from pgdd.network import IMAGE16_DEFAULT, POINT2D_DEFAULT, DenoiserSpec
from pgdd.sampler import sample_guided
from pgdd.schedule import timestep_grid

out = sys.argv[1] if len(sys.argv) > 1 else "demo_report"

# %% cost of one student step against one CFG step
for base_spec in (POINT2D_DEFAULT, IMAGE16_DEFAULT):
    for variant in ("tiny", "full"):
        r = count_cost(base_spec, GuideSpec(variant, base_spec))
        print(f"{base_spec.mode:8s} {variant:4s}  base {r.base_flops:>12,.0f} FLOPs  guide {r.guide_flops:>12,.0f}"
              f"  step ratio {r.flop_ratio:.3f}  param ratio {r.param_ratio:.4f}")

# published per-pass totals (GFLOPs, M params) for a large text-to-image model
r = cost_from_totals(338.7, 7.79, 859, 8.27)
print("large-model totals: step ratio", round(r.flop_ratio, 4), "param ratio", round(r.param_ratio, 4))

# %% a small image model and a tiny guide
ds = gen_dataset("shapes16", {"count": 2000, "holdout": 200}, 0)
spec = DenoiserSpec("image16", (16, 32), num_classes=4, embed_dim=32)
base = train_base(spec, ds, TrainConfig(steps=400, batch_size=32, learning_rate=1e-3))
guide = distill_cfg(base, init_guide(GuideSpec("tiny", spec), 0), ds, TrainConfig(steps=300, batch_size=32, learning_rate=2e-3))

# %% injection magnitude per port and step, at three guidance values
grid = timestep_grid(spec.schedule, 32)
c = np.arange(16) % 4
maps = [injection_stats(sample_guided(base, guide, c, g, grid, 0, record="summary")) for g in (2.0, 4.0, 8.0)]
maps = shared_bounds(maps)
for h in maps:
    early, late = h.early_late()
    print(f"g={h.g:g}  time-mean per port {h.time_mean().round(4)}  early>late {early > late}")

files = emit_report(out, count_cost(spec, guide.spec), maps)
print("wrote", ", ".join(p.name for p in files))
