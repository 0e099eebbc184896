"""
PPO fine-tuning on the attention reward
=======================================

Runs the desk profile (60 epochs, 64 rollouts each) from the pretrained
checkpoint, then compares the policy before and after on the training
prompts and on the seed-0 insert triple.

Takes about a minute and a half on one CPU core.
"""

from pathlib import Path

import numpy as np

from pixforge import checkpoint as ckpt
from pixforge import denoiser as dn
from pixforge import ppo
from pixforge.config import desk_profile
from pixforge.plot import plot_run
from pixforge.world import EditingWorld

cfg = desk_profile()
world = EditingWorld()
params = dn.init_params(dn.DenoiserConfig(vocab_size=len(world.vocab)), seed=cfg.seed)
path = Path("demo_out/pretrained.ckpt")
if not path.is_file():
    raise SystemExit("run 03_denoiser.py first")
params.load_arrays(ckpt.load(path))
before = params.copy()

rows = ppo.train(cfg, world, params, "demo_out/ppo")
first = {k: np.mean([r[k] for r in rows[:10]]) for k in ("mean_l_att", "mean_reward", "mean_mae")}
last = {k: np.mean([r[k] for r in rows[-10:]]) for k in ("mean_l_att", "mean_reward", "mean_mae")}
for k in first:
    print(f"{k:12s} first 10 epochs {first[k]:.4f}  last 10 epochs {last[k]:.4f}")
svg, _ = plot_run("demo_out/ppo")
print("curve:", svg)

# the same held-out noise for both policies
sched = ppo.schedule_for(cfg)
pool = [world.generate_triple(s) for s in range(cfg.world.train_pool) for _ in range(4)]
seeds = range(10**7, 10**7 + len(pool))
for name, p in (("pretrained", before), ("fine-tuned", params)):
    trajs = ppo.collect_trajectories(p, sched, pool, seeds, 32, cfg.sample.guidance_scale)
    print(f"{name:10s} l_att {np.mean([t.reward.l_att for t in trajs]):.4f} "
          f"mae {np.mean([t.reward.mae for t in trajs]):.4f} "
          f"reward {np.mean([t.reward.total for t in trajs]):.4f}")

# does the edit land in the mask?
tr = world.generate_triple(0, edit_kind="insert")
for name, p in (("pretrained", before), ("fine-tuned", params)):
    res = dn.rollout(p, sched, tr.source, tr.instruction.ids, [0], cfg.sample.guidance_scale)
    changed = np.abs(res.images[0] - tr.source) > 0.1
    mask = tr.mask > 0
    iou = (changed & mask).sum() / max((changed | mask).sum(), 1)
    r, c = np.nonzero(changed)
    rows_m, cols_m = np.nonzero(mask)
    inside = (rows_m.min() <= r.mean() <= rows_m.max()) and (cols_m.min() <= c.mean() <= cols_m.max())
    print(f"{name:10s} seed-0 insert: changed-pixel IoU with mask {iou:.3f}, centroid inside mask {inside}")
