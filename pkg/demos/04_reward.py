"""
Scoring an edit
===============

The reward is the cosine between the mask-derived attention map and the
policy's averaged cross-attention, minus the mean pixel drift once the
drift exceeds a threshold.
"""

from pathlib import Path

import numpy as np

from pixforge import checkpoint as ckpt
from pixforge import denoiser as dn
from pixforge import reward as rw
from pixforge.world import EditingWorld, mask_to_groundtruth_attention

world = EditingWorld()
params = dn.init_params(dn.DenoiserConfig(vocab_size=len(world.vocab)), seed=42)
path = Path("demo_out/pretrained.ckpt")
if path.is_file():
    params.load_arrays(ckpt.load(path))
else:
    print("no pretrained checkpoint; run 03_denoiser.py first for meaningful numbers")

# the pieces on hand-made maps
gt = np.zeros((4, 4))
gt[1, 2] = 1.0
print("identical maps  ", rw.attention_loss(gt, gt))
print("uniform vs one-hot", rw.attention_loss(gt, np.full((4, 4), 1 / 16)), "= 1/4")
print("clip loss below tau", rw.clip_loss(np.zeros(4), np.full(4, 0.03), tau=0.05))
print("clip loss above tau", rw.clip_loss(np.zeros(4), np.full(4, 0.2), tau=0.05))

# the same prompt under eight noise seeds: the spread is what PPO learns from
sched = dn.NoiseSchedule(10)
tr = world.generate_triple(3)
a_gt = mask_to_groundtruth_attention(tr.mask, 4, 4)
print(f"\n'{tr.instruction.text}'")
print(f"{'seed':>4} {'l_att':>7} {'mae':>7} {'l_clip':>7} {'total':>7}")
for seed in range(8):
    res = dn.rollout(params, sched, tr.source, tr.instruction.ids, [seed], 5.0)
    rb = rw.score(a_gt, res.attention[:, :, 0], tr.instruction.relevant, tr.source, res.images[0])
    print(f"{seed:4d} {rb.l_att:7.4f} {rb.mae:7.4f} {rb.l_clip:7.4f} {rb.total:7.4f}")
