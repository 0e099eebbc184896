"""
Pretraining and sampling the denoiser
=====================================

A two-block patch transformer predicts noise from the noisy image, the
source image and the instruction tokens. Pretraining on golden renders
gives the starting policy; sampling records the cross-attention maps at
every step.

Writes ``demo_out/pretrained.ckpt`` for the later demos.
"""

from pathlib import Path

import numpy as np

from pixforge import checkpoint as ckpt
from pixforge import denoiser as dn
from pixforge.reward import aggregate_attention
from pixforge.world import EditingWorld

out = Path("demo_out")
out.mkdir(exist_ok=True)
world = EditingWorld()
params = dn.init_params(dn.DenoiserConfig(vocab_size=len(world.vocab)), seed=42)


def report(step, loss):
    if step % 500 == 0:
        print(f"pretrain step {step:4d} loss {loss:.4f}")


losses = dn.pretrain(world, params, steps=3000, seed=42, on_step=report)
print(f"loss first 100 {np.mean(losses[:100]):.4f}, last 100 {np.mean(losses[-100:]):.4f}")
ckpt.save(out / "pretrained.ckpt", params.arrays())

# 10 stochastic DDIM steps with guidance 5
sched = dn.NoiseSchedule(num_steps=10, eta=1.0)
tr = world.generate_triple(0, edit_kind="insert")
res = dn.rollout(params, sched, tr.source, tr.instruction.ids, seeds=[0], guidance_scale=5.0)
print("instruction:", tr.instruction.text)
print("per-step log-probabilities", np.round(res.log_probs[:, 0], 1))
print("attention record shape (steps, blocks, batch, patches, tokens):", res.attention.shape)

# where the words looked, averaged over steps, blocks and tokens
agg = aggregate_attention(res.attention[:, :, 0], tr.instruction.relevant)
print("aggregated attention\n", np.round(agg.map, 3))
print("mask cell\n", tr.mask.reshape(4, 4, 4, 4).mean(axis=(1, 3)))
print(f"mean |output - source| = {np.abs(res.images[0] - tr.source).mean():.4f}")
