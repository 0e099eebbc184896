"""
Evaluation on held-out triples
==============================

L1, L2, SSIM and PSNR of the sampled edits against the source image
(how much was preserved) and against the golden render (how well the
edit was done).
"""

from pathlib import Path

from pixforge import checkpoint as ckpt
from pixforge import denoiser as dn
from pixforge.metrics import evaluate_set
from pixforge.world import EditingWorld

world = EditingWorld()
sched = dn.NoiseSchedule(10)
seeds = range(1_000_000, 1_000_032)


def load(path):
    p = dn.init_params(dn.DenoiserConfig(vocab_size=len(world.vocab)), seed=42)
    if path is not None:
        p.load_arrays(ckpt.load(path))
    return p


candidates = {"untrained": None, "pretrained": Path("demo_out/pretrained.ckpt"),
              "fine-tuned": Path("demo_out/ppo/final.ckpt")}
print(f"{'policy':10s} {'vs':7s} {'l1':>7} {'l2':>7} {'ssim':>7} {'psnr':>7}")
for name, path in candidates.items():
    if path is not None and not path.is_file():
        print(f"{name:10s} (missing {path})")
        continue
    params = load(path)
    for ref in ("source", "golden"):
        rep = evaluate_set(params, world, seeds, sched, 5.0, reference=ref)
        print(f"{name:10s} {ref:7s} {rep.l1:7.4f} {rep.l2:7.4f} {rep.ssim:7.4f} {rep.psnr:7.2f}")
