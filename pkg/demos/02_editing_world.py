"""
The synthetic editing world
===========================

Every triple is a pure function of its seed: a source image, a binary mask
over the cell to edit, and a short instruction. The mask also gives the
target attention map the reward compares against.
"""

import sys
from pathlib import Path

import numpy as np

from pixforge.world import EditingWorld, freeze, golden_render, mask_to_groundtruth_attention

world = EditingWorld()
SHADES = " .:-=+*#%@"


def show(img):
    for row in img:
        print("".join(SHADES[min(int(v * len(SHADES)), len(SHADES) - 1)] * 2 for v in row))


for seed in range(4):
    tr = world.generate_triple(seed, "multi-object")
    print(f"\nseed {seed}: {tr.edit_kind:9s} '{tr.instruction.text}'")
    show(tr.source)

# token ids: <start> first, then the words, then padding
tr = world.generate_triple(0, edit_kind="insert")
print("\nids", tr.instruction.ids, "relevant", tr.instruction.relevant.astype(int))

# the mask pooled to the 4x4 patch grid of the denoiser
print("target attention\n", np.round(mask_to_groundtruth_attention(tr.mask, 4, 4), 3))

# the intended result; used for pretraining and evaluation, never as a reward
print("golden render of the edit")
show(golden_render(tr))

# optional: write triples to disk as PGM files
if len(sys.argv) > 1:
    dirs = freeze([world.generate_triple(s) for s in range(8)], Path(sys.argv[1]))
    print(f"wrote {len(dirs)} triples under {sys.argv[1]}")
