"""Where does a trained policy's insert edit land relative to the target mask?

Both checks are known misses at desk scale. On the seed-0 insert triple the
pretrained and trained policies change pixels well outside the 4x4 target
cell (IoU about 0.1), and after training the centroid of the changes leaves
the mask box for most noise seeds. The reward scores where the model
attends and how far it drifts, not whether the inserted object is drawn.
The expectations stay as strict xfails, so a policy that does meet them
shows up as an unexpected pass.
"""

import numpy as np
import pytest

from pixforge import denoiser as dn
from pixforge import ppo

CHANGE_THRESHOLD = 0.1
NOISE_SEEDS = range(32)


def changed_pixels(output, source, threshold=CHANGE_THRESHOLD):
    return np.abs(np.asarray(output) - np.asarray(source)) > threshold


def iou(a, b):
    return (a & b).sum() / max((a | b).sum(), 1)


def centroid_in_box(changed, mask):
    if not changed.any():
        return False
    r, c = np.nonzero(changed)
    mr, mc = np.nonzero(mask)
    return bool(mr.min() <= r.mean() <= mr.max() and mc.min() <= c.mean() <= mc.max())


def test_iou_and_centroid_helpers():
    mask = np.zeros((8, 8), bool)
    mask[2:4, 2:4] = True
    assert iou(mask, mask) == 1.0
    half = mask.copy()
    half[2, :] = False
    assert iou(half, mask) == 0.5
    assert centroid_in_box(mask, mask)
    far = np.zeros_like(mask)
    far[7, 7] = True
    assert not centroid_in_box(far, mask)
    assert not centroid_in_box(np.zeros_like(mask), mask)


@pytest.fixture(scope="module")
def insert_edits(world, desk_cfg, pretrained, desk_runs):
    tr = world.generate_triple(0, edit_kind="insert")
    mask = tr.mask > 0
    sched = ppo.schedule_for(desk_cfg)
    out = {}
    for name, params in (("pretrained", pretrained["params"]), ("trained", desk_runs["full"].params)):
        res = dn.rollout(params, sched, np.repeat(tr.source[None], len(NOISE_SEEDS), 0),
                         np.repeat(tr.instruction.ids[None], len(NOISE_SEEDS), 0),
                         list(NOISE_SEEDS), desk_cfg.sample.guidance_scale)
        changed = [changed_pixels(img, tr.source) for img in res.images]
        out[name] = {"iou": [iou(ch, mask) for ch in changed],
                     "inside": [centroid_in_box(ch, mask) for ch in changed]}
    print(f"\nseed-0 insert '{tr.instruction.text}': " + "; ".join(
        f"{k} IoU seed0 {v['iou'][0]:.3f} mean {np.mean(v['iou']):.3f}, "
        f"centroid inside {np.mean(v['inside']):.0%}" for k, v in out.items()))
    return out


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="desk-scale policy edits bleed outside the target cell")
def test_trained_insert_iou_above_half(insert_edits):
    assert insert_edits["trained"]["iou"][0] > 0.5


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="desk-scale policy edits bleed outside the target cell")
def test_trained_insert_centroid_inside_mask(insert_edits):
    assert insert_edits["trained"]["inside"][0]
