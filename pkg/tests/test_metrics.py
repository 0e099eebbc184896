import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pixforge import denoiser as dn
from pixforge import metrics as mt


def brute_ssim(x, y, size=7, sigma=1.5, L=1.0):
    """Per-window loops with an explicitly built Gaussian kernel."""
    half = (size - 1) / 2
    k = [[math.exp(-((i - half) ** 2 + (j - half) ** 2) / (2 * sigma * sigma)) for j in range(size)]
         for i in range(size)]
    tot = sum(map(sum, k))
    k = [[v / tot for v in row] for row in k]
    c1, c2 = (0.01 * L) ** 2, (0.03 * L) ** 2
    vals = []
    for r in range(x.shape[0] - size + 1):
        for c in range(x.shape[1] - size + 1):
            mx = my = 0.0
            for i in range(size):
                for j in range(size):
                    mx += k[i][j] * x[r + i, c + j]
                    my += k[i][j] * y[r + i, c + j]
            vx = vy = cxy = 0.0
            for i in range(size):
                for j in range(size):
                    dx, dy = x[r + i, c + j] - mx, y[r + i, c + j] - my
                    vx += k[i][j] * dx * dx
                    vy += k[i][j] * dy * dy
                    cxy += k[i][j] * dx * dy
            vals.append((2 * mx * my + c1) * (2 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return sum(vals) / len(vals)


def brute_pixels(p, g):
    d = [float(a) - float(b) for a, b in zip(p.ravel(), g.ravel())]
    n = len(d)
    l1 = sum(abs(v) for v in d) / n
    l2 = sum(v * v for v in d) / n
    return l1, l2, (10 * math.log10(1.0 / l2) if l2 else 100.0)


def pairs(n=10, shape=(8, 8), seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        p = rng.random(shape)
        yield p, np.clip(p + rng.normal(0, 0.1, shape), 0, 1)


def test_l1_l2_examples():
    p, g = np.array([0.1, 0.5]), np.array([0.3, 0.1])
    assert mt.l1(p, g) == pytest.approx(0.3)
    assert mt.l2(p, g) == pytest.approx(0.10)
    assert mt.l1(p, p) == 0.0 and mt.l2(p, p) == 0.0
    assert mt.l1(np.ones((4, 4)), np.zeros((4, 4))) == 1.0
    assert mt.l2(np.full((4, 4), 0.75), np.full((4, 4), 0.25)) == 0.25
    with pytest.raises(ValueError):
        mt.l1(np.ones(3), np.ones(4))


def test_psnr_examples():
    g = np.zeros((10, 10))
    assert mt.psnr(g, g) == 100.0
    p = np.full((10, 10), 0.1)  # MSE 0.01 up to rounding
    assert mt.psnr(p, g) == pytest.approx(20.0, abs=1e-12)
    p = np.zeros((10, 10))
    p[0, 0] = 1.0  # MSE exactly 1/100
    assert mt.psnr(p, g) == 20.0
    p = np.full((10, 10), 0.05)  # MSE 0.0025
    assert mt.psnr(p, g) == pytest.approx(10 * math.log10(400), abs=1e-12)
    assert round(mt.psnr(p, g), 4) == 26.0206
    with pytest.raises(ValueError):
        mt.psnr(p, g, max_val=0)


def test_ssim_examples():
    p = np.random.default_rng(1).random((8, 8))
    assert mt.ssim(p, p) == pytest.approx(1.0, abs=1e-12)
    c = np.full((8, 8), 0.5)
    assert mt.ssim(c, 1 - c) == 1.0
    with pytest.raises(ValueError):
        mt.ssim(np.ones((6, 6)), np.ones((6, 6)))


def test_metrics_match_brute_force_oracle():
    for p, g in pairs():
        assert abs(mt.ssim(p, g) - brute_ssim(p, g)) < 1e-9
        bl1, bl2, bpsnr = brute_pixels(p, g)
        assert abs(mt.l1(p, g) - bl1) < 1e-9
        assert abs(mt.l2(p, g) - bl2) < 1e-9
        assert abs(mt.psnr(p, g) - bpsnr) < 1e-9


def test_psnr_uses_l2_bit_for_bit():
    for p, g in pairs(seed=2):
        assert mt.psnr(p, g) == 10.0 * math.log10(1.0 / mt.l2(p, g))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (8, 8), elements=st.floats(0, 1)), arrays(np.float64, (8, 8), elements=st.floats(0, 1)))
def test_metrics_symmetric_and_bounded(p, g):
    for f in (mt.l1, mt.l2, mt.ssim, mt.psnr):
        assert f(p, g) == pytest.approx(f(g, p), rel=1e-12, abs=1e-12)
    assert mt.l1(p, g) >= 0 and mt.l2(p, g) >= 0
    assert -1 - 1e-12 <= mt.ssim(p, g) <= 1 + 1e-12
    assert mt.psnr(p, g) >= 0
    assert abs(mt.ssim(p, p) - 1) < 1e-9


def test_channel_permutation_invariance():
    rng = np.random.default_rng(3)
    p, g = rng.random((9, 9, 3)), rng.random((9, 9, 3))
    perm = [2, 0, 1]
    for f in (mt.l1, mt.l2, mt.ssim, mt.psnr):
        assert f(p[..., perm], g[..., perm]) == pytest.approx(f(p, g), rel=1e-12)


def test_report_csv(tmp_path):
    rep = mt.MetricReport(reference="golden")
    img = np.random.default_rng(4).random((8, 8))
    rep.add("seed1", img, img)
    rep.add("seed2", img, np.clip(img + 0.1, 0, 1))
    path = rep.write_csv(tmp_path / "eval.csv")
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# reference=golden ssim_window=7 ssim_sigma=1.5 k1=0.01 k2=0.03")
    assert lines[1] == "triple_id,l1,l2,ssim,psnr"
    assert lines[-1].startswith("#mean,")
    rows = mt.read_eval_csv(path)
    assert [r["triple_id"] for r in rows[:2]] == ["seed1", "seed2"]
    assert float(rows[0]["l1"]) == 0.0 and float(rows[0]["ssim"]) == 1.0


def test_evaluate_set_rows_and_noop(world, small_config, monkeypatch):
    def copy_rollout(params, schedule, sources, token_ids, seeds, guidance_scale=1.0):
        return dn.RolloutResult(None, None, None, np.asarray(sources).copy(), list(seeds))

    monkeypatch.setattr(dn, "rollout", copy_rollout)
    rep = mt.evaluate_set(None, world, range(5, 12), dn.NoiseSchedule(2), batch_size=3)
    assert rep.count == 7 and rep.l1 == 0.0 and rep.ssim == 1.0 and rep.psnr == 100.0
    gold = mt.evaluate_set(None, world, range(5, 12), dn.NoiseSchedule(2), reference="golden")
    assert gold.l1 > 0
    with pytest.raises(ValueError):
        mt.evaluate_set(None, world, range(3), dn.NoiseSchedule(2), reference="target")


@pytest.mark.slow
def test_pretrained_policy_preserves_source_better_than_untrained(world, pretrained):
    seeds = range(1_000_000, 1_000_016)
    sched = dn.NoiseSchedule(10)
    untrained = pretrained["params"].copy()
    untrained.load_arrays(pretrained["snapshots"][0])
    before = mt.evaluate_set(untrained, world, seeds, sched, 5.0)
    after = mt.evaluate_set(pretrained["params"], world, seeds, sched, 5.0)
    assert before.count == after.count == 16
    assert before.psnr < after.psnr
