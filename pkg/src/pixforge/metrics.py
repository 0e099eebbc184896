"""Pixel-difference and structural image quality metrics.

Images are ``(H, W)`` or ``(H, W, C)`` arrays with values in ``[0, max_val]``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PSNR_IDENTICAL_DB = 100.0
SSIM_WINDOW = 7
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


def _pair(p, g) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(p, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"image shapes differ: {p.shape} vs {g.shape}")
    return p, g


def l1(p, g) -> float:
    """Mean absolute difference over all pixels and channels."""
    p, g = _pair(p, g)
    return float(np.mean(np.abs(p - g)))


def l2(p, g) -> float:
    """Mean squared difference over all pixels and channels."""
    p, g = _pair(p, g)
    d = p - g
    return float(np.mean(d * d))


def psnr(p, g, max_val: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical images give ``PSNR_IDENTICAL_DB``."""
    if max_val <= 0:
        raise ValueError(f"max_val must be positive, got {max_val}")
    mse = l2(p, g)
    if mse == 0.0:
        return PSNR_IDENTICAL_DB
    return 10.0 * math.log10(max_val * max_val / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    w = np.outer(k, k)
    return w / w.sum()


def _ssim_channel(x: np.ndarray, y: np.ndarray, w: np.ndarray, c1: float, c2: float) -> float:
    size = w.shape[0]
    wx = sliding_window_view(x, (size, size))
    wy = sliding_window_view(y, (size, size))

    def wmean(a):
        return np.einsum("ijkl,kl->ij", a, w)

    mx, my = wmean(wx), wmean(wy)
    vx = wmean(wx * wx) - mx * mx
    vy = wmean(wy * wy) - my * my
    cxy = wmean(wx * wy) - mx * my
    num = (2 * mx * my + c1) * (2 * cxy + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return float(np.mean(num / den))


def ssim(p, g, window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA,
         data_range: float = 1.0, k1: float = SSIM_K1, k2: float = SSIM_K2) -> float:
    """Mean SSIM over all fully-contained Gaussian windows, averaged over channels."""
    p, g = _pair(p, g)
    if p.shape[0] < window or p.shape[1] < window:
        raise ValueError(f"image {p.shape[:2]} smaller than the {window}x{window} SSIM window")
    w = gaussian_window(window, sigma)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    if p.ndim == 2:
        return _ssim_channel(p, g, w, c1, c2)
    return float(np.mean([_ssim_channel(p[..., c], g[..., c], w, c1, c2) for c in range(p.shape[-1])]))


@dataclass
class MetricReport:
    rows: list[dict] = field(default_factory=list)
    reference: str = "source"

    FIELDS = ("triple_id", "l1", "l2", "ssim", "psnr")

    @property
    def count(self) -> int:
        return len(self.rows)

    def _mean(self, key: str) -> float:
        return float(np.mean([r[key] for r in self.rows])) if self.rows else float("nan")

    @property
    def l1(self) -> float:
        return self._mean("l1")

    @property
    def l2(self) -> float:
        return self._mean("l2")

    @property
    def ssim(self) -> float:
        return self._mean("ssim")

    @property
    def psnr(self) -> float:
        return self._mean("psnr")

    def add(self, triple_id: str, output, reference) -> dict:
        row = {"triple_id": triple_id, "l1": l1(output, reference), "l2": l2(output, reference),
               "ssim": ssim(output, reference), "psnr": psnr(output, reference)}
        self.rows.append(row)
        return row

    def write_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            fh.write(f"# reference={self.reference} ssim_window={SSIM_WINDOW} ssim_sigma={SSIM_SIGMA} "
                     f"k1={SSIM_K1} k2={SSIM_K2} psnr_identical={PSNR_IDENTICAL_DB}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.FIELDS)
            for r in self.rows:
                w.writerow([r["triple_id"]] + [repr(float(r[k])) for k in self.FIELDS[1:]])
            w.writerow(["#mean"] + [repr(getattr(self, k)) for k in self.FIELDS[1:]])
        return path


def read_eval_csv(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("# ")]
    return list(csv.DictReader(lines))


def evaluate_set(params, world, seeds, schedule, guidance_scale: float = 1.0,
                 reference: str = "source", difficulty: str = "single",
                 out_csv=None, batch_size: int = 16) -> MetricReport:
    """Roll out ``params`` on held-out triples and compare to source or golden render."""
    from .denoiser import rollout
    from .world import golden_render

    if reference not in ("source", "golden"):
        raise ValueError(f"reference must be 'source' or 'golden', got {reference!r}")
    seeds = [int(s) for s in seeds]
    triples = [world.generate_triple(s, difficulty) for s in seeds]
    report = MetricReport(reference=reference)
    for lo in range(0, len(triples), batch_size):
        chunk = triples[lo:lo + batch_size]
        res = rollout(params, schedule, np.stack([t.source for t in chunk]),
                      np.stack([t.instruction.ids for t in chunk]),
                      [t.seed for t in chunk], guidance_scale)
        for tr, img in zip(chunk, res.images):
            ref = tr.source if reference == "source" else golden_render(tr)
            report.add(tr.triple_id, img, ref)
    if out_csv is not None:
        report.write_csv(out_csv)
    return report
