"""Attention-alignment reward with a clipped pixel-drift penalty.

The reward for an edited image is ``l_att + alpha * l_clip``: the cosine
similarity between the mask-derived attention target and the policy's
token- and time-averaged cross-attention, plus a penalty on the mean
absolute change from the source that only switches on above ``tau``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DEFAULT_ALPHA = -1.0
DEFAULT_TAU = 0.05


@dataclass(frozen=True)
class AggregatedAttention:
    map: np.ndarray
    num_tokens: int
    num_steps: int


@dataclass(frozen=True)
class RewardBreakdown:
    l_att: float
    mae: float
    l_clip: float
    alpha: float
    total: float

    CSV_FIELDS = ("l_att", "mae", "l_clip", "total")

    def as_row(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in self.CSV_FIELDS}


def aggregate_attention(record: np.ndarray, relevant: np.ndarray) -> AggregatedAttention:
    """Average cross-attention over sampler steps, blocks and relevant tokens.

    ``record`` is ``(T, P, L)`` or ``(T, blocks, P, L)``; ``relevant`` flags
    the ``L`` token slots that count towards the average.
    """
    record = np.asarray(record, dtype=np.float64)
    if record.size == 0 or record.shape[0] == 0:
        raise ValueError("empty attention record")
    relevant = np.asarray(relevant, dtype=bool)
    if not relevant.any():
        raise ValueError("no relevant (non-padding) tokens to average over")
    if record.ndim == 4:
        record = record.mean(axis=1)
    per_pixel = record.mean(axis=0)[:, relevant].mean(axis=1)
    side = math.isqrt(per_pixel.size)
    if side * side == per_pixel.size:
        per_pixel = per_pixel.reshape(side, side)
    return AggregatedAttention(per_pixel, int(relevant.sum()), record.shape[0])


def attention_loss(a_gt: np.ndarray, a_model) -> float:
    """Cosine similarity of two attention maps (in ``[0, 1]`` for nonnegative maps)."""
    if isinstance(a_model, AggregatedAttention):
        a_model = a_model.map
    a = np.asarray(a_gt, dtype=np.float64).ravel()
    b = np.asarray(a_model, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"attention maps differ in size: {a.size} vs {b.size}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("attention map with zero norm")
    return float(a @ b / (na * nb))


def clip_loss(source: np.ndarray, output: np.ndarray, tau: float = DEFAULT_TAU) -> tuple[float, float]:
    """Return ``(mae, l_clip)`` with ``l_clip = mae`` only when ``mae > tau``."""
    source = np.asarray(source, dtype=np.float64)
    output = np.asarray(output, dtype=np.float64)
    if source.shape != output.shape:
        raise ValueError(f"clip_loss: shapes {source.shape} and {output.shape} differ")
    mae = float(np.mean(np.abs(source - output)))
    return mae, (mae if mae > tau else 0.0)


def total_reward(l_att: float, mae: float, l_clip: float, alpha: float = DEFAULT_ALPHA) -> RewardBreakdown:
    return RewardBreakdown(l_att, mae, l_clip, alpha, l_att + alpha * l_clip)


def score(a_gt: np.ndarray, record: np.ndarray, relevant: np.ndarray, source: np.ndarray,
          output: np.ndarray, tau: float = DEFAULT_TAU, alpha: float = DEFAULT_ALPHA,
          use_attention: bool = True) -> RewardBreakdown:
    """Full reward for one rollout.

    With ``use_attention=False`` the alignment term is still measured and
    reported but left out of ``total`` (clip-only ablation).
    """
    l_att = attention_loss(a_gt, aggregate_attention(record, relevant))
    mae, l_clip = clip_loss(source, output, tau)
    rb = total_reward(l_att, mae, l_clip, alpha)
    if not use_attention:
        rb = RewardBreakdown(l_att, mae, l_clip, alpha, alpha * l_clip)
    return rb
