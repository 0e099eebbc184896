"""Conditional patch-transformer denoiser and its stochastic DDIM sampler.

The network predicts the noise in ``x_t`` given the source image (stacked as
an extra input channel) and the instruction tokens. Each block runs
self-attention over patches, cross-attention from patches to tokens and a
feed-forward layer; the cross-attention weights are returned alongside the
prediction so rewards can be computed from them.

Images live in ``[-1, 1]`` inside the model and ``[0, 1]`` outside.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

logger = logging.getLogger(__name__)

CROSS_PROJ = ("q", "k", "v", "out")


class RolloutError(RuntimeError):
    pass


@dataclass(frozen=True)
class DenoiserConfig:
    image_size: int = 16
    patch: int = 4
    width: int = 32
    heads: int = 2
    blocks: int = 2
    ff_mult: int = 2
    vocab_size: int = 24
    max_tokens: int = 8
    lora_rank: int = 4
    lora_scale: float = 1.0
    num_train_timesteps: int = 100

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch


def cosine_alpha_bar(num_train_timesteps: int, s: float = 0.008, floor: float = 1e-4) -> np.ndarray:
    """Cumulative signal fraction for train timesteps ``0..K-1`` (strictly decreasing)."""
    k = np.arange(1, num_train_timesteps + 1) / num_train_timesteps

    def f(u):
        return np.cos((u + s) / (1 + s) * np.pi / 2) ** 2

    return np.maximum(f(k) / f(0.0), floor)


@dataclass(frozen=True)
class NoiseSchedule:
    """Sampler grid: ``num_steps`` transitions over ``num_steps + 1`` noise levels.

    Level 0 is pure noise and level ``num_steps`` the output. The output level
    is train timestep 0, whose alpha-bar is below one, so every transition
    (the last included) has a positive standard deviation when ``eta > 0``.
    """

    num_steps: int = 10
    eta: float = 1.0
    num_train_timesteps: int = 100

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must lie in [0, 1], got {self.eta}")
        if self.num_steps < 1 or self.num_steps >= self.num_train_timesteps:
            raise ValueError(
                f"num_steps must be in [1, {self.num_train_timesteps - 1}], got {self.num_steps}")

    @property
    def train_alpha_bar(self) -> np.ndarray:
        return cosine_alpha_bar(self.num_train_timesteps)

    @property
    def timesteps(self) -> np.ndarray:
        k = self.num_train_timesteps
        return np.rint(np.linspace(k - 1, 0, self.num_steps + 1)).astype(np.int64)

    @property
    def alpha_bars(self) -> np.ndarray:
        return self.train_alpha_bar[self.timesteps]

    def sigma(self, step) -> np.ndarray:
        """Transition std from level ``step`` to ``step + 1``."""
        ab = self.alpha_bars
        a_t, a_prev = ab[step], ab[np.asarray(step) + 1]
        return self.eta * np.sqrt((1 - a_prev) / (1 - a_t)) * np.sqrt(1 - a_t / a_prev)


# parameters

@dataclass
class DenoiserParams:
    """Named parameter tensors plus the architecture they belong to."""

    config: DenoiserConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> list[str]:
        return list(self.tensors)

    def lora_names(self) -> list[str]:
        return [n for n in self.tensors if ".lora_" in n]

    def base_names(self) -> list[str]:
        return [n for n in self.tensors if ".lora_" not in n]

    def trainable(self, use_lora: bool) -> list[Tensor]:
        names = self.lora_names() if use_lora else self.base_names()
        return [self.tensors[n] for n in names]

    def set_trainable(self, use_lora: bool) -> None:
        keep = set(self.lora_names() if use_lora else self.base_names())
        for n, t in self.tensors.items():
            t.requires_grad = n in keep
            t.grad = None

    def freeze(self) -> None:
        for t in self.tensors.values():
            t.requires_grad = False
            t.grad = None

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.tensors.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for n, t in self.tensors.items():
            if n not in arrays:
                raise KeyError(f"missing parameter block {n!r}")
            if arrays[n].shape != t.shape:
                raise ValueError(f"parameter {n!r}: shape {arrays[n].shape} != {t.shape}")
            t.data = np.array(arrays[n], dtype=np.float64)

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(self.config, {n: Tensor(t.data.copy()) for n, t in self.tensors.items()})

    def zero_like(self) -> "DenoiserParams":
        return DenoiserParams(self.config, {n: Tensor(np.zeros_like(t.data)) for n, t in self.tensors.items()})


def param_shapes(cfg: DenoiserConfig) -> dict[str, tuple[int, ...]]:
    d, r = cfg.width, cfg.lora_rank
    shapes = {
        "patch_embed.w": (2 * cfg.patch_dim, d),
        "patch_embed.b": (d,),
        "pos_embed": (cfg.num_patches, d),
        "time_proj.w": (d, d),
        "time_proj.b": (d,),
        "token_embed": (cfg.vocab_size, d),
        "token_pos": (cfg.max_tokens, d),
    }
    for b in range(cfg.blocks):
        for kind in ("self", "cross"):
            for p in CROSS_PROJ:
                shapes[f"blocks.{b}.{kind}.{p}"] = (d, d)
        shapes[f"blocks.{b}.ff.w1"] = (d, cfg.ff_mult * d)
        shapes[f"blocks.{b}.ff.b1"] = (cfg.ff_mult * d,)
        shapes[f"blocks.{b}.ff.w2"] = (cfg.ff_mult * d, d)
        shapes[f"blocks.{b}.ff.b2"] = (d,)
        for p in CROSS_PROJ:
            shapes[f"blocks.{b}.cross.{p}.lora_a"] = (d, r)
            shapes[f"blocks.{b}.cross.{p}.lora_b"] = (r, d)
    shapes["out.w"] = (d, cfg.patch_dim)
    shapes["out.b"] = (cfg.patch_dim,)
    return shapes


def init_params(cfg: DenoiserConfig, seed: int = 0) -> DenoiserParams:
    """Scaled-normal weights, zero biases, zero LoRA ``B`` factors."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".lora_b") or name.endswith(".b") or name.endswith(".b1") or name.endswith(".b2"):
            data = np.zeros(shape)
        elif name in ("pos_embed", "token_embed", "token_pos"):
            data = rng.normal(0.0, 0.5, shape)
        elif name == "out.w":
            data = rng.normal(0.0, 0.1 / math.sqrt(shape[0]), shape)
        else:
            data = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), shape)
        tensors[name] = Tensor(ad.to_f32(data), name=name)
    return DenoiserParams(cfg, tensors)


# forward pass

def patchify(img: np.ndarray, p: int) -> np.ndarray:
    b, h, w = img.shape
    g_h, g_w = h // p, w // p
    return img.reshape(b, g_h, p, g_w, p).transpose(0, 1, 3, 2, 4).reshape(b, g_h * g_w, p * p)


def unpatchify(t: Tensor, p: int, h: int, w: int) -> Tensor:
    b = t.shape[0]
    g_h, g_w = h // p, w // p
    return t.reshape(b, g_h, g_w, p, p).transpose(0, 1, 3, 2, 4).reshape(b, h, w)


def timestep_features(t: np.ndarray, dim: int, max_period: float = 1000.0) -> np.ndarray:
    """Fixed sinusoidal embedding table rows for integer train timesteps."""
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    ang = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.cos(ang), np.sin(ang)], axis=1)


def _linear(h: Tensor, params: DenoiserParams, name: str) -> Tensor:
    y = h @ params[name]
    a_name = name + ".lora_a"
    if a_name in params:
        y = y + ((h @ params[a_name]) @ params[name + ".lora_b"]) * params.config.lora_scale
    return y


def _split_heads(t: Tensor, heads: int) -> Tensor:
    b, n, d = t.shape
    return t.reshape(b, n, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(t: Tensor) -> Tensor:
    b, h, n, dh = t.shape
    return t.transpose(0, 2, 1, 3).reshape(b, n, h * dh)


def _attention(params, prefix, h, ctx, mask):
    cfg = params.config
    q = _split_heads(_linear(h, params, prefix + ".q"), cfg.heads)
    k = _split_heads(_linear(ctx, params, prefix + ".k"), cfg.heads)
    v = _split_heads(_linear(ctx, params, prefix + ".v"), cfg.heads)
    logits = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(cfg.width // cfg.heads))
    weights = ad.softmax(logits, axis=-1, mask=mask)
    out = _linear(_merge_heads(weights @ v), params, prefix + ".out")
    return out, weights


def forward(params: DenoiserParams, x_t: np.ndarray, timesteps: np.ndarray,
            source: np.ndarray, token_ids: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Noise prediction ``(B, H, W)`` and cross-attention maps ``(blocks, B, P, L)``.

    ``x_t`` and ``source`` are in model space; ``timesteps`` are train
    timesteps, one per batch row.
    """
    cfg = params.config
    token_ids = np.asarray(token_ids)
    if token_ids.min() < 0 or token_ids.max() >= cfg.vocab_size:
        raise ValueError(f"token id outside vocabulary of size {cfg.vocab_size}")
    b, hgt, wid = x_t.shape
    inp = np.concatenate([patchify(x_t, cfg.patch), patchify(source, cfg.patch)], axis=-1)
    temb = Tensor(timestep_features(np.broadcast_to(timesteps, (b,)), cfg.width)) @ params["time_proj.w"]
    temb = (temb + params["time_proj.b"]).reshape(b, 1, cfg.width)
    h = Tensor(inp) @ params["patch_embed.w"] + params["patch_embed.b"] + params["pos_embed"] + temb

    L = token_ids.shape[1]
    ctx = ad.layer_norm(params["token_embed"][token_ids] + params["token_pos"][:L])
    valid = (token_ids != 0)[:, None, None, :]

    maps = []
    for i in range(cfg.blocks):
        pre = f"blocks.{i}"
        hn = ad.layer_norm(h)
        sa, _ = _attention(params, pre + ".self", hn, hn, None)
        h = h + sa
        ca, w = _attention(params, pre + ".cross", ad.layer_norm(h), ctx, valid)
        h = h + ca
        maps.append(w.data.mean(axis=1))
        hn = ad.layer_norm(h)
        ff = ad.silu(hn @ params[pre + ".ff.w1"] + params[pre + ".ff.b1"])
        h = h + ff @ params[pre + ".ff.w2"] + params[pre + ".ff.b2"]
    out = ad.layer_norm(h) @ params["out.w"] + params["out.b"]
    return unpatchify(out, cfg.patch, hgt, wid), np.stack(maps)


@dataclass
class StepOutput:
    """One sampler step: guided noise, cross-attention maps and the transition Gaussian."""

    eps: Tensor
    attention: np.ndarray  # (blocks, B, P, L), conditional branch
    mean: Tensor | None = None
    std: np.ndarray | None = None  # (B,)


def predict(params, x_t, timesteps, source, token_ids) -> StepOutput:
    eps, maps = forward(params, x_t, timesteps, source, token_ids)
    return StepOutput(eps, maps)


def guided_predict(params, x_t, timesteps, source, token_ids, guidance_scale: float) -> StepOutput:
    """Classifier-free guidance; the unconditional branch sees only padding."""
    if guidance_scale < 1:
        raise ValueError(f"guidance_scale must be >= 1, got {guidance_scale}")
    if guidance_scale == 1:
        return predict(params, x_t, timesteps, source, token_ids)
    b = x_t.shape[0]
    token_ids = np.asarray(token_ids)
    eps, maps = forward(
        params,
        np.concatenate([x_t, x_t]),
        np.concatenate([np.broadcast_to(timesteps, (b,))] * 2),
        np.concatenate([source, source]),
        np.concatenate([token_ids, np.zeros_like(token_ids)]),
    )
    e_c, e_u = eps[:b], eps[b:]
    return StepOutput(e_u + (e_c - e_u) * guidance_scale, maps[:, :b])


def transition(out: StepOutput, x_t: np.ndarray, step: np.ndarray, schedule: NoiseSchedule) -> StepOutput:
    """Fill in the DDIM transition mean and std for moving from level ``step`` to ``step + 1``."""
    step = np.broadcast_to(np.asarray(step), (x_t.shape[0],))
    ab = schedule.alpha_bars
    a_t = ab[step][:, None, None]
    a_prev = ab[step + 1][:, None, None]
    sigma = schedule.sigma(step)
    s3 = sigma[:, None, None]
    x0 = ad.clip((Tensor(x_t) - out.eps * np.sqrt(1 - a_t)) * (1.0 / np.sqrt(a_t)), -1.0, 1.0)
    # recover the noise consistent with the clipped x0 estimate
    eps = (Tensor(x_t) - x0 * np.sqrt(a_t)) * (1.0 / np.sqrt(1 - a_t))
    out.mean = x0 * np.sqrt(a_prev) + eps * np.sqrt(np.maximum(1 - a_prev - s3 ** 2, 0.0))
    out.std = sigma
    return out


def log_prob(x_prev: np.ndarray, out: StepOutput) -> Tensor:
    """Per-sample diagonal-Gaussian log-density, summed over pixels."""
    if np.any(out.std <= 0):
        raise ValueError("transition std is zero; set eta > 0 to get a log-probability")
    std = out.std[:, None, None]
    return ad.gaussian_log_prob(Tensor(x_prev), out.mean, Tensor(std), axis=(1, 2))


def sample_step(x_t: np.ndarray, out: StepOutput, noise: np.ndarray,
                need_log_prob: bool = True) -> tuple[np.ndarray, np.ndarray | None]:
    """``x_prev = mean + std * z`` and its log-probability (per batch row)."""
    x_prev = out.mean.data + out.std[:, None, None] * noise
    if not need_log_prob:
        return x_prev, None
    with ad.no_grad():
        lp = log_prob(x_prev, out).data
    return x_prev, lp


@dataclass
class RolloutResult:
    states: np.ndarray       # (T + 1, B, H, W) model space; states[0] is pure noise
    log_probs: np.ndarray    # (T, B)
    attention: np.ndarray    # (T, blocks, B, P, L)
    images: np.ndarray       # (B, H, W) in [0, 1]
    seeds: list[int]

    @property
    def num_steps(self) -> int:
        return self.log_probs.shape[0]


def to_model(img: np.ndarray) -> np.ndarray:
    return np.asarray(img, dtype=np.float64) * 2.0 - 1.0


def to_pixels(x: np.ndarray) -> np.ndarray:
    return np.clip((x + 1.0) / 2.0, 0.0, 1.0)


def rollout(params: DenoiserParams, schedule: NoiseSchedule, sources: np.ndarray,
            token_ids: np.ndarray, seeds, guidance_scale: float = 1.0) -> RolloutResult:
    """Sample edited images for a batch; noise for row ``i`` depends only on ``seeds[i]``."""
    sources = np.asarray(sources, dtype=np.float64)
    if sources.ndim == 2:
        sources = sources[None]
        token_ids = np.asarray(token_ids)[None]
    seeds = [int(s) for s in np.atleast_1d(seeds)]
    b, h, w = sources.shape
    if len(seeds) != b:
        raise ValueError(f"{len(seeds)} seeds for a batch of {b}")
    noise = [ad.NoiseSource(s) for s in seeds]
    cond = to_model(sources)
    x = np.stack([n.normal((h, w), 0) for n in noise])
    states, lps, maps = [x], [], []
    with ad.no_grad():
        for i in range(schedule.num_steps):
            t = np.full(b, schedule.timesteps[i])
            out = guided_predict(params, x, t, cond, token_ids, guidance_scale)
            out = transition(out, x, np.full(b, i), schedule)
            z = np.stack([n.normal((h, w), i + 1) for n in noise])
            x, lp = sample_step(x, out, z, need_log_prob=schedule.eta > 0)
            if not np.all(np.isfinite(x)):
                raise RolloutError(f"non-finite state at sampler step {i}")
            states.append(x)
            lps.append(lp if lp is not None else np.full(b, np.nan))
            maps.append(out.attention)
    return RolloutResult(np.stack(states), np.stack(lps), np.stack(maps), to_pixels(x), seeds)


# supervised pretraining

def pretrain(world, params: DenoiserParams, steps: int, batch_size: int = 16,
             learning_rate: float = 1e-3, seed: int = 0, cond_dropout: float = 0.1,
             difficulty: str = "single", seed_range: int = 1_000_000,
             on_step=None) -> list[float]:
    """Noise-prediction MSE on (source, instruction) -> golden edit pairs.

    Trains the base weights only; LoRA factors are left untouched. Returns the
    per-step loss history.
    """
    from .world import golden_render

    if steps <= 0:
        return []
    cfg = params.config
    params.set_trainable(use_lora=False)
    opt = ad.AdamW(params.trainable(False), lr=learning_rate, weight_decay=1e-4, max_grad_norm=1.0)
    alpha_bar = cosine_alpha_bar(cfg.num_train_timesteps)
    rng = np.random.default_rng(seed)
    losses = []
    for step in range(steps):
        triples = [world.generate_triple(int(s), difficulty)
                   for s in rng.integers(0, seed_range, batch_size)]
        src = to_model(np.stack([tr.source for tr in triples]))
        x0 = to_model(np.stack([golden_render(tr) for tr in triples]))
        ids = np.stack([tr.instruction.ids for tr in triples])
        drop = rng.random(batch_size) < cond_dropout
        ids[drop] = 0
        t = rng.integers(0, cfg.num_train_timesteps, batch_size)
        eps = rng.standard_normal(x0.shape)
        ab = alpha_bar[t][:, None, None]
        x_t = np.sqrt(ab) * x0 + np.sqrt(1 - ab) * eps
        pred, _ = forward(params, x_t, t, src, ids)
        diff = pred - eps
        loss = (diff * diff).mean()
        if not np.isfinite(loss.data):
            raise RolloutError(f"pretraining diverged at step {step}")
        opt.zero_grad()
        ad.backward(loss)
        opt.step()
        losses.append(loss.item())
        if on_step is not None:
            on_step(step, losses[-1])
    params.freeze()
    return losses
