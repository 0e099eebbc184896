"""PPO fine-tuning of the denoiser over the denoising MDP.

Each sampler transition is one MDP step: the state is ``(V, X, t, x_t)``, the
action is the next latent, and only the final transition is rewarded. The
policy is updated with the clipped surrogate, one optimizer step per
(batch, timestep) micro-batch, using terminal-reward advantages normalized
per instruction.
"""

from __future__ import annotations

import csv
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from . import denoiser as dn
from .config import RunConfig
from .reward import RewardBreakdown, score
from .world import EditingWorld, EditTriple, mask_to_groundtruth_attention

logger = logging.getLogger(__name__)

METRICS_FIELDS = ("epoch", "mean_reward", "mean_l_att", "mean_mae", "mean_ratio",
                  "clip_fraction", "grad_norm")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class MdpStep:
    source: np.ndarray
    token_ids: np.ndarray
    t: int  # transitions left after this one; 0 on the rewarded step
    state: np.ndarray
    action: np.ndarray
    old_log_prob: float
    reward: float


@dataclass
class Trajectory:
    triple: EditTriple
    seed: int
    states: np.ndarray       # (T + 1, H, W), model space
    log_probs: np.ndarray    # (T,)
    attention: np.ndarray    # (T, blocks, P, L)
    image: np.ndarray        # (H, W) in [0, 1]
    reward: RewardBreakdown

    @property
    def num_steps(self) -> int:
        return len(self.log_probs)

    @property
    def prompt(self) -> str:
        return self.triple.instruction.text

    def step_rewards(self) -> np.ndarray:
        r = np.zeros(self.num_steps)
        r[-1] = self.reward.total
        return r

    @property
    def steps(self) -> list[MdpStep]:
        T = self.num_steps
        rewards = self.step_rewards()
        return [
            MdpStep(self.triple.source, self.triple.instruction.ids, T - 1 - i,
                    self.states[i], self.states[i + 1], float(self.log_probs[i]), float(rewards[i]))
            for i in range(T)
        ]


class PromptStatTracker:
    """Per-instruction reward buffers used as the advantage baseline.

    A prompt with fewer than ``min_count`` stored rewards is normalized with
    the statistics of the whole incoming batch instead.
    """

    def __init__(self, buffer_size: int = 16, min_count: int = 16, std_floor: float = 1e-6):
        self.buffer_size = buffer_size
        self.min_count = min_count
        self.std_floor = std_floor
        self.buffers: dict[str, deque] = {}

    def update(self, prompts, rewards) -> np.ndarray:
        prompts = list(prompts)
        rewards = np.asarray(rewards, dtype=np.float64)
        g_mean = rewards.mean()
        g_std = max(rewards.std(), self.std_floor)
        adv = np.empty_like(rewards)
        for prompt in dict.fromkeys(prompts):
            idx = np.array([i for i, p in enumerate(prompts) if p == prompt])
            buf = self.buffers.setdefault(prompt, deque(maxlen=self.buffer_size))
            # stored as float32 so a checkpointed buffer resumes bit-exactly
            buf.extend(ad.to_f32(rewards[idx]).tolist())
            if len(buf) >= self.min_count:
                mean, std = np.mean(buf), max(np.std(buf), self.std_floor)
            else:
                mean, std = g_mean, g_std
            adv[idx] = (rewards[idx] - mean) / std
        return adv

    def state_blocks(self) -> dict[str, np.ndarray]:
        return {f"tracker/{p}": np.asarray(list(b)) for p, b in self.buffers.items()}

    def load_blocks(self, blocks: dict[str, np.ndarray]) -> None:
        self.buffers = {}
        for name, arr in blocks.items():
            if name.startswith("tracker/"):
                self.buffers[name[len("tracker/"):]] = deque(arr.tolist(), maxlen=self.buffer_size)


# collection

def attention_grid(params: dn.DenoiserParams) -> int:
    return params.config.grid


def collect_trajectories(params: dn.DenoiserParams, schedule: dn.NoiseSchedule,
                         triples: list[EditTriple], noise_seeds, batch_size: int,
                         guidance_scale: float = 1.0, tau: float = 0.05, alpha: float = -1.0,
                         use_attention: bool = True,
                         reference: dn.DenoiserParams | None = None) -> list[Trajectory]:
    """Roll out the frozen policy on ``triples`` and score every result.

    With ``reference`` given, the attention used in the reward comes from
    running that model on the policy's states instead of the policy itself.
    """
    grid = attention_grid(params)
    out: list[Trajectory] = []
    noise_seeds = [int(s) for s in noise_seeds]
    for lo in range(0, len(triples), batch_size):
        chunk = triples[lo:lo + batch_size]
        seeds = noise_seeds[lo:lo + batch_size]
        src = np.stack([tr.source for tr in chunk])
        ids = np.stack([tr.instruction.ids for tr in chunk])
        try:
            res = dn.rollout(params, schedule, src, ids, seeds, guidance_scale)
        except dn.RolloutError as exc:
            names = ", ".join(tr.triple_id for tr in chunk)
            raise dn.RolloutError(f"{exc} (triples {names})") from exc
        attn = res.attention
        if reference is not None:
            attn = reference_attention(reference, schedule, res.states, dn.to_model(src), ids)
        for i, tr in enumerate(chunk):
            a_gt = mask_to_groundtruth_attention(tr.mask, grid, grid)
            rb = score(a_gt, attn[:, :, i], tr.instruction.relevant, tr.source, res.images[i],
                       tau=tau, alpha=alpha, use_attention=use_attention)
            out.append(Trajectory(tr, seeds[i], res.states[:, i], res.log_probs[:, i],
                                  attn[:, :, i], res.images[i], rb))
    return out


def reference_attention(reference, schedule, states, cond, ids) -> np.ndarray:
    maps = []
    with ad.no_grad():
        for i in range(schedule.num_steps):
            t = np.full(states.shape[1], schedule.timesteps[i])
            _, m = dn.forward(reference, states[i], t, cond, ids)
            maps.append(m)
    return np.stack(maps)


def compute_advantages(trajectories: list[Trajectory], tracker: PromptStatTracker,
                       adv_clip_max: float) -> np.ndarray:
    """Normalized terminal reward per trajectory, clipped to ``+-adv_clip_max``.

    Every step of a trajectory shares this value since only the last step
    is rewarded.
    """
    rewards = [tr.reward.total for tr in trajectories]
    adv = tracker.update([tr.prompt for tr in trajectories], rewards)
    return np.clip(adv, -adv_clip_max, adv_clip_max)


# surrogate

@dataclass
class SurrogateStats:
    ratios: list = field(default_factory=list)
    clipped: int = 0
    skipped: int = 0

    def add(self, ratio: np.ndarray, clip_range: float) -> None:
        self.ratios.extend(ratio.tolist())
        self.clipped += int(np.sum(np.abs(ratio - 1.0) > clip_range))

    @property
    def mean_ratio(self) -> float:
        return float(np.mean(self.ratios)) if self.ratios else float("nan")

    @property
    def clip_fraction(self) -> float:
        return self.clipped / len(self.ratios) if self.ratios else 0.0


def surrogate_terms(params, schedule, trajectories, advantages, steps, clip_range,
                    guidance_scale=1.0, stats: SurrogateStats | None = None):
    """Sum of clipped-surrogate terms for one sampler step per trajectory.

    Returns ``(sum_tensor, count)``. Rows whose ratio is not finite are
    dropped and counted in ``stats.skipped``.
    """
    steps = np.asarray(steps, dtype=np.int64)
    keep = np.arange(len(trajectories))
    while True:
        trs = [trajectories[i] for i in keep]
        st = steps[keep]
        src = dn.to_model(np.stack([tr.triple.source for tr in trs]))
        ids = np.stack([tr.triple.instruction.ids for tr in trs])
        x_t = np.stack([tr.states[s] for tr, s in zip(trs, st)])
        x_prev = np.stack([tr.states[s + 1] for tr, s in zip(trs, st)])
        old = np.array([tr.log_probs[s] for tr, s in zip(trs, st)])
        out = dn.guided_predict(params, x_t, schedule.timesteps[st], src, ids, guidance_scale)
        out = dn.transition(out, x_t, st, schedule)
        new = dn.log_prob(x_prev, out)
        ratio = ad.exp(new - old)
        finite = np.isfinite(ratio.data)
        if finite.all():
            break
        if stats is not None:
            stats.skipped += int((~finite).sum())
        keep = keep[finite]
        if keep.size == 0:
            return None, 0
    if stats is not None:
        stats.add(ratio.data, clip_range)
    adv = np.asarray(advantages, dtype=np.float64)[keep]
    return clipped_surrogate(ratio, adv, clip_range).sum(), len(keep)


def clipped_surrogate(ratio: ad.Tensor, advantages: np.ndarray, clip_range: float) -> ad.Tensor:
    """Per-row ``min(r * A, clip(r, 1 - eps, 1 + eps) * A)``; ``eps = inf`` disables clipping."""
    unclipped = ratio * advantages
    clipped = ad.clip(ratio, 1.0 - clip_range, 1.0 + clip_range) * advantages
    return ad.minimum(unclipped, clipped)


def timestep_plan(rng: np.random.Generator, n: int, num_steps: int, fraction: float) -> np.ndarray:
    """Per-trajectory shuffled sampler steps, truncated to the trained fraction."""
    k = max(1, int(num_steps * fraction))
    return np.stack([rng.permutation(num_steps)[:k] for _ in range(n)]) if n else np.zeros((0, k), int)


def ppo_surrogate(params, schedule, trajectories, advantages, clip_range: float,
                  timestep_fraction: float = 1.0, guidance_scale: float = 1.0,
                  rng: np.random.Generator | None = None, stats: SurrogateStats | None = None):
    """Mean clipped surrogate over all retained (trajectory, step) pairs; maximize it."""
    rng = rng or np.random.default_rng(0)
    plan = timestep_plan(rng, len(trajectories), schedule.num_steps, timestep_fraction)
    total, count = None, 0
    for j in range(plan.shape[1]):
        s, c = surrogate_terms(params, schedule, trajectories, advantages, plan[:, j],
                               clip_range, guidance_scale, stats)
        if s is None:
            continue
        total = s if total is None else total + s
        count += c
    if total is None:
        return ad.Tensor(0.0), 0
    return total * (1.0 / count), count


# training loop

def schedule_for(cfg: RunConfig) -> dn.NoiseSchedule:
    return dn.NoiseSchedule(cfg.sample.num_steps, cfg.sample.eta, cfg.model.num_train_timesteps)


def make_optimizer(cfg: RunConfig, params: dn.DenoiserParams) -> ad.AdamW:
    t = cfg.train
    return ad.AdamW(params.trainable(cfg.use_lora), lr=t.learning_rate, beta1=t.adam_beta1,
                    beta2=t.adam_beta2, eps=t.adam_epsilon, weight_decay=t.adam_weight_decay,
                    max_grad_norm=t.max_grad_norm)


def epoch_plan(cfg: RunConfig, epoch: int) -> tuple[list[int], list[int]]:
    """Triple seeds and noise seeds for a (1-based) epoch; depends only on ``(seed, epoch)``."""
    rng = np.random.default_rng([cfg.seed, epoch, 0])
    n = cfg.sample.batch_size * cfg.sample.num_batches_per_epoch
    hi = cfg.world.train_pool if cfg.world.train_pool > 0 else cfg.world.holdout_start
    return rng.integers(0, hi, n).tolist(), rng.integers(0, 2**31 - 1, n).tolist()


@dataclass
class TrainState:
    params: dn.DenoiserParams
    optimizer: ad.AdamW
    tracker: PromptStatTracker
    epoch: int = 0

    def blocks(self) -> dict[str, np.ndarray]:
        out = dict(self.params.arrays())
        by_id = {id(t): n for n, t in self.params.tensors.items()}
        names = [by_id[id(p)] for p in self.optimizer.params]
        for n, m, v in zip(names, self.optimizer.m, self.optimizer.v):
            out[f"optim.m/{n}"] = m
            out[f"optim.v/{n}"] = v
        out["optim.step"] = np.array([self.optimizer.step_count], dtype=np.float64)
        out["train.epoch"] = np.array([self.epoch], dtype=np.float64)
        out.update(self.tracker.state_blocks())
        return out

    def load_blocks(self, blocks: dict[str, np.ndarray]) -> None:
        if "train.epoch" not in blocks:
            raise ckpt.CheckpointError("checkpoint carries no training state (train.epoch)")
        self.params.load_arrays(blocks)
        by_id = {id(t): n for n, t in self.params.tensors.items()}
        for i, p in enumerate(self.optimizer.params):
            n = by_id[id(p)]
            self.optimizer.m[i] = blocks[f"optim.m/{n}"].copy()
            self.optimizer.v[i] = blocks[f"optim.v/{n}"].copy()
        self.optimizer.step_count = int(blocks["optim.step"][0])
        self.epoch = int(blocks["train.epoch"][0])
        self.tracker.load_blocks(blocks)


def _read_metrics(path: Path, upto: int) -> list[dict]:
    if not path.is_file():
        return []
    with path.open(newline="") as fh:
        rows = [{k: int(v) if k == "epoch" else float(v) for k, v in row.items()}
                for row in csv.DictReader(fh)]
    return [row for row in rows if row["epoch"] <= upto]


def _write_metrics(path: Path, rows: list[dict]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRICS_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(row[k]) for k in METRICS_FIELDS})


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    return repr(v) if math.isfinite(v) else "nan"


def _prune(ckpt_dir: Path, limit: int) -> None:
    found = sorted(ckpt_dir.glob("epoch_*.ckpt"))
    for old in found[:-limit] if limit > 0 else found:
        old.unlink()
        manifest = Path(str(old) + ".manifest")
        if manifest.exists():
            manifest.unlink()


def run_epoch(cfg: RunConfig, state: TrainState, world: EditingWorld,
              schedule: dn.NoiseSchedule, reference=None) -> dict:
    epoch = state.epoch + 1
    params, opt = state.params, state.optimizer
    guidance = cfg.sample.guidance_scale if cfg.train.cfg else 1.0

    triple_seeds, noise_seeds = epoch_plan(cfg, epoch)
    triples = [world.generate_triple(s, cfg.world.difficulty) for s in triple_seeds]
    params.freeze()
    trajs = collect_trajectories(
        params, schedule, triples, noise_seeds, cfg.sample.batch_size, guidance,
        tau=cfg.reward.tau, alpha=cfg.reward.alpha, use_attention=cfg.reward.use_attention,
        reference=reference)
    adv = compute_advantages(trajs, state.tracker, cfg.train.adv_clip_max)

    params.set_trainable(cfg.use_lora)
    rng = np.random.default_rng([cfg.seed, epoch, 1])
    stats = SurrogateStats()
    norms = []
    accum = cfg.train.gradient_accumulation_steps
    micro = 0
    opt.zero_grad()
    for _ in range(cfg.train.num_inner_epochs):
        order = rng.permutation(len(trajs))
        plan = timestep_plan(rng, len(trajs), schedule.num_steps, cfg.train.timestep_fraction)
        for lo in range(0, len(trajs), cfg.train.batch_size):
            idx = order[lo:lo + cfg.train.batch_size]
            batch = [trajs[i] for i in idx]
            for j in range(plan.shape[1]):
                s, count = surrogate_terms(params, schedule, batch, adv[idx], plan[idx, j],
                                           cfg.train.clip_range, guidance, stats)
                if s is None:
                    continue
                objective = s * (1.0 / count)
                if not np.isfinite(objective.data):
                    raise TrainingError(f"epoch {epoch}: non-finite surrogate objective")
                ad.backward(objective * (-1.0 / accum))
                micro += 1
                if micro % accum == 0:
                    if opt.step():
                        norms.append(opt.last_grad_norm)
                    opt.zero_grad()
    params.freeze()
    state.epoch = epoch
    return {
        "epoch": epoch,
        "mean_reward": float(np.mean([t.reward.total for t in trajs])),
        "mean_l_att": float(np.mean([t.reward.l_att for t in trajs])),
        "mean_mae": float(np.mean([t.reward.mae for t in trajs])),
        "mean_ratio": stats.mean_ratio,
        "clip_fraction": stats.clip_fraction,
        "grad_norm": float(np.mean(norms)) if norms else 0.0,
    }


def train(cfg: RunConfig, world: EditingWorld, params: dn.DenoiserParams, run_dir,
          epochs: int | None = None, resume_from=None) -> list[dict]:
    """Run PPO epochs, writing ``metrics.csv`` and checkpoints under ``run_dir``.

    ``params`` is updated in place. Returns the metric rows of the whole run
    (including rows carried over from a resumed checkpoint).
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    epochs = cfg.num_epochs if epochs is None else epochs
    schedule = schedule_for(cfg)
    reference = params.copy() if cfg.reward.attention_source == "frozen_reference" else None
    params.set_trainable(cfg.use_lora)
    state = TrainState(params, make_optimizer(cfg, params),
                       PromptStatTracker(cfg.per_prompt_stat_tracking.buffer_size,
                                         cfg.per_prompt_stat_tracking.min_count))
    if resume_from:
        state.load_blocks(ckpt.load(resume_from))
        logger.info("resumed from %s at epoch %d", resume_from, state.epoch)
    params.freeze()

    metrics_path = run_dir / "metrics.csv"
    rows = _read_metrics(metrics_path, state.epoch) if resume_from else []
    _write_metrics(metrics_path, rows)
    while state.epoch < epochs:
        row = run_epoch(cfg, state, world, schedule, reference)
        rows.append(row)
        _write_metrics(metrics_path, rows)
        logger.info("epoch %d reward %.4f l_att %.4f mae %.4f clipfrac %.3f", row["epoch"],
                    row["mean_reward"], row["mean_l_att"], row["mean_mae"], row["clip_fraction"])
        if state.epoch % cfg.save_freq == 0:
            ckpt.save(ckpt_dir / f"epoch_{state.epoch:04d}.ckpt", state.blocks())
            _prune(ckpt_dir, cfg.num_checkpoint_limit)
    ckpt.save(run_dir / "final.ckpt", state.blocks())
    return rows
