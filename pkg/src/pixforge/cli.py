"""``pixforge`` command line: pretrain, train, eval, sample, plot."""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import config as config_mod
from . import denoiser as dn
from . import metrics, ppo
from .config import ConfigError, RunConfig
from .plot import plot_run
from .reward import aggregate_attention
from .world import EditingWorld, write_pgm

logger = logging.getLogger("pixforge")

LOCK_NAME = ".pixforge.lock"


class CliError(RuntimeError):
    pass


@contextlib.contextmanager
def run_lock(run_dir: Path):
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise CliError(f"run directory {run_dir} is locked ({lock} exists)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield run_dir
    finally:
        lock.unlink(missing_ok=True)


def load_config(args) -> RunConfig:
    base = config_mod.full_profile() if args.profile == "full" else config_mod.desk_profile()
    cfg = config_mod.load(args.config, base) if args.config else base
    if getattr(args, "seed", None) is not None and args.command in ("pretrain", "train"):
        cfg = cfg.replace(seed=args.seed)
    return cfg


def make_world(cfg: RunConfig) -> EditingWorld:
    return EditingWorld(cfg.world.size, cfg.world.max_tokens)


def new_params(cfg: RunConfig, world: EditingWorld) -> dn.DenoiserParams:
    m = cfg.model
    dcfg = dn.DenoiserConfig(
        image_size=cfg.world.size, patch=m.patch, width=m.width, heads=m.heads, blocks=m.blocks,
        vocab_size=len(world.vocab), max_tokens=cfg.world.max_tokens, lora_rank=m.lora_rank,
        lora_scale=m.lora_scale, num_train_timesteps=m.num_train_timesteps)
    return dn.init_params(dcfg, cfg.seed)


def load_params(cfg: RunConfig, world: EditingWorld, path) -> dn.DenoiserParams:
    params = new_params(cfg, world)
    params.load_arrays(ckpt.load(path))
    return params


def _out_dir(args, cfg: RunConfig, name: str) -> Path:
    return Path(args.out) if args.out else Path(config_mod.resolve_logdir(cfg)) / name


def _write_manifest(run_dir: Path, cfg: RunConfig, **extra) -> None:
    (run_dir / "manifest.txt").write_text(config_mod.manifest(cfg, extra))


def cmd_pretrain(args) -> int:
    cfg = load_config(args)
    world = make_world(cfg)
    with run_lock(_out_dir(args, cfg, "pretrain")) as run_dir:
        _write_manifest(run_dir, cfg, command="pretrain")
        params = new_params(cfg, world)
        p = cfg.pretrain
        losses = dn.pretrain(world, params, p.steps, p.batch_size, p.learning_rate, seed=cfg.seed,
                             cond_dropout=p.cond_dropout, difficulty=cfg.world.difficulty)
        with (run_dir / "pretrain_loss.csv").open("w") as fh:
            fh.write("step,loss\n")
            fh.writelines(f"{i + 1},{v!r}\n" for i, v in enumerate(losses))
        path = ckpt.save(run_dir / "pretrained.ckpt", params.arrays())
        print(f"wrote {path}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args)
    if args.resume:
        cfg = cfg.replace(resume_from=args.resume)
    resume = cfg.resume_from or None
    if resume and not Path(resume).is_file():
        raise CliError(f"resume checkpoint not found: {resume}")
    world = make_world(cfg)
    pretrained = cfg.pretrained_checkpoint or str(
        Path(config_mod.resolve_logdir(cfg)) / "pretrain" / "pretrained.ckpt")
    if not Path(pretrained).is_file():
        raise CliError(f"pretrained checkpoint not found: {pretrained} (run 'pixforge pretrain')")
    with run_lock(_out_dir(args, cfg, "train")) as run_dir:
        _write_manifest(run_dir, cfg, command="train", pretrained=pretrained)
        params = load_params(cfg, world, pretrained)
        rows = ppo.train(cfg, world, params, run_dir, resume_from=resume)
        if rows:
            last = rows[-1]
            print(f"epoch {last['epoch']}: mean_reward {last['mean_reward']:.4f} "
                  f"mean_l_att {last['mean_l_att']:.4f}")
    return 0


def _checkpoint_arg(args, cfg: RunConfig) -> Path:
    path = Path(args.checkpoint) if args.checkpoint else \
        Path(config_mod.resolve_logdir(cfg)) / "train" / "final.ckpt"
    if not path.is_file():
        raise CliError(f"checkpoint not found: {path}")
    return path


def cmd_eval(args) -> int:
    cfg = load_config(args)
    world = make_world(cfg)
    path = _checkpoint_arg(args, cfg)
    params = load_params(cfg, world, path)
    seeds = range(cfg.world.holdout_start, cfg.world.holdout_start + cfg.world.holdout_count)
    guidance = cfg.sample.guidance_scale if cfg.train.cfg else 1.0
    with run_lock(_out_dir(args, cfg, "eval")) as run_dir:
        report = metrics.evaluate_set(params, world, seeds, ppo.schedule_for(cfg), guidance,
                                      reference=args.reference, difficulty=cfg.world.difficulty,
                                      out_csv=run_dir / "eval.csv")
        print(f"{report.count} triples vs {args.reference}: l1 {report.l1:.4f} l2 {report.l2:.4f} "
              f"ssim {report.ssim:.4f} psnr {report.psnr:.2f}")
    return 0


def render_attention(a_map: np.ndarray, size: int) -> np.ndarray:
    """Nearest-neighbour upsample of a normalized map to ``size``, brightest cell = 1."""
    a = np.asarray(a_map, dtype=np.float64)
    a = a / a.sum()
    rep = size // a.shape[0]
    return np.kron(a / a.max(), np.ones((rep, rep)))


def cmd_sample(args) -> int:
    cfg = load_config(args)
    world = make_world(cfg)
    params = load_params(cfg, world, _checkpoint_arg(args, cfg))
    seed = cfg.world.holdout_start if args.seed is None else args.seed
    tr = world.generate_triple(seed, cfg.world.difficulty)
    guidance = cfg.sample.guidance_scale if cfg.train.cfg else 1.0
    res = dn.rollout(params, ppo.schedule_for(cfg), tr.source, tr.instruction.ids, [seed], guidance)
    agg = aggregate_attention(res.attention[:, :, 0], tr.instruction.relevant)
    run_dir = _out_dir(args, cfg, f"sample_{seed}")
    try:
        with run_lock(run_dir):
            write_pgm(run_dir / "source.pgm", tr.source)
            write_pgm(run_dir / "mask.pgm", tr.mask)
            write_pgm(run_dir / "output.pgm", res.images[0])
            write_pgm(run_dir / "attention.pgm", render_attention(agg.map, cfg.world.size))
            (run_dir / "instruction.txt").write_text(tr.instruction.text + "\n")
    except OSError as exc:
        raise CliError(f"cannot write to {run_dir}: {exc}") from None
    print(f"wrote {run_dir}: {tr.instruction.text}")
    return 0


def cmd_plot(args) -> int:
    run_dir = Path(args.out or args.run_dir or ".")
    metrics_path = run_dir / "metrics.csv"
    if not metrics_path.is_file():
        raise CliError(f"metrics file not found: {metrics_path}")
    try:
        svg, summary = plot_run(run_dir)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    print(f"wrote {svg}")
    for name, (first, last) in summary.items():
        print(f"{name}: first decile {first:.6f} last decile {last:.6f}")
    return 0


COMMANDS = {"pretrain": cmd_pretrain, "train": cmd_train, "eval": cmd_eval,
            "sample": cmd_sample, "plot": cmd_plot}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pixforge", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value config file, applied over --profile")
        p.add_argument("--profile", choices=("desk", "full"), default="desk")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="run directory")
        if name == "train":
            p.add_argument("--resume", help="training checkpoint to continue from")
        if name in ("eval", "sample"):
            p.add_argument("--checkpoint")
        if name == "eval":
            p.add_argument("--reference", choices=("source", "golden"), default="source")
        if name == "plot":
            p.add_argument("run_dir", nargs="?")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, CliError, ckpt.CheckpointError) as exc:
        print(f"pixforge {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (dn.RolloutError, ppo.TrainingError) as exc:
        print(f"pixforge {args.command}: aborted: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
