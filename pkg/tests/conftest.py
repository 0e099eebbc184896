from types import SimpleNamespace

import numpy as np
import pytest

from pixforge import denoiser as dn
from pixforge import ppo
from pixforge.world import EditingWorld


def central_difference(f, x: np.ndarray, h: float = 1e-4, coords=None) -> np.ndarray:
    """d f / d x by central differences, ``x`` perturbed in place and restored."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in (range(flat.size) if coords is None else coords):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        g[i] = (fp - fm) / (2 * h)
    return grad


def rel_err(a, b, floor: float = 1e-6):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


@pytest.fixture(scope="session")
def world():
    return EditingWorld()


@pytest.fixture(scope="session")
def small_config(world):
    return dn.DenoiserConfig(vocab_size=len(world.vocab))


@pytest.fixture
def random_params(small_config):
    """Untrained weights with non-zero LoRA factors so every path carries gradient."""
    p = dn.init_params(small_config, seed=7)
    rng = np.random.default_rng(3)
    for n in p.lora_names():
        p[n].data = rng.normal(0, 0.2, p[n].shape)
    return p


@pytest.fixture(scope="session")
def desk_cfg():
    from pixforge.config import desk_profile
    return desk_profile()


@pytest.fixture(scope="session")
def pretrained(world, desk_cfg):
    """Desk-profile pretraining (seed 42), with weight snapshots along the way."""
    cfg = desk_cfg
    params = dn.init_params(dn.DenoiserConfig(vocab_size=len(world.vocab)), cfg.seed)
    initial = params.arrays()
    snapshots = {}

    def on_step(step, loss):
        if step + 1 in (100, 2000):
            snapshots[step + 1] = params.arrays()

    losses = dn.pretrain(world, params, cfg.pretrain.steps, cfg.pretrain.batch_size,
                         cfg.pretrain.learning_rate, seed=cfg.seed,
                         cond_dropout=cfg.pretrain.cond_dropout, on_step=on_step)
    snapshots[0] = initial
    return {"params": params, "losses": losses, "snapshots": snapshots}


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def desk_runs(world, desk_cfg, pretrained, tmp_path_factory):
    """Full, attention-only and clip-only desk trainings from the shared pretrained start."""
    runs = {}
    variants = {"full": {}, "attention_only": {"reward.alpha": 0.0},
                "clip_only": {"reward.use_attention": False}}
    for name, over in variants.items():
        cfg = desk_cfg.replace(**over)
        params = pretrained["params"].copy()
        rows = ppo.train(cfg, world, params, tmp_path_factory.mktemp(name))
        runs[name] = SimpleNamespace(rows=rows, params=params)
    return runs


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
