"""Toy instruction-based image editing fine-tuned with PPO on an attention reward."""

from .config import RunConfig, desk_profile, full_profile
from .denoiser import DenoiserConfig, DenoiserParams, NoiseSchedule, init_params, rollout
from .world import EditingWorld, EditTriple, Vocabulary

__version__ = "0.1.0"

__all__ = [
    "DenoiserConfig", "DenoiserParams", "EditTriple", "EditingWorld", "NoiseSchedule",
    "RunConfig", "Vocabulary", "desk_profile", "init_params", "full_profile", "rollout",
]
