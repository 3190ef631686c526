"""Guided diffusion editing lab: dual text guidance plus perceptual posterior guidance."""

from .guidance import GuidanceConfig, compose_null_anchor, compose_src_anchor, gate, perceptual_update
from .pipeline import EditResult, Models, PipelineConfig, edit, evaluate, invert
from .prompts import Prompt
from .schedule import add_noise, ddim_invert_step, ddim_step, make_schedule, tweedie_z0
from .tensor import Tensor, backward, check_gradient, no_grad

__all__ = [
    "GuidanceConfig",
    "compose_src_anchor",
    "compose_null_anchor",
    "gate",
    "perceptual_update",
    "EditResult",
    "Models",
    "PipelineConfig",
    "edit",
    "evaluate",
    "invert",
    "Prompt",
    "make_schedule",
    "add_noise",
    "tweedie_z0",
    "ddim_step",
    "ddim_invert_step",
    "Tensor",
    "backward",
    "check_gradient",
    "no_grad",
]
