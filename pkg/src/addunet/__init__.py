"""Additive U-Net denoisers built on a small numpy autodiff core."""

from .model import AddUNetConfig, ModelState, alpha, build, forward, set_alpha
from .data import NoiseSpec, corrupt, synth_patterns
from .trainer import RampSchedule, TrainConfig, train

__all__ = [
    "AddUNetConfig", "ModelState", "NoiseSpec", "RampSchedule", "TrainConfig",
    "alpha", "build", "corrupt", "forward", "set_alpha", "synth_patterns", "train",
]
__version__ = "0.1.0"
