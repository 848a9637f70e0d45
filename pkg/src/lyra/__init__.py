"""Lyra: projected gated convolutions composed with a diagonal state-space
long convolution, on a small numpy autograd core."""

from .model import LyraConfig, LyraModel, build, forward, load_checkpoint, param_count, save_checkpoint
from .numerics import Rng
from .train import AdamW, TrainConfig, train_loop

__all__ = ["AdamW", "LyraConfig", "LyraModel", "Rng", "TrainConfig", "build", "forward",
           "load_checkpoint", "param_count", "save_checkpoint", "train_loop"]
__version__ = "0.1.0"
