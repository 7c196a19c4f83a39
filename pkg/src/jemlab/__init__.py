"""Joint energy-based models on small data: a classifier's logits read as an
unnormalized density, trained with SGLD-driven contrastive divergence and
evaluated for calibration, out-of-distribution detection and robustness."""

from .diffcore import Network, Tape, Tensor
from .energy import JemModel
from .experiment import RunConfig, build_data, build_model, load_config, parse_config
from .sampler import ReplayBuffer, SamplerConfig
from .trainer import TrainConfig, train

__all__ = [
    "Network",
    "Tape",
    "Tensor",
    "JemModel",
    "RunConfig",
    "build_data",
    "build_model",
    "load_config",
    "parse_config",
    "ReplayBuffer",
    "SamplerConfig",
    "TrainConfig",
    "train",
]

__version__ = "0.1.0"
