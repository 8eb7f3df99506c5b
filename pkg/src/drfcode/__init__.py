"""Deep SNR-robust feedback codes on a small numpy autodiff engine."""

from .channel import ChannelSpec, MulticastSpec, generate_dataset
from .model import DRFModel, ModelConfig
from .trainer import TrainPlan, train

__all__ = ["ChannelSpec", "MulticastSpec", "generate_dataset", "DRFModel", "ModelConfig", "TrainPlan", "train"]
