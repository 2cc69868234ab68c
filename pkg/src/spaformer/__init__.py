"""Shadow removal in numpy: transformer encoder/decoder, progressive two-wheel attention,
frequency/spatial residual blocks and a conditional patch discriminator, with a small
reverse-mode autodiff core to train them."""
from .errors import ContractError, EmptyRegionError, NonFiniteError
from .model import ModelConfig, SpAFormer, init_params, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, TrainLog, infer, train

__all__ = [
    "ContractError",
    "EmptyRegionError",
    "NonFiniteError",
    "ModelConfig",
    "SpAFormer",
    "init_params",
    "load_checkpoint",
    "save_checkpoint",
    "TrainConfig",
    "TrainLog",
    "infer",
    "train",
]
