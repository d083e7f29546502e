from .data import synth_dataset
from .metrics import dice, mean_dice, weighted_cross_entropy
from .trainer import MasterWeights, TrainConfig, TrainResult, evaluate, train, train_step

__all__ = [
    "MasterWeights", "TrainConfig", "TrainResult", "dice", "evaluate", "mean_dice",
    "synth_dataset", "train", "train_step", "weighted_cross_entropy",
]
