"""Sparse-gradient routing for mixture-of-experts layers, on a small numpy autodiff tape."""

from .autodiff import Tensor, backward, detach
from .balance import BalanceConfig, LoadStats, balance_loss, global_reduce
from .estimators import EstimatorConfig, EstimatorKind, RoutingTrace, inference, route_train
from .model import ModelParams, MoELayerSpec, ToyModelSpec, init_params, load_checkpoint, model_forward, save_checkpoint
from .routing import GateDistribution, masked_softmax, make_rng
from .trainer import TaskSpec, TrainConfig, make_task, train

__version__ = "0.1.0"

__all__ = [
    "BalanceConfig",
    "EstimatorConfig",
    "EstimatorKind",
    "GateDistribution",
    "LoadStats",
    "ModelParams",
    "MoELayerSpec",
    "RoutingTrace",
    "TaskSpec",
    "Tensor",
    "ToyModelSpec",
    "TrainConfig",
    "backward",
    "balance_loss",
    "detach",
    "global_reduce",
    "inference",
    "init_params",
    "load_checkpoint",
    "make_rng",
    "make_task",
    "masked_softmax",
    "model_forward",
    "route_train",
    "save_checkpoint",
    "train",
]
