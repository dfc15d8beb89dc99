"""Per-flow delay prediction from packet traces with a message-passing GNN."""

from .model import forward, predict
from .nn import ModelConfig, ModelParams, init_params, load_checkpoint, save_checkpoint
from .scenario import Device, DeviceKind, Distribution, Flow, LinkPort, NetworkScenario, build_scenario
from .training import TrainConfig, evaluate, log_mse_loss, mape, train

__version__ = "0.1.0"
