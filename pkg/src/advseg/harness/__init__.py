"""Training, evaluation, attack sweeps and the command-line interface."""

from .config import ConfigError, DataConfig, RunConfig, SweepConfig, TrainConfig, preset
from .evaluate import EvalReport, ReportRow, attack_sweep, evaluate
from .optim import OptimizerState, adamw_step, lr_at
from .train import TrainingDiverged, train
