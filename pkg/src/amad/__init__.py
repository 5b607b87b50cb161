"""AutoMask attention anomaly detector for multivariate time series."""

from .data import AnomalySpec, NormStats, TimeSeries, load_series, synth_generate
from .model import AmadParams, AttentionPack, ForwardOutput, ModelConfig, init_params, model_forward
from .scoring import EvalReport, ScoreReport, detect, precision_recall_f1
from .train import FitResult, TrainConfig, fit

__version__ = "0.1.0"
