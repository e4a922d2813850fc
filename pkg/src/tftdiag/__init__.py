"""Time-frequency transformer for bearing-fault diagnosis, built on a small numpy autodiff engine."""

__version__ = "0.1.0"

from .model import (TFT, ConfigError, ModelConfig, NumericFault, count_parameters, forward,
                    load_checkpoint, save_checkpoint)
from .signals import (DatasetSpec, SignalSpec, WaveletPlan, bicubic_resize, build_dataset, class_preset,
                      class_roster, cwt, generate_signal, inject_noise, load_samples, signal_to_tfr, split_dataset,
                      synchrosqueeze)
from .tensor import Rng, Tensor, gradient_check, no_grad
from .training import Adam, TrainConfig, smoothed_cross_entropy, train
from .evaluation import ConfusionMatrix, attention_summary, evaluate, repeated_trials, snr_sweep

__all__ = [
    "Adam", "ConfigError", "ConfusionMatrix", "DatasetSpec", "ModelConfig", "NumericFault", "Rng",
    "SignalSpec", "TFT", "Tensor", "TrainConfig", "WaveletPlan", "attention_summary", "bicubic_resize",
    "build_dataset", "class_preset", "class_roster", "count_parameters", "cwt", "evaluate", "forward",
    "generate_signal", "gradient_check", "inject_noise", "load_checkpoint", "load_samples", "no_grad", "repeated_trials",
    "save_checkpoint", "signal_to_tfr", "smoothed_cross_entropy", "snr_sweep", "split_dataset",
    "synchrosqueeze", "train",
]
