"""Function approximators and their training loops."""
from .architectures import (AnalyticGaussianFlow, ConvEncoderDecoder, FinetuneModel, GaussianControlModel,
                            InversePredictor, VectorFieldModel, build_model, input_vjp, param_gradient,
                            position_channels, time_channels, trainable_parameters)
from .training import TrainingHistory, inverse_for_samples, threshold_accuracy, train_inverse

__all__ = [
    "AnalyticGaussianFlow",
    "ConvEncoderDecoder",
    "FinetuneModel",
    "GaussianControlModel",
    "InversePredictor",
    "VectorFieldModel",
    "build_model",
    "input_vjp",
    "param_gradient",
    "position_channels",
    "time_channels",
    "trainable_parameters",
    "TrainingHistory",
    "inverse_for_samples",
    "threshold_accuracy",
    "train_inverse",
]
