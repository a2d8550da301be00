"""Small numpy deep-learning engine and the speckle decoder networks."""

from .layers import (BatchNorm, Conv2D, Dense, Flatten, MaxPool2, ReLU, Sequential,
                     conv2d_backward, conv2d_forward, cross_entropy, mse, softmax)
from .model import (Architecture, DecoderModel, build_decoder, build_linear_baseline,
                    load_model, model_from_bytes, model_to_bytes, save_model)
from .train import Adam, EpochLoss, Prediction, TrainConfig, fit, loss_and_grads, predict

__all__ = [
    "Adam", "Architecture", "BatchNorm", "Conv2D", "DecoderModel", "Dense", "EpochLoss",
    "Flatten", "MaxPool2", "Prediction", "ReLU", "Sequential", "TrainConfig",
    "build_decoder", "build_linear_baseline", "conv2d_backward", "conv2d_forward",
    "cross_entropy", "fit", "load_model", "loss_and_grads", "model_from_bytes",
    "model_to_bytes", "mse", "predict", "save_model", "softmax",
]
