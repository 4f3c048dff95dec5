"""Small numpy neural-network engine: layers, MSE loss, Adam, gradient checks."""
from .gradcheck import GradcheckResult, TensorCheck, gradcheck, relative_error
from .layers import Conv2d, ConvTranspose2d, Dense, Flatten, Layer, MaxPool2d, ReLU
from .loss import mse_loss
from .optim import Adam, adam_step
from .parameter import Parameter
from .sequential import Sequential

__all__ = [
    "Adam", "Conv2d", "ConvTranspose2d", "Dense", "Flatten", "GradcheckResult", "Layer",
    "MaxPool2d", "Parameter", "ReLU", "Sequential", "TensorCheck", "adam_step", "gradcheck",
    "mse_loss", "relative_error",
]
