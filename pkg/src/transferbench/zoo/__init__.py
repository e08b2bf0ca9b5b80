"""Model zoo: builders, training, spiking conversion and dynamic inference."""

from .architectures import ARCH_FAMILIES, build_model
from .checkpoint import content_hash, load_model, save_model
from .data import DatasetSpec, load_cifar_binary, synthetic_split
from .dynn import build_dynn, dynn_forward
from .snn import convert_to_snn, snn_attack_gradient
from .training import TrainHyper, accuracy, calibrate_frozen_batchnorm, train_model

__all__ = [
    "ARCH_FAMILIES",
    "DatasetSpec",
    "TrainHyper",
    "accuracy",
    "build_dynn",
    "build_model",
    "calibrate_frozen_batchnorm",
    "content_hash",
    "convert_to_snn",
    "dynn_forward",
    "load_cifar_binary",
    "load_model",
    "save_model",
    "snn_attack_gradient",
    "synthetic_split",
    "train_model",
]
