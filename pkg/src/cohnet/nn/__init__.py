"""Small numpy autodiff substrate: layers, U-Net, Adam and weight files."""

from cohnet.nn.adam import AdamState, adam_step
from cohnet.nn.layers import (
    Conv3x3,
    Dense,
    Identity,
    Layer,
    MaxPool2,
    ReLU,
    Sigmoid,
    SkipConcat,
    UpsampleNearest2,
)
from cohnet.nn.network import (
    Network,
    NumericalError,
    build_mlp,
    build_unet,
    init_weights,
)
from cohnet.nn.weights import (
    BadWeightMagicError,
    ChecksumError,
    ShapeMismatchError,
    TruncatedWeightsError,
    WeightFileError,
    file_checksum,
    load_weights,
    read_weight_file,
    save_weights,
)

__all__ = [
    "AdamState",
    "adam_step",
    "Conv3x3",
    "Dense",
    "Identity",
    "Layer",
    "MaxPool2",
    "ReLU",
    "Sigmoid",
    "SkipConcat",
    "UpsampleNearest2",
    "Network",
    "NumericalError",
    "build_mlp",
    "build_unet",
    "init_weights",
    "BadWeightMagicError",
    "ChecksumError",
    "ShapeMismatchError",
    "TruncatedWeightsError",
    "WeightFileError",
    "file_checksum",
    "load_weights",
    "read_weight_file",
    "save_weights",
]
