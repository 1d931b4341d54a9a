"""Multi-scale learned image codec.

An autoencoder produces quantized feature maps at several spatial scales;
a lossless coder predicts them from already decoded values and drives a
range coder.
"""

from .autoencoder import Autoencoder, CodecConfig, TrainSchedule, single_scale
from .codec import Codec, CoderSchedule, ModelMismatchError
from .metrics import ms_ssim

__all__ = [
    "Autoencoder",
    "Codec",
    "CodecConfig",
    "CoderSchedule",
    "ModelMismatchError",
    "TrainSchedule",
    "ms_ssim",
    "single_scale",
]
__version__ = "0.1.0"
