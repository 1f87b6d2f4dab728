"""Scene-aware neural representation codec for 4D light field images."""

from .lightfield import (
    AngularCoord,
    LightField,
    LightFieldError,
    crop_and_center,
    load_lightfield,
    make_synthetic_lightfield,
    save_lightfield,
)
from .model import FinalizedModel, ModelConfig, SanrModel, finalize_model, latent_shape
from .bitstream import BitstreamError, deserialize_model, serialize_model, stream_info
from .training import TrainConfig, TrainReport, TrainingDivergenceError, sga_finetune, train

__version__ = "0.1.0"

__all__ = [
    "AngularCoord",
    "BitstreamError",
    "FinalizedModel",
    "LightField",
    "LightFieldError",
    "ModelConfig",
    "SanrModel",
    "TrainConfig",
    "TrainReport",
    "TrainingDivergenceError",
    "crop_and_center",
    "deserialize_model",
    "finalize_model",
    "latent_shape",
    "load_lightfield",
    "make_synthetic_lightfield",
    "save_lightfield",
    "serialize_model",
    "sga_finetune",
    "stream_info",
    "train",
]
