from .blocks import InceptionBlock, ResidualBlock, SEBlock, inception_block, residual_block, se_block
from .serialize import load_model, model_from_bytes, model_to_bytes, save_model
from .unet import EncoderVariant, UNetConfig, UNetModel, build_unet, forward

__all__ = [
    "EncoderVariant",
    "InceptionBlock",
    "ResidualBlock",
    "SEBlock",
    "UNetConfig",
    "UNetModel",
    "build_unet",
    "forward",
    "inception_block",
    "load_model",
    "model_from_bytes",
    "model_to_bytes",
    "residual_block",
    "save_model",
    "se_block",
]
