"""Time-conditioned Noise2Noise denoising for denatured image sequences."""
from .imaging import Domain, FrameSequence, Image, psnr, ssim
from .nn import ModelSpec
from .synth import Mode, NoiseSpec, ToySpec
from .training import TrainConfig, TrainedModel, predict, train

__all__ = ["Domain", "FrameSequence", "Image", "psnr", "ssim", "ModelSpec", "Mode", "NoiseSpec",
           "ToySpec", "TrainConfig", "TrainedModel", "predict", "train"]
__version__ = "0.1.0"
