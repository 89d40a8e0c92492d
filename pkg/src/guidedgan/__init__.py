"""Guided, spectrally normalized unpaired face translation with VAE and pix2pix baselines."""

from .core_types import ImageBatch, LandmarkSet, LossReport, ParsingMask
from .losses import LossWeights, PatchSampleSpec
from .networks import DiscriminatorConfig, Generator, GeneratorConfig, MultiScaleDiscriminator
from .train_engine import AugmentPolicy, GuidedCycleGAN, TrainSchedule

__version__ = "0.1.0"

__all__ = ["AugmentPolicy", "DiscriminatorConfig", "Generator", "GeneratorConfig", "GuidedCycleGAN",
           "ImageBatch", "LandmarkSet", "LossReport", "LossWeights", "MultiScaleDiscriminator",
           "ParsingMask", "PatchSampleSpec", "TrainSchedule"]
