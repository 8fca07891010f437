"""Many-to-many image translation: one shared encoder, one decoder per domain."""

from .data import MultiDomainDataset, SynthSpec, load_split, sample_bag, synth_generate
from .losses import LossRecord, LossWeights
from .model import DiscriminatorConfig, GeneratorBundle, GeneratorConfig, build_discriminator, build_generator
from .trainer import TrainConfig, TrainState, load_checkpoint, lr_at_epoch, save_checkpoint, train

__version__ = "0.1.0"
