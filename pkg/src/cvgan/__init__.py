"""Conditional VAE-GAN generation of bearing run-to-failure vibration data."""

from .dataset import BearingLifecycle, WindowSet, load_dataset, save_dataset, toy_corpus
from .errors import ConfigError, ContractError, CvganError, DataError, NumericalError
from .losses import LossConfig, compose_config
from .nets import ModelBundle, build_model

__version__ = "0.1.0"
