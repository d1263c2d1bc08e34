"""Parameter-efficient transfer of dual-encoder image-text retrieval models."""

from .config import EncoderConfig, LossConfig, PetlStrategy, RunConfig, ToyDatasetConfig
from .encoder import DualEncoder, build_model, encode
from .errors import ConfigError, InputError, NumericalError
from .losses import cross_modal_loss, hmmc_loss, intra_modal_loss
from .metrics import MetricsRecord, mean_recall, recall_at_k
from .petl import attach_strategy, count_parameters

__version__ = "0.1.0"
