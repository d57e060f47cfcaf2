"""Structured prediction energy networks trained end to end through an unrolled minimizer."""
from .config import ExperimentConfig, load_config, parse_config, preset_config
from .energies import (
    DeepPrior,
    DenoisingEnergy,
    FoePrior,
    LossAugmentedEnergy,
    TaggingEnergy,
    TagInput,
    ToyGlobalEnergy,
)
from .errors import (
    ConfigurationError,
    ContractError,
    DimensionError,
    FormatError,
    InternalConsistencyError,
    NumericError,
    SpenError,
)
from .minimizer import SPEN, Trajectory, UnrollConfig, predict
from .trainer import LossConfig, TrainerConfig, backprop_unroll, ssvm_train, train

__version__ = "0.1.0"
