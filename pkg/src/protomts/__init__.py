"""Two-level prototype learning for interpretable multivariable time series classification."""

from .dataset import Dataset, Pair, Sample, normalize, sample_pairs, stratified_split
from .errors import ConfigError, ContractError, DataError, DimensionError, ModelLoadError, ParseError, ProtoError
from .synthetic import SyntheticConfig, generate
from .training import Model, TrainConfig, evaluate, fit, load_model, predict, save_model
from .tsfile import load_ts, parse_ts, write_ts

__version__ = "0.1.0"
