"""Dynamic-rank training: low-rank layers that inflate and deflate on a schedule."""

from .config import ExperimentConfig
from .data import Dataset, generate_synthetic, ingest_csv
from .diagnostics import ComputeBudget, compute_budget, spectral_ratio, tail_reconstruction_heatmap
from .errors import (
    ConfigError,
    ContractError,
    DomainError,
    IngestionError,
    ParameterError,
    RankShiftError,
    ShapeError,
    StateError,
)
from .layers import Layer, Network, conv, dense, mlp
from .linalg import cp_als, hosvd_conv, numerical_rank, svd, truncated_svd
from .rank_adjust import DeflationInit, deflate, inflate, prop1_bounds_check, prop2_gap, prop2_gaps
from .schedule import LrSchedule, RankSchedule, TrainOptions, auto_place, train

__version__ = "0.1.0"
