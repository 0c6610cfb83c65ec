"""Structured diffusion bridges on a synthetic content-style benchmark."""

from .bridge import NoiseSchedule, Trajectory, sample_bridge
from .denoiser import DenoiserConfig, DenoiserParams, init_params, score
from .engine import BridgePair, RunConfig, StructuredBridge, evaluate, run_cell, train, translate
from .exceptions import (CalibrationError, ConfigError, ContractError, DimensionError,
                         DivergenceError, DomainError, NumericError, SDBError)
from .metrics import ContentClassifier, MetricsReport, mmd2_rbf, swd
from .objectives import CapacityLedger, ObjectiveConfig
from .synthgen import Dataset, GeneratorSpec, build_generator

__version__ = "0.1.0"
