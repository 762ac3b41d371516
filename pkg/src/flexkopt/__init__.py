"""Learning-to-search routing solver built on flexible k-opt exchanges.

The package factorizes arbitrary k-opt moves into short sequences of basis
moves selected by a recurrent dual-stream policy, explores infeasible
regions of capacitated problems under guided reward shaping, trains with
n-step proximal policy optimization, and solves with dynamic data
augmentation at inference time.
"""

from .errors import (
    ConfigError,
    DataError,
    FlexkoptError,
    InfeasibleConstructionError,
    InvalidArgumentError,
    InvalidMoveError,
    InvalidStateError,
    MalformedInputError,
    SizeLimitError,
    TrainingDivergedError,
    UnsupportedFormatError,
)
from .instance import CVRP, TSP, Instance, augment, generate_uniform, read_dataset, write_dataset
from .solution import FeasibilityClass, Tour, capacity_violation, feasibility_class, initial_tour, objective
from .training import Config, ModelBundle, load_checkpoint, save_checkpoint, train
from .search import SolveResult, solve_batch, solve_d2a

__version__ = "0.1.0"

__all__ = [
    "CVRP",
    "Config",
    "ConfigError",
    "DataError",
    "FeasibilityClass",
    "FlexkoptError",
    "InfeasibleConstructionError",
    "Instance",
    "InvalidArgumentError",
    "InvalidMoveError",
    "InvalidStateError",
    "MalformedInputError",
    "ModelBundle",
    "SizeLimitError",
    "SolveResult",
    "TSP",
    "Tour",
    "TrainingDivergedError",
    "UnsupportedFormatError",
    "augment",
    "capacity_violation",
    "feasibility_class",
    "generate_uniform",
    "initial_tour",
    "load_checkpoint",
    "objective",
    "read_dataset",
    "save_checkpoint",
    "solve_batch",
    "solve_d2a",
    "train",
    "write_dataset",
    "__version__",
]
