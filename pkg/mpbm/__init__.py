from mpbm.numerics import DimensionError, InvariantError
from mpbm.modeling import ArchitectureConfig, ArchitectureMismatch, PredictionModel
from mpbm.mixgen import MixupGenerator, generate
from mpbm.query import SgldConfig, sgld_query
from mpbm.trainer import AugmentStore, TrainConfig, TrainingAborted, run
