"""Joint spectral convolutional network (JSCN) for cross-domain recommendation."""

from .data import DatasetBundle, SyntheticSpec, generate_synthetic, load_bundle, save_bundle
from .evaluation import EvalReport, evaluate
from .graph import BipartiteDomain, DomainSpectrum, domain_spectrum
from .model import ModelHyperparams, forward, init_parameters
from .pipeline import RunConfig, run_bundle, run_training
from .training import SharedUserIndex, TrainConfig, train

__all__ = [
    "BipartiteDomain",
    "DatasetBundle",
    "DomainSpectrum",
    "EvalReport",
    "ModelHyperparams",
    "RunConfig",
    "SharedUserIndex",
    "SyntheticSpec",
    "TrainConfig",
    "domain_spectrum",
    "evaluate",
    "forward",
    "generate_synthetic",
    "init_parameters",
    "load_bundle",
    "run_bundle",
    "run_training",
    "save_bundle",
    "train",
]

__version__ = "0.1.0"
