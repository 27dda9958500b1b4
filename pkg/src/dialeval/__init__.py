"""Continual updating and evaluation of a neural dialogue-response scorer."""

from .autodiff import Graph
from .config import RunConfig, load_run_config
from .corpus import Quad, SystemCorpus, Vocabulary, default_corpora
from .harness import ablate_training_size, gap_experiment, run_sequence
from .metrics import spearman
from .strategies import EvaluatorState, predict, update

__all__ = [
    "Graph",
    "RunConfig",
    "load_run_config",
    "Quad",
    "SystemCorpus",
    "Vocabulary",
    "default_corpora",
    "ablate_training_size",
    "gap_experiment",
    "run_sequence",
    "spearman",
    "EvaluatorState",
    "predict",
    "update",
]

__version__ = "0.1.0"
