"""Intention-destination prediction over fused multi-behavior travel logs.

Library layout:

* :mod:`destnet.numerics` - float64 tensor ops, Adam, gradient checking
* :mod:`destnet.data` - event schema, sequence fusion, dataset files
* :mod:`destnet.synth` - synthetic log generator with planted intent
* :mod:`destnet.layers` / :mod:`destnet.model` - the model variants
* :mod:`destnet.train` - Adam training loop and grid search
* :mod:`destnet.evaluate` - AUC, fusing comparison, traces, two-stage scoring
* :mod:`destnet.cli` - the ``destnet`` command
"""

from .data import BehaviorEvent, FusedSequence, SampleRecord, load_dataset
from .errors import DataError, NumericError
from .evaluate import EvalReport, auc, two_stage_score
from .model import ModelParams, VariantSpec, load_checkpoint, save_checkpoint
from .synth import SyntheticConfig, generate_synthetic
from .train import TrainConfig, TrainHistory, train

__version__ = "0.1.0"

__all__ = [
    "BehaviorEvent", "FusedSequence", "SampleRecord", "load_dataset",
    "DataError", "NumericError",
    "EvalReport", "auc", "two_stage_score",
    "ModelParams", "VariantSpec", "load_checkpoint", "save_checkpoint",
    "SyntheticConfig", "generate_synthetic",
    "TrainConfig", "TrainHistory", "train",
    "__version__",
]
