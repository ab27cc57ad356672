"""changekit: bi-temporal change detection on a small numpy autodiff core.

The main entry points are :class:`ChangeDetector` (the Siamese encoder, the
cross-exchange pyramid and the layer-exchange decoder), :func:`train`,
:func:`evaluate` and the ``changekit`` command-line tool.
"""

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import RunConfig, desk_config, load_config, merge
from .csdw import Csdw, CsdwWeights, change_weight, channel_similarity_map, spatial_similarity_vector
from .data import SamplePair, augment, gen_synthetic, load_dataset, save_dataset, synthetic_splits
from .infer import slide_infer, slide_proba
from .metrics import ConfusionCounts, MetricSet, confusion, metrics, render_confusion
from .model import ChangeDetector
from .tensor import ShapeError, Tensor, grad_check, no_grad
from .train import AdamW, TrainingDiverged, ablate, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "AdamW",
    "ChangeDetector",
    "Checkpoint",
    "CheckpointError",
    "ConfusionCounts",
    "Csdw",
    "CsdwWeights",
    "MetricSet",
    "RunConfig",
    "SamplePair",
    "ShapeError",
    "Tensor",
    "TrainingDiverged",
    "ablate",
    "augment",
    "change_weight",
    "channel_similarity_map",
    "confusion",
    "desk_config",
    "evaluate",
    "gen_synthetic",
    "grad_check",
    "load_checkpoint",
    "load_config",
    "load_dataset",
    "merge",
    "metrics",
    "no_grad",
    "render_confusion",
    "save_checkpoint",
    "save_dataset",
    "slide_infer",
    "slide_proba",
    "spatial_similarity_vector",
    "synthetic_splits",
    "train",
]
