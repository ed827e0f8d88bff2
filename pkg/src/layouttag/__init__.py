"""Layout-aware multimodal token classification for register-style documents.

The package bundles everything needed to reproduce the desk-scale pipeline:
a float64 autodiff kernel (`autodiff`), a deterministic synthetic corpus
generator (`corpus`), serialization and tagging utilities (`ingest`), the
text+layout+image token classifier (`model`), the training and experiment
harness (`train`, `experiments`), evaluation metrics (`metrics`), an
sklearn-style estimator facade (`estimator`), and a command-line interface
(`cli`).
"""

__version__ = "0.1.0"

from .autodiff import GradReport, Tensor, grad_check
from .corpus import (
    Corpus,
    GenerationError,
    GeneratorSpec,
    Page,
    PageRaster,
    Token,
    generate_corpus,
    load_corpus,
    rasterize,
    save_corpus,
)
from .estimator import LayoutTokenClassifier
from .experiments import ablation_experiment, learning_curve_experiment
from .ingest import Vocab, build_vocab, filter_pages, normalize_box, reading_order, tag_tokens
from .labels import LABEL_ORDER, LabelClass
from .metrics import MetricsReport, evaluate, metrics_from_counts
from .model import MODALITY_MODES, LayoutModel, ModelConfig, load_checkpoint, save_checkpoint
from .train import TrainConfig, split_corpus, subsample, train_model

__all__ = [
    "__version__",
    "GradReport",
    "Tensor",
    "grad_check",
    "Corpus",
    "GenerationError",
    "GeneratorSpec",
    "Page",
    "PageRaster",
    "Token",
    "generate_corpus",
    "load_corpus",
    "rasterize",
    "save_corpus",
    "LayoutTokenClassifier",
    "ablation_experiment",
    "learning_curve_experiment",
    "Vocab",
    "build_vocab",
    "filter_pages",
    "normalize_box",
    "reading_order",
    "tag_tokens",
    "LABEL_ORDER",
    "LabelClass",
    "MetricsReport",
    "evaluate",
    "metrics_from_counts",
    "MODALITY_MODES",
    "LayoutModel",
    "ModelConfig",
    "load_checkpoint",
    "save_checkpoint",
    "TrainConfig",
    "split_corpus",
    "subsample",
    "train_model",
]
