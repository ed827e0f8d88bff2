"""Sklearn-style estimator facade over the corpus-to-model pipeline."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .ingest import build_sequence
from .labels import LABEL_ORDER
from .metrics import MetricsReport, evaluate
from .model import ModelConfig, make_batches, mask_modality
from .train import TrainConfig, train_model
from .validation import check_corpus, normalize_modality_mode

__all__ = ["LayoutTokenClassifier"]


class LayoutTokenClassifier(BaseEstimator):
    """Token classifier over register-style pages with text, layout and image.

    The estimator wraps corpus preparation, model construction, and the
    training loop behind the familiar ``fit`` / ``predict`` / ``score``
    interface. ``X`` is a :class:`~layouttag.corpus.Corpus`; gold labels ride
    along inside the corpus, so no separate ``y`` is passed.

    Parameters correspond one-to-one to the model and trainer knobs; see
    :class:`~layouttag.model.ModelConfig` and
    :class:`~layouttag.train.TrainConfig` for their meaning. ``modality_mode``
    selects which input channels the model sees, both during fit and predict
    (``full``, ``no_image``, ``no_layout``, ``text_only``).

    Attributes set by ``fit``: ``model_`` (the trained network), ``vocab_``
    (training-split vocabulary), ``config_`` (resolved model configuration),
    ``history_`` (per-epoch records), and ``classes_`` (label names in class
    index order).
    """

    def __init__(
        self,
        d_model: int = 96,
        n_heads: int = 4,
        n_layers: int = 2,
        L: int = 128,
        raster_size: int = 64,
        grid: int = 4,
        rel_bias_buckets: int = 32,
        dropout: float = 0.0,
        epochs: int = 30,
        batch_size: int = 8,
        learning_rate: float = 3e-4,
        eval_every: int = 1,
        modality_mode: str = "full",
        seed: int = 0,
    ):
        self.d_model = d_model
        self.n_heads = n_heads
        self.n_layers = n_layers
        self.L = L
        self.raster_size = raster_size
        self.grid = grid
        self.rel_bias_buckets = rel_bias_buckets
        self.dropout = dropout
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.eval_every = eval_every
        self.modality_mode = modality_mode
        self.seed = seed

    def _model_config(self) -> ModelConfig:
        return ModelConfig(
            vocab_size=4,  # placeholder; train_model resolves it from the vocabulary
            d_model=self.d_model,
            n_heads=self.n_heads,
            n_layers=self.n_layers,
            L=self.L,
            raster_size=self.raster_size,
            grid=self.grid,
            rel_bias_buckets=self.rel_bias_buckets,
            dropout=self.dropout,
        )

    def fit(self, X, y=None, validation_corpus=None):
        """Train on every page of the corpus ``X``.

        ``y`` is accepted for interface compatibility and must be None. An
        optional ``validation_corpus`` is evaluated on the ``eval_every``
        grid and recorded in ``history_``; without one, ``history_`` holds
        training losses only.
        """
        if y is not None:
            raise ValueError("labels live inside the corpus; pass y=None")
        corpus = check_corpus(X, raster_size=self.raster_size)
        if validation_corpus is not None:
            validation_corpus = check_corpus(validation_corpus, raster_size=self.raster_size)
        mode = normalize_modality_mode(self.modality_mode)
        train_config = TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            seed=self.seed,
            eval_every=self.eval_every,
        )
        model, vocab, history = train_model(
            corpus, validation_corpus, self._model_config(), train_config, mode
        )
        self.model_ = model
        self.vocab_ = vocab
        self.config_ = model.config
        self.history_ = history
        self.classes_ = np.array([label.value for label in LABEL_ORDER])
        return self

    def predict(self, X):
        """Per-page label names for every token, in reading order.

        Returns a list with one entry per corpus page: the predicted label
        name of each of the page's tokens, ordered as OCR reads them.
        """
        check_is_fitted(self, "model_")
        corpus = check_corpus(X, raster_size=self.raster_size)
        mode = normalize_modality_mode(self.modality_mode)
        predictions = []
        for page in corpus.pages:
            sequences = build_sequence(page, self.vocab_, self.config_.L)
            labels: list[str] = []
            for batch in make_batches(sequences, corpus.rasters, self.config_, batch_size=32):
                batch = mask_modality(batch, mode)
                predicted = self.model_.predict(batch)
                for row, mask in zip(predicted, batch.loss_mask):
                    labels.extend(LABEL_ORDER[i].value for i in row[mask])
            predictions.append(labels)
        return predictions

    def report(self, X) -> MetricsReport:
        """Full per-class evaluation report against the corpus gold labels."""
        check_is_fitted(self, "model_")
        corpus = check_corpus(X, raster_size=self.raster_size)
        return evaluate(self.model_, self.vocab_, corpus, normalize_modality_mode(self.modality_mode))

    def score(self, X, y=None) -> float:
        """Macro-averaged F1 over the ten classes (the headline metric)."""
        if y is not None:
            raise ValueError("labels live inside the corpus; pass y=None")
        return self.report(X).macro_f1
