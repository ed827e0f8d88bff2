"""Supervised fine-tuning: page-level corpus splitting, nested subsampling,
an adaptive-moment optimizer, and the epoch loop with periodic validation."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace

import numpy as np

from .corpus import Corpus
from .ingest import build_vocab, corpus_sequences
from .metrics import MetricsReport, evaluate
from .model import LayoutModel, ModelConfig, ModelParams, make_batches, mask_modality

__all__ = [
    "TrainConfig",
    "EpochRecord",
    "RunHistory",
    "TrainError",
    "Adam",
    "split_corpus",
    "subsample",
    "train_model",
]


class TrainError(RuntimeError):
    """Training could not proceed (e.g. the loss became non-finite)."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    eval_every: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1 and self.eps > 0):
            raise ValueError("invalid optimizer constants")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    metrics: MetricsReport | None  # present on evaluation epochs


@dataclass(frozen=True)
class RunHistory:
    records: tuple[EpochRecord, ...]
    duration_seconds: float

    def __post_init__(self):
        epochs = [r.epoch for r in self.records]
        if epochs != sorted(epochs) or len(set(epochs)) != len(epochs):
            raise ValueError("epoch indices must be strictly increasing")

    def metrics_at(self, epoch: int) -> MetricsReport:
        for r in self.records:
            if r.epoch == epoch:
                if r.metrics is None:
                    raise KeyError(f"epoch {epoch} was not an evaluation epoch")
                return r.metrics
        raise KeyError(f"no record for epoch {epoch}")

    def final_metrics(self) -> MetricsReport:
        for r in reversed(self.records):
            if r.metrics is not None:
                return r.metrics
        raise ValueError("history contains no evaluation records")

    def csv_rows(self) -> list[tuple]:
        """(epoch, train_loss, macro_f1, accuracy) with blanks off-eval."""
        rows = []
        for r in self.records:
            if r.metrics is None:
                rows.append((r.epoch, r.train_loss, "", ""))
            else:
                rows.append((r.epoch, r.train_loss, r.metrics.macro_f1, r.metrics.accuracy))
        return rows


class Adam:
    """Adaptive-moment optimizer with bias correction (one shared step count)."""

    def __init__(self, params, learning_rate=3e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * np.square(g)
            p.data -= self.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def _subset(corpus: Corpus, indices) -> Corpus:
    pages = [corpus.pages[i] for i in indices]
    rasters = {p.page_id: corpus.rasters[p.page_id] for p in pages}
    return Corpus(pages, rasters, corpus.spec)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_corpus(corpus: Corpus, validation_fraction: float = 0.3, seed: int = 0):
    """Page-level shuffled split -> (train, validation), both nonempty.

    The validation count is the rounded-half-up share; page order within each
    half follows the original corpus order.
    """
    if not 0 < validation_fraction < 1:
        raise ValueError("validation_fraction must be in (0, 1)")
    n = len(corpus.pages)
    n_val = _round_half_up(n * validation_fraction)
    if n_val < 1 or n - n_val < 1:
        raise ValueError(
            f"cannot split {n} pages at fraction {validation_fraction}: "
            "both halves must be nonempty"
        )
    perm = np.random.default_rng(seed).permutation(n)
    val_idx = sorted(perm[:n_val].tolist())
    train_idx = sorted(perm[n_val:].tolist())
    return _subset(corpus, train_idx), _subset(corpus, val_idx)


def subsample(corpus: Corpus, fraction: float, seed: int = 0) -> Corpus:
    """Uniform page-level sample without replacement; for a fixed seed the
    samples are nested (smaller fractions are subsets of larger ones)."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    n = len(corpus.pages)
    keep = _round_half_up(n * fraction)
    if keep < 1:
        raise ValueError(f"fraction {fraction} of {n} pages leaves an empty sample")
    if keep == n:
        return corpus
    perm = np.random.default_rng(seed).permutation(n)
    return _subset(corpus, sorted(perm[:keep].tolist()))


def train_model(
    train_corpus: Corpus,
    val_corpus: Corpus | None,
    model_config: ModelConfig,
    train_config: TrainConfig,
    modality_mode: str = "full",
    log=None,
):
    """Fine-tune on the training split; returns (model, vocab, RunHistory).

    The vocabulary comes from the training split only. The modality mask is
    applied identically to every training batch and every validation pass.
    No class re-weighting or resampling is performed. Raises TrainError if
    the loss becomes non-finite. With ``val_corpus=None`` evaluation is
    skipped entirely and every epoch record carries ``metrics=None``.
    """
    started = time.perf_counter()
    vocab = build_vocab(train_corpus.pages)
    config = replace(model_config, vocab_size=len(vocab))
    params = ModelParams.initialize(config, seed=train_config.seed)
    model = LayoutModel(config, params)
    optimizer = Adam(
        params.tensors(),
        learning_rate=train_config.learning_rate,
        beta1=train_config.beta1,
        beta2=train_config.beta2,
        eps=train_config.eps,
    )
    sequences = corpus_sequences(train_corpus, vocab, config.L)
    if not sequences:
        raise TrainError("training corpus produced no sequences")
    records = []
    for epoch in range(1, train_config.epochs + 1):
        order = np.random.default_rng([train_config.seed, epoch]).permutation(len(sequences))
        loss_sum = 0.0
        weight_sum = 0
        for b, batch in enumerate(
            make_batches(sequences, train_corpus.rasters, config, train_config.batch_size, order)
        ):
            batch = mask_modality(batch, modality_mode)
            loss = model.loss(model.forward(batch), batch)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainError(
                    f"non-finite loss {value} at epoch {epoch}, batch {b} "
                    f"(mode={modality_mode}, seed={train_config.seed})"
                )
            n_masked = int(batch.loss_mask.sum())
            loss_sum += value * n_masked
            weight_sum += n_masked
            params.zero_grad()
            loss.backward()
            optimizer.step()
        train_loss = loss_sum / weight_sum
        metrics = None
        if val_corpus is not None and (
            epoch % train_config.eval_every == 0 or epoch == train_config.epochs
        ):
            metrics = evaluate(model, vocab, val_corpus, modality_mode)
        records.append(EpochRecord(epoch=epoch, train_loss=train_loss, metrics=metrics))
        if log is not None:
            f1 = f"  macro_f1={metrics.macro_f1:.4f}" if metrics else ""
            log(f"epoch {epoch:3d}/{train_config.epochs}  loss={train_loss:.4f}{f1}")
    history = RunHistory(tuple(records), duration_seconds=time.perf_counter() - started)
    return model, vocab, history
