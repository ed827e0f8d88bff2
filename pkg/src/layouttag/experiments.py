"""Experiment protocols: the modality-ablation study and the training-size
learning curve, both run against one fixed page-level split."""

from __future__ import annotations

from dataclasses import dataclass

from .corpus import Corpus
from .metrics import MetricsReport
from .model import MODALITY_MODES, ModelConfig
from .train import RunHistory, TrainConfig, split_corpus, subsample, train_model

__all__ = [
    "AblationResult",
    "CurveRow",
    "CurveResult",
    "ablation_experiment",
    "learning_curve_experiment",
]


def _csv_cell(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class AblationResult:
    """Aligned per-epoch validation curves, one per modality mode."""

    modes: tuple[str, ...]
    histories: tuple[RunHistory, ...]

    def history(self, mode: str) -> RunHistory:
        return self.histories[self.modes.index(mode)]

    def eval_epochs(self) -> tuple[int, ...]:
        return tuple(r.epoch for r in self.histories[0].records if r.metrics is not None)

    def f1_rows(self) -> list[tuple]:
        """(epoch, macro-F1 per mode) for every evaluation epoch."""
        rows = []
        for epoch in self.eval_epochs():
            rows.append((epoch, *(h.metrics_at(epoch).macro_f1 for h in self.histories)))
        return rows

    def to_csv(self) -> str:
        lines = ["epoch," + ",".join(f"macro_f1_{m}" for m in self.modes)]
        for row in self.f1_rows():
            lines.append(",".join(_csv_cell(v) for v in row))
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class CurveRow:
    fraction: float
    n_pages: int
    macro_f1: float


@dataclass(frozen=True)
class CurveResult:
    rows: tuple[CurveRow, ...]
    reports: tuple[MetricsReport, ...]  # final validation report per fraction
    histories: tuple[RunHistory, ...]

    def to_csv(self) -> str:
        lines = ["fraction,train_pages,macro_f1"]
        for r in self.rows:
            lines.append(f"{_csv_cell(r.fraction)},{r.n_pages},{_csv_cell(r.macro_f1)}")
        return "\n".join(lines) + "\n"


def _check_modes(modes) -> tuple[str, ...]:
    modes = tuple(modes)
    if not modes:
        raise ValueError("at least one modality mode is required")
    normalized = tuple("text_only" if m == "no_image_no_layout" else m for m in modes)
    for m in normalized:
        if m not in MODALITY_MODES:
            raise ValueError(f"unknown modality mode {m!r}; expected one of {MODALITY_MODES}")
    if len(set(normalized)) != len(normalized):
        raise ValueError("duplicate modality modes")
    return normalized


def ablation_experiment(
    corpus: Corpus,
    modes,
    model_config: ModelConfig,
    train_config: TrainConfig,
    validation_fraction: float = 0.3,
    split_seed: int = 0,
    log=None,
) -> AblationResult:
    """Train one model per modality mode on an identical split and seed.

    Every arm sees the same training pages, validation pages, initialization
    seed, and batch order; only the modality mask differs.
    """
    modes = _check_modes(modes)
    train, val = split_corpus(corpus, validation_fraction, seed=split_seed)
    histories = []
    for mode in modes:
        mode_log = (lambda msg, m=mode: log(f"[{m}] {msg}")) if log else None
        _, _, history = train_model(train, val, model_config, train_config, mode, log=mode_log)
        histories.append(history)
    result = AblationResult(modes=modes, histories=tuple(histories))
    epochs = {tuple(r.epoch for r in h.records if r.metrics is not None) for h in histories}
    if len(epochs) != 1:
        raise RuntimeError(f"evaluation epoch axes diverged across modes: {epochs}")
    return result


def learning_curve_experiment(
    corpus: Corpus,
    fractions,
    model_config: ModelConfig,
    train_config: TrainConfig,
    validation_fraction: float = 0.3,
    split_seed: int = 0,
    subsample_seed: int = 0,
    modality_mode: str = "full",
    log=None,
) -> CurveResult:
    """Train once per training-set fraction against one fixed validation set.

    Fractions must be ascending and in (0, 1]; for the shared subsample seed
    the training subsets are nested, so the curve isolates data volume.
    """
    fractions = [float(f) for f in fractions]
    if not fractions:
        raise ValueError("at least one fraction is required")
    if any(not 0 < f <= 1 for f in fractions):
        raise ValueError("fractions must lie in (0, 1]")
    if fractions != sorted(fractions) or len(set(fractions)) != len(fractions):
        raise ValueError("fractions must be strictly ascending")
    train, val = split_corpus(corpus, validation_fraction, seed=split_seed)
    rows, reports, histories = [], [], []
    for fraction in fractions:
        sub = subsample(train, fraction, seed=subsample_seed)
        frac_log = (lambda msg, f=fraction: log(f"[{f:g}] {msg}")) if log else None
        _, _, history = train_model(sub, val, model_config, train_config, modality_mode, log=frac_log)
        report = history.final_metrics()
        rows.append(CurveRow(fraction=fraction, n_pages=len(sub.pages), macro_f1=report.macro_f1))
        reports.append(report)
        histories.append(history)
    return CurveResult(rows=tuple(rows), reports=tuple(reports), histories=tuple(histories))
