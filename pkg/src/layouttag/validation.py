"""Input-validation helpers shared by the estimator facade and the CLI."""

from __future__ import annotations

from .corpus import Corpus
from .model import MODALITY_MODES

__all__ = ["check_corpus", "normalize_modality_mode"]


def check_corpus(corpus, *, raster_size: int | None = None) -> Corpus:
    """Validate a corpus argument and return it unchanged.

    Raises TypeError for non-Corpus inputs and ValueError for an empty corpus
    or rasters that do not match the expected square resolution.
    """
    if not isinstance(corpus, Corpus):
        raise TypeError(
            f"expected a Corpus, got {type(corpus).__name__}; build one with "
            "generate_corpus or load_corpus"
        )
    if not corpus.pages:
        raise ValueError("corpus contains no pages")
    if raster_size is not None:
        raster = corpus.rasters[corpus.pages[0].page_id]
        if (raster.width, raster.height) != (raster_size, raster_size):
            raise ValueError(
                f"corpus rasters are {raster.width}x{raster.height} but the model "
                f"expects {raster_size}x{raster_size}; regenerate the corpus with "
                f"raster_size={raster_size}"
            )
    return corpus


def normalize_modality_mode(mode: str) -> str:
    """Map the long alias to its canonical name and reject unknown modes."""
    if mode == "no_image_no_layout":
        return "text_only"
    if mode not in MODALITY_MODES:
        raise ValueError(
            f"unknown modality mode {mode!r}; expected one of {MODALITY_MODES} "
            "or the alias 'no_image_no_layout'"
        )
    return mode
