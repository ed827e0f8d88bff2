"""Preprocessing pipeline: OCR-style serialization to model-ready sequences.

Stages, in order: row-major reading order over token boxes, metadata-based
token tagging with demotion of red/underlined (historical) matches, page
filtering by entity-label count, bounding-box normalization to the [0, 1000]
grid, vocabulary construction, and fixed-length sequence framing with
[CLS]/[SEP]/[PAD] specials.

Historicity is *rediscovered* from ink color and underlining here — the
generator's own flags are never consulted, mirroring an OCR pipeline that
only sees what is on the page.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import Corpus, Page, Token
from .labels import LabelClass, LABEL_ORDER, label_index

__all__ = [
    "EmptyCorpusError",
    "NormBox",
    "EMPTY_BOX",
    "Vocab",
    "ModelSequence",
    "reading_order",
    "tag_tokens",
    "filter_pages",
    "normalize_box",
    "build_vocab",
    "build_sequence",
    "corpus_sequences",
    "save_prepared",
    "load_prepared",
]

PAD, CLS, SEP, UNK = "[PAD]", "[CLS]", "[SEP]", "[UNK]"
RESERVED = (PAD, CLS, SEP, UNK)
PAD_ID, CLS_ID, SEP_ID, UNK_ID = 0, 1, 2, 3


class EmptyCorpusError(ValueError):
    """Every page was filtered out."""


# ---------------------------------------------------------------------------
# reading order
# ---------------------------------------------------------------------------


def reading_order(page) -> list[Token]:
    """Sort tokens row-major: vertical bands top-to-bottom, left-to-right within.

    Two tokens belong to the same row when their box-center vertical distance
    is below half the median token height; rows are the transitive closure of
    that relation. Reading deliberately crosses table columns.
    """
    tokens = list(page.tokens)
    if not tokens:
        return []
    centers = np.array([(t.box[1] + t.box[3]) / 2.0 for t in tokens])
    heights = np.array([t.box[3] - t.box[1] for t in tokens])
    tau = float(np.median(heights)) / 2.0
    order = np.argsort(centers, kind="stable")
    # Walk centers in ascending order; chain into one band while consecutive
    # gaps stay below tau (equivalent to the transitive closure of the
    # pairwise |cy_i - cy_j| < tau relation).
    band_of = np.empty(len(tokens), dtype=int)
    band = 0
    band_of[order[0]] = 0
    for prev, cur in zip(order[:-1], order[1:]):
        if centers[cur] - centers[prev] >= tau:
            band += 1
        band_of[cur] = band
    keys = sorted(
        range(len(tokens)),
        key=lambda i: (band_of[i], tokens[i].box[0], tokens[i].box[1], tokens[i].text),
    )
    return [tokens[i] for i in keys]


# ---------------------------------------------------------------------------
# tagging and filtering
# ---------------------------------------------------------------------------


def tag_tokens(page, metadata: dict[LabelClass, tuple[str, ...]] | None = None) -> list[tuple[Token, LabelClass]]:
    """Label reading-ordered tokens by exact metadata string matching.

    A token run (consecutive in reading order) matching a metadata value's
    whitespace-split words receives the value's label — unless any token in
    the run is red or underlined, in which case the match is demoted to
    ``other`` (historical information carries no entity labels).
    """
    if metadata is None:
        metadata = page.entity_metadata
    ordered = reading_order(page)
    texts = [t.text for t in ordered]
    labels = [LabelClass.OTHER] * len(ordered)
    for label in LABEL_ORDER:
        values = metadata.get(label)
        if not values:
            continue
        for value in values:
            words = value.split()
            if not words:
                raise ValueError(f"empty metadata value under {label.value}")
            n = len(words)
            for start in range(0, len(texts) - n + 1):
                if texts[start : start + n] != words:
                    continue
                run = ordered[start : start + n]
                if any(t.color == "red" or t.underlined for t in run):
                    continue  # historical: demoted to other
                for k in range(start, start + n):
                    if labels[k] is LabelClass.OTHER:
                        labels[k] = label
    return list(zip(ordered, labels))


def filter_pages(corpus: Corpus) -> Corpus:
    """Keep pages with at least 3 entity labels (per the tagging pipeline)."""
    kept = []
    for page in corpus.pages:
        if not page.tokens:
            continue
        n_entity = sum(label is not LabelClass.OTHER for _, label in tag_tokens(page))
        if n_entity >= 3:
            kept.append(page)
    if not kept:
        raise EmptyCorpusError("no pages left after filtering (need >= 3 entity labels)")
    rasters = {p.page_id: corpus.rasters[p.page_id] for p in kept}
    return Corpus(kept, rasters, corpus.spec)


# ---------------------------------------------------------------------------
# box normalization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NormBox:
    """A token box on the 1001-point normalized grid."""

    x_min: int
    x_max: int
    y_min: int
    y_max: int
    width: int
    height: int

    def __post_init__(self):
        for v in (self.x_min, self.x_max, self.y_min, self.y_max):
            if not 0 <= v <= 1000:
                raise ValueError(f"normalized coordinate {v} outside [0, 1000]")
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError(f"inverted normalized box {self}")
        if self.width != self.x_max - self.x_min or self.height != self.y_max - self.y_min:
            raise ValueError(f"inconsistent width/height in {self}")

    def as_tuple(self) -> tuple[int, int, int, int, int, int]:
        return (self.x_min, self.x_max, self.y_min, self.y_max, self.width, self.height)


EMPTY_BOX = NormBox(0, 0, 0, 0, 0, 0)


def normalize_box(box_px: tuple[int, int, int, int], page_w: int, page_h: int) -> NormBox:
    """Discretize a pixel box to integer coordinates in [0, 1000] (floor+clamp)."""
    if page_w <= 0 or page_h <= 0:
        raise ValueError(f"degenerate page dimensions {page_w}x{page_h}")
    x0, y0, x1, y1 = box_px

    def scale(v, dim):
        return max(0, min(1000, (v * 1000) // dim))

    x_min, x_max = scale(x0, page_w), scale(x1, page_w)
    y_min, y_max = scale(y0, page_h), scale(y1, page_h)
    return NormBox(x_min, x_max, y_min, y_max, x_max - x_min, y_max - y_min)


# ---------------------------------------------------------------------------
# vocabulary
# ---------------------------------------------------------------------------


class Vocab:
    """Closed token vocabulary with reserved ids 0..3 = [PAD],[CLS],[SEP],[UNK]."""

    def __init__(self, words):
        self.id_to_token = list(RESERVED) + [w for w in words if w not in RESERVED]
        if len(set(self.id_to_token)) != len(self.id_to_token):
            raise ValueError("duplicate words in vocabulary")
        self.token_to_id = {w: i for i, w in enumerate(self.id_to_token)}

    def __len__(self):
        return len(self.id_to_token)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.id_to_token == other.id_to_token

    def id(self, text: str) -> int:
        return self.token_to_id.get(text, UNK_ID)

    def hash(self) -> str:
        h = hashlib.sha256()
        for w in self.id_to_token:
            h.update(w.encode("utf-8"))
            h.update(b"\x00")
        return h.hexdigest()


def build_vocab(pages, min_count: int = 1) -> Vocab:
    """Frequency-then-lexicographic vocabulary over page token texts."""
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts: dict[str, int] = {}
    for page in pages:
        for t in page.tokens:
            counts[t.text] = counts.get(t.text, 0) + 1
    kept = [w for w, c in counts.items() if c >= min_count]
    kept.sort(key=lambda w: (-counts[w], w))
    return Vocab(kept)


# ---------------------------------------------------------------------------
# sequence framing
# ---------------------------------------------------------------------------

SEG_TEXT, SEG_PAD, SEG_VISUAL = 0, 1, 2


@dataclass(frozen=True)
class ModelSequence:
    """One fixed-length model input window over a page's reading order."""

    token_ids: tuple[int, ...]
    segment_ids: tuple[int, ...]
    norm_boxes: tuple[tuple[int, int, int, int, int, int], ...]
    labels: tuple[int, ...]
    loss_mask: tuple[bool, ...]
    page_ref: str

    def __post_init__(self):
        L = len(self.token_ids)
        for name in ("segment_ids", "norm_boxes", "labels", "loss_mask"):
            if len(getattr(self, name)) != L:
                raise ValueError(f"{name} length != sequence length {L}")
        if self.token_ids[0] != CLS_ID:
            raise ValueError("sequence must start with [CLS]")
        if self.token_ids.count(SEP_ID) != 1:
            raise ValueError("sequence must contain exactly one [SEP]")
        sep = self.token_ids.index(SEP_ID)
        if any(v != PAD_ID for v in self.token_ids[sep + 1 :]):
            raise ValueError("only [PAD] may follow [SEP]")
        if PAD_ID in self.token_ids[1:sep]:
            raise ValueError("[PAD] inside real content")
        empty = EMPTY_BOX.as_tuple()
        for pos in [0, sep, *range(sep + 1, L)]:
            if self.norm_boxes[pos] != empty or self.loss_mask[pos]:
                raise ValueError("special tokens must carry the empty box and no loss")

    @property
    def real_token_count(self) -> int:
        return sum(self.loss_mask)


def build_sequence(page, vocab: Vocab, L: int, tagged=None) -> list[ModelSequence]:
    """Frame a page's reading-ordered, tagged tokens into L-length windows.

    Pages longer than L-2 real tokens split into consecutive non-overlapping
    windows. Labels default to the tagging pipeline's output; pass `tagged`
    to reuse a precomputed ``tag_tokens`` result.
    """
    if L < 8:
        raise ValueError("sequence length must be >= 8")
    if tagged is None:
        tagged = tag_tokens(page)
    if not tagged:
        return []
    other = label_index(LabelClass.OTHER)
    empty = EMPTY_BOX.as_tuple()
    sequences = []
    for start in range(0, len(tagged), L - 2):
        window = tagged[start : start + L - 2]
        ids = [CLS_ID]
        segs = [SEG_TEXT]
        boxes = [empty]
        labels = [other]
        mask = [False]
        for token, label in window:
            ids.append(vocab.id(token.text))
            segs.append(SEG_TEXT)
            boxes.append(normalize_box(token.box, page.width_px, page.height_px).as_tuple())
            labels.append(label_index(label))
            mask.append(True)
        ids.append(SEP_ID)
        segs.append(SEG_TEXT)
        boxes.append(empty)
        labels.append(other)
        mask.append(False)
        while len(ids) < L:
            ids.append(PAD_ID)
            segs.append(SEG_PAD)
            boxes.append(empty)
            labels.append(other)
            mask.append(False)
        sequences.append(
            ModelSequence(
                token_ids=tuple(ids),
                segment_ids=tuple(segs),
                norm_boxes=tuple(boxes),
                labels=tuple(labels),
                loss_mask=tuple(mask),
                page_ref=page.page_id,
            )
        )
    return sequences


def corpus_sequences(corpus: Corpus, vocab: Vocab, L: int) -> list[ModelSequence]:
    """All pages' sequences in corpus page order."""
    out = []
    for page in corpus.pages:
        out.extend(build_sequence(page, vocab, L))
    return out


# ---------------------------------------------------------------------------
# prepared-dataset files
# ---------------------------------------------------------------------------


def save_prepared(sequences, vocab: Vocab, out_dir) -> Path:
    """Write sequences.jsonl plus vocab.json (explicit id order) under out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "vocab.json", "w", encoding="utf-8") as f:
        json.dump({"id_to_token": vocab.id_to_token}, f)
    path = out_dir / "sequences.jsonl"
    with open(path, "w", encoding="utf-8") as f:
        for s in sequences:
            rec = {
                "token_ids": list(s.token_ids),
                "segment_ids": list(s.segment_ids),
                "norm_boxes": [list(b) for b in s.norm_boxes],
                "labels": list(s.labels),
                "loss_mask": list(s.loss_mask),
                "page_ref": s.page_ref,
            }
            f.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")
    return path


def load_prepared(in_dir) -> tuple[list[ModelSequence], Vocab]:
    in_dir = Path(in_dir)
    with open(in_dir / "vocab.json", "r", encoding="utf-8") as f:
        vocab = Vocab(json.load(f)["id_to_token"][len(RESERVED) :])
    sequences = []
    with open(in_dir / "sequences.jsonl", "r", encoding="utf-8") as f:
        for line in f:
            rec = json.loads(line)
            sequences.append(
                ModelSequence(
                    token_ids=tuple(rec["token_ids"]),
                    segment_ids=tuple(rec["segment_ids"]),
                    norm_boxes=tuple(tuple(b) for b in rec["norm_boxes"]),
                    labels=tuple(rec["labels"]),
                    loss_mask=tuple(bool(v) for v in rec["loss_mask"]),
                    page_ref=rec["page_ref"],
                )
            )
    return sequences, vocab
