"""Deterministic generator of synthetic company-register extract pages.

Each page mimics the structural properties of scanned register extracts:
a boilerplate header, a facts table (company name, seat, capital), person
lists per role in fixed columns, numbered rows, and filler paragraphs that
push the share of unlabeled tokens above 90%. A configurable fraction of
entity rows is duplicated as *historical* variants: red, underlined, and
always labeled ``other``.

Design notes that matter for learnability:
- Person names share one vocabulary across all four roles, so a person's
  role is recoverable only from the column the entry sits in.
- Two person rosters occupy two separate vertical bands. Their sizes follow
  the same law, names come from the same pools, and rows use the same
  columns, so the block contents carry no tell. Most pages pair one current
  with one historical roster -- the historical one usually in the upper band
  (chronological layout), which leaves position as a weak prior -- but some
  pages carry two still-active rosters and some are fully superseded, so
  only the red ink identifies a roster's status with certainty.
- Historical *fact* values (old seat, old capital) sit in a fixed area just
  below the facts table, so their historicity is recoverable from layout
  alone -- by design only person-block historicity needs the page image.
- All word categories (filler, names, cities, company words, headers, legal
  forms, currencies) are mutually disjoint string sets, which makes exact
  metadata string matching unambiguous.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .labels import LabelClass

__all__ = [
    "GenerationError",
    "CorpusFormatError",
    "Token",
    "Page",
    "PageRaster",
    "GeneratorSpec",
    "Corpus",
    "generate_page",
    "generate_corpus",
    "rasterize",
    "save_corpus",
    "load_corpus",
    "corpus_hash",
]


class GenerationError(ValueError):
    """The generator spec cannot produce a valid page."""


class CorpusFormatError(ValueError):
    """A corpus file is malformed, truncated, or of an unknown schema version."""


# ---------------------------------------------------------------------------
# word inventories (closed, mutually disjoint)
# ---------------------------------------------------------------------------


def _products(bases, ends, max_len=None):
    out = []
    for b in bases:
        for e in ends:
            w = b + e
            if max_len is None or len(w) <= max_len:
                out.append(w)
    return out


_FILLER_STEMS = ["trag", "setz", "gang", "halt", "lauf", "schlag", "druck", "bind", "fass", "leit", "richt", "stell", "zieh", "wend", "bring"]
_FILLER_SUFFIXES = ["ung", "bar", "lich", "sam", "nis", "end", "haft", "los", "voll", "tum"]
_FILLER_POOL = tuple(
    _products(_FILLER_STEMS, _FILLER_SUFFIXES)
    + _products(
        ["an", "be", "er", "ge", "ver", "zer", "ent", "um", "vor", "nach", "auf", "aus", "mit", "unter", "wider", "ab"],
        [s + t for s in _FILLER_STEMS for t in _FILLER_SUFFIXES],
    )
)
FIRST_NAMES = tuple(
    _products(
        ["Al", "Ber", "Die", "Eg", "Fried", "Ger", "Hein", "Ing", "Jo", "Kon", "Lud", "Mar", "Nor", "Ot", "Ru", "Wil"],
        ["bert", "helm", "mund", "win", "olf"],
        max_len=8,
    )[:48]
)
LAST_NAMES = tuple(
    _products(
        ["Baum", "Berg", "Busch", "Feld", "Hof", "Stein", "Wald", "Gross", "Klein", "Lang", "Stock", "Brand", "Horn", "Korn", "Moor", "Rade"],
        ["mann", "ner", "hauer", "meier", "huber"],
        max_len=9,
    )[:60]
)
CITY_NAMES = tuple(
    _products(
        ["Nord", "Sued", "Ost", "West", "Alt", "Neu", "Ober", "Unter", "Gruen", "Hoch", "Tief", "Rhein", "Main", "Elb", "Oder", "Saar"],
        ["stadt", "heim", "hausen", "furt", "brueck"],
        max_len=12,
    )[:40]
)
COMPANY_WORDS = tuple(
    _products(
        ["Metall", "Textil", "Moebel", "Papier", "Glas", "Beton", "Kohle", "Stahl", "Holz", "Elektro", "Chemie", "Leder", "Farben", "Draht", "Ziegel", "Kupfer"],
        ["bau", "werk", "handel", "technik", "vertrieb"],
        max_len=13,
    )[:50]
)
HEADER_WORDS = (
    "Handelsregister", "Amtsgericht", "Registerblatt", "Abteilung", "Eintragung",
    "Bekanntmachung", "Registerauszug", "Geschaeftsjahr", "Blattnummer",
    "Urkundenrolle", "Verfuegung", "Aktenzeichen",
)
FACT_HEADERS = ("Firma", "Sitz", "Kapital")
PERSON_HEADERS = ("Geschaeftsfuehrer", "Prokurist", "Kommanditist", "Gesellschafter")
PERSON_ROLES = (
    LabelClass.DIRECTOR,
    LabelClass.AUTHORIZED_OFFICER,
    LabelClass.LIMITED_PARTNER,
    LabelClass.SHAREHOLDER,
)
LEGAL_FORMS = ("GmbH", "AG", "KG", "OHG", "UG", "SE")
CURRENCIES = ("EUR", "DEM")

_ALL_SETS = [
    set(_FILLER_POOL), set(FIRST_NAMES), set(LAST_NAMES), set(CITY_NAMES),
    set(COMPANY_WORDS), set(HEADER_WORDS), set(FACT_HEADERS), set(PERSON_HEADERS),
    set(LEGAL_FORMS), set(CURRENCIES),
]
for _i in range(len(_ALL_SETS)):
    for _j in range(_i + 1, len(_ALL_SETS)):
        _overlap = _ALL_SETS[_i] & _ALL_SETS[_j]
        assert not _overlap, f"word inventories overlap: {_overlap}"

# page geometry (tuned to the default 850x1100 page)
_CHAR_W = 8
_TOKEN_H = 18
_WORD_GAP = 8
_ROW_PITCH = 28
_ROWNUM_X = 20
_FACTS_COL_X = (60, 340, 580)
_PERSON_COL_X = (60, 240, 455, 670)
_FILLER_X0, _FILLER_X1 = 60, 820
_HEADER_Y = 38
_FACTS_HEADER_Y = 80
_FACTS_ROW_Y = (112, 140)
_BAND0_FILLER_Y = (168, 196, 224, 252)
_BLOCK_Y0 = (288, 563)  # top of the two person-block bands
_BLOCK_MAX_ENTRY_ROWS = 8
_BAND3_FILLER_Y = tuple(840 + _ROW_PITCH * k for k in range(9))
_MAX_ROLE_ENTRIES = 6
_TARGET_TOTAL_TOKENS = 248  # two model windows at L=128; pooled other-share ~0.93
_HIST_UPPER_P = 0.75  # chance that the historical roster takes the upper band
# Page archetypes: one current + one historical roster, two still-active
# rosters, or a fully superseded page. The mix keeps band position a weak
# prior for roster status while the expected share of labeled tokens stays
# what a single current roster would give.
_ARCHETYPES = ("mixed", "dual_current", "dual_hist")
_ARCHETYPE_P = (0.7, 0.15, 0.15)


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Token:
    """One word on the page with its pixel box and annotation."""

    text: str
    box: tuple[int, int, int, int]  # (x0, y0, x1, y1) in page pixels
    color: str = "black"
    underlined: bool = False
    gold_label: LabelClass = LabelClass.OTHER
    historical: bool = False

    def __post_init__(self):
        if not self.text or any(c.isspace() for c in self.text):
            raise ValueError(f"token text must be non-empty without whitespace: {self.text!r}")
        x0, y0, x1, y1 = self.box
        if not (x0 < x1 and y0 < y1):
            raise ValueError(f"degenerate token box {self.box}")
        if self.color not in ("black", "red"):
            raise ValueError(f"token color must be black or red, got {self.color!r}")
        if self.historical and self.gold_label is not LabelClass.OTHER:
            raise ValueError("historical tokens must be labeled other")


@dataclass(frozen=True)
class Page:
    """A generated page: tokens in document-source order plus planting metadata."""

    page_id: str
    width_px: int
    height_px: int
    tokens: tuple[Token, ...]
    entity_metadata: dict[LabelClass, tuple[str, ...]]

    def __post_init__(self):
        for t in self.tokens:
            x0, y0, x1, y1 = t.box
            if not (0 <= x0 and x1 <= self.width_px and 0 <= y0 and y1 <= self.height_px):
                raise ValueError(f"token box {t.box} outside page {self.width_px}x{self.height_px}")
            if (t.color == "red" or t.underlined) and t.gold_label is not LabelClass.OTHER:
                raise ValueError("red/underlined tokens must be labeled other")
        planted_words = {
            label: {w for value in values for w in value.split()}
            for label, values in self.entity_metadata.items()
        }
        for t in self.tokens:
            if t.gold_label is LabelClass.OTHER:
                continue
            if t.text not in planted_words.get(t.gold_label, ()):
                raise ValueError(
                    f"token {t.text!r} labeled {t.gold_label.value} but absent from metadata"
                )

    @property
    def entity_token_count(self) -> int:
        return sum(t.gold_label is not LabelClass.OTHER for t in self.tokens)


class PageRaster:
    """An RGB rendering of a page at a fixed raster resolution."""

    def __init__(self, width: int, height: int, pixels: np.ndarray):
        pixels = np.asarray(pixels, dtype=np.uint8)
        if pixels.shape != (height, width, 3):
            raise ValueError(f"raster pixels must be [{height},{width},3], got {pixels.shape}")
        self.width = width
        self.height = height
        self.pixels = pixels

    def __eq__(self, other):
        return (
            isinstance(other, PageRaster)
            and self.width == other.width
            and self.height == other.height
            and np.array_equal(self.pixels, other.pixels)
        )

    def __repr__(self):
        return f"PageRaster({self.width}x{self.height})"


@dataclass(frozen=True)
class GeneratorSpec:
    """Knobs of the synthetic register generator (defaults are the contract).

    ``historical_fraction`` is the chance that each company fact (seat,
    capital) also shows its superseded value; any nonzero fraction also
    enables the page archetypes that plant historical person rosters, while
    zero disables history entirely (no red or underlined tokens; both
    rosters stay active).
    """

    page_width: int = 850
    page_height: int = 1100
    entity_tokens_min: int = 10
    entity_tokens_max: int = 25
    historical_fraction: float = 0.3
    filler_vocab_size: int = 500
    capital_min: int = 1_000
    capital_max: int = 10_000_000
    raster_size: int = 64

    def validate(self) -> None:
        if not (810 <= self.page_width <= 1700 and 1090 <= self.page_height <= 2200):
            raise GenerationError(
                f"page dimensions {self.page_width}x{self.page_height} outside the "
                "supported layout range (min 810x1090)"
            )
        if not 6 <= self.entity_tokens_min <= self.entity_tokens_max:
            raise GenerationError("need 6 <= entity_tokens_min <= entity_tokens_max")
        if self.entity_tokens_max > 5 + 2 * 4 * _MAX_ROLE_ENTRIES:
            raise GenerationError(
                f"entity_tokens_max={self.entity_tokens_max} plants more entities than the "
                "page layout can hold"
            )
        if not 0.0 <= self.historical_fraction <= 1.0:
            raise GenerationError("historical_fraction must be in [0, 1]")
        if not 50 <= self.filler_vocab_size <= len(_FILLER_POOL):
            raise GenerationError(
                f"filler_vocab_size must be in [50, {len(_FILLER_POOL)}]"
            )
        if not 1 <= self.capital_min < self.capital_max:
            raise GenerationError("need 1 <= capital_min < capital_max")
        if self.raster_size < 16:
            raise GenerationError("raster_size must be >= 16")


class Corpus:
    """An ordered collection of pages with their rasters and generator spec."""

    def __init__(self, pages, rasters: dict[str, PageRaster], spec: GeneratorSpec):
        self.pages = tuple(pages)
        ids = [p.page_id for p in self.pages]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate page ids in corpus")
        missing = [i for i in ids if i not in rasters]
        if missing:
            raise ValueError(f"pages without rasters: {missing[:3]}")
        self.rasters = dict(rasters)
        self.spec = spec

    def __len__(self):
        return len(self.pages)

    def __eq__(self, other):
        return (
            isinstance(other, Corpus)
            and self.pages == other.pages
            and self.rasters == other.rasters
            and self.spec == other.spec
        )

    def __repr__(self):
        return f"Corpus({len(self.pages)} pages)"


# ---------------------------------------------------------------------------
# page generation
# ---------------------------------------------------------------------------


def _format_capital(n: int) -> str:
    return f"{n:,}".replace(",", ".")


def _word_width(text: str) -> int:
    return _CHAR_W * len(text)


class _RowPlan:
    """One laid-out row: y position and (x, text, label, historical) items."""

    def __init__(self, y: int, numbered: bool, historical: bool):
        self.y = y
        self.numbered = numbered
        self.historical = historical
        self.items: list[tuple[int, str, LabelClass]] = []

    def add(self, x: int, text: str, label: LabelClass = LabelClass.OTHER):
        self.items.append((x, text, label))


def _emit_row(tokens: list[Token], row: _RowPlan, number: int | None) -> None:
    color = "red" if row.historical else "black"
    items = list(row.items)
    if row.numbered:
        items = [(_ROWNUM_X, f"{number}.", LabelClass.OTHER)] + items
    for x, text, label in items:
        tokens.append(
            Token(
                text=text,
                box=(x, row.y, x + _word_width(text), row.y + _TOKEN_H),
                color=color,
                underlined=row.historical,
                gold_label=LabelClass.OTHER if row.historical else label,
                historical=row.historical,
            )
        )


def generate_page(seed: int, spec: GeneratorSpec, page_id: str | None = None) -> Page:
    """Deterministically generate one register-extract page from a seed."""
    spec.validate()
    rng = np.random.default_rng(seed)
    jitter = lambda y: int(y + rng.integers(-2, 3))  # noqa: E731 (shared per row)
    filler_vocab = _FILLER_POOL[: spec.filler_vocab_size]

    # --- choose entity content -------------------------------------------
    target_entities = int(rng.integers(spec.entity_tokens_min, spec.entity_tokens_max + 1))
    n_company = int(rng.integers(1, 4))
    for _ in range(64):
        company_words = [str(w) for w in rng.choice(COMPANY_WORDS, size=n_company, replace=False)]
        width = sum(_word_width(w) for w in company_words) + _WORD_GAP * (n_company - 1)
        if width <= 250:
            break
    else:
        raise GenerationError("could not fit a company name into its column")
    legal_form = str(rng.choice(LEGAL_FORMS))
    city = str(rng.choice(CITY_NAMES))
    capital_value = int(rng.integers(spec.capital_min, spec.capital_max + 1))
    capital_text = _format_capital(capital_value)
    register_no = f"HRB-{int(rng.integers(1000, 100000))}"
    header_words = [str(w) for w in rng.choice(HEADER_WORDS, size=3, replace=False)]

    base = n_company + 4  # company words + legal form + city + number + currency
    p_min = max(1, math.ceil((spec.entity_tokens_min - base) / 2))
    p_max = (spec.entity_tokens_max - base) // 2
    if p_max < p_min:
        raise GenerationError("entity token budget leaves no room for person entries")
    def roster_size(target):
        return int(np.clip(round((target - base) / 2), p_min, p_max))

    def role_split(n):
        counts = [0, 0, 0, 0]
        for r in rng.integers(0, 4, size=n):
            counts[int(r)] += 1
        while max(counts) > _MAX_ROLE_ENTRIES:
            counts[int(np.argmax(counts))] -= 1
            counts[int(np.argmin(counts))] += 1
        return counts

    # Archetype first, then one size draw per band from a single law, so
    # neither a roster's size nor its band ever determines its status.
    hist = spec.historical_fraction
    if hist > 0.0:
        archetype = str(rng.choice(_ARCHETYPES, p=_ARCHETYPE_P))
    else:
        archetype = "dual_current"
    if archetype == "mixed":
        band_hist = (True, False) if rng.random() < _HIST_UPPER_P else (False, True)
    else:
        band_hist = (archetype == "dual_hist", archetype == "dual_hist")

    n_upper = roster_size(target_entities)
    n_lower = roster_size(int(rng.integers(spec.entity_tokens_min, spec.entity_tokens_max + 1)))
    band_counts = (role_split(n_upper), role_split(n_lower))
    hist_capital = bool(rng.random() < hist)
    hist_city = bool(rng.random() < hist)
    old_currency = str(rng.choice(CURRENCIES, p=[0.2, 0.8])) if hist_capital else None
    old_capital_text = None
    if hist_capital:
        while True:
            old_capital_text = _format_capital(int(rng.integers(spec.capital_min, spec.capital_max + 1)))
            if old_capital_text != capital_text:
                break
    old_city = None
    if hist_city:
        while True:
            old_city = str(rng.choice(CITY_NAMES))
            if old_city != city:
                break

    total_names = n_upper + n_lower
    firsts = [str(w) for w in rng.choice(FIRST_NAMES, size=total_names, replace=False)]
    lasts = [str(w) for w in rng.choice(LAST_NAMES, size=total_names, replace=False)]
    names = list(zip(firsts, lasts))
    band_names = (names[:n_upper], names[n_upper:])

    # --- lay out rows -----------------------------------------------------

    def block_rows(counts, names_pool, y0):
        """Assign each role's entries to a random subset of block rows."""
        n_rows = max(counts) if counts and max(counts) > 0 else 0
        rows = [
            _RowPlan(jitter(y0 + _ROW_PITCH * (k + 1)), numbered=True, historical=False)
            for k in range(n_rows)
        ]
        pool = list(names_pool)
        for col, count in enumerate(counts):
            if count == 0:
                continue
            chosen = sorted(int(i) for i in rng.choice(n_rows, size=count, replace=False))
            for row_idx in chosen:
                first, last = pool.pop(0)
                x = _PERSON_COL_X[col]
                rows[row_idx].add(x, first, PERSON_ROLES[col])
                rows[row_idx].add(x + _word_width(first) + _WORD_GAP, last, PERSON_ROLES[col])
        return rows

    band_rows = tuple(
        block_rows(counts, names_pool, y0)
        for counts, names_pool, y0 in zip(band_counts, band_names, _BLOCK_Y0)
    )
    for rows, is_hist in zip(band_rows, band_hist):
        if is_hist:
            for row in rows:
                row.historical = True
        if len(rows) > _BLOCK_MAX_ENTRY_ROWS:
            raise GenerationError("person block overflows its band")

    # Historical fact values live directly below the facts table, in the
    # same columns as their current counterparts.
    band0_ys = list(_BAND0_FILLER_Y)
    hist_fact_rows = []
    if hist_city:
        row = _RowPlan(jitter(band0_ys.pop(0)), numbered=True, historical=True)
        row.add(_FACTS_COL_X[1], old_city)
        hist_fact_rows.append(row)
    if hist_capital:
        row = _RowPlan(jitter(band0_ys.pop(0)), numbered=True, historical=True)
        row.add(_FACTS_COL_X[2], old_capital_text)
        row.add(_FACTS_COL_X[2] + _word_width(old_capital_text) + _WORD_GAP, old_currency)
        hist_fact_rows.append(row)

    facts_rows = []
    row = _RowPlan(jitter(_FACTS_ROW_Y[0]), numbered=True, historical=False)
    x = _FACTS_COL_X[0]
    for w in company_words:
        row.add(x, w, LabelClass.COMPANY_NAME)
        x += _word_width(w) + _WORD_GAP
    row.add(_FACTS_COL_X[1], city, LabelClass.HEADQUARTERS)
    row.add(_FACTS_COL_X[2], capital_text, LabelClass.CAPITAL_NUMBER)
    row.add(
        _FACTS_COL_X[2] + _word_width(capital_text) + _WORD_GAP, "EUR", LabelClass.CAPITAL_CURRENCY
    )
    facts_rows.append(row)
    row = _RowPlan(jitter(_FACTS_ROW_Y[1]), numbered=True, historical=False)
    row.add(_FACTS_COL_X[0], legal_form, LabelClass.LEGAL_FORM)
    facts_rows.append(row)

    # row numbers follow top-to-bottom page order
    numbered = sorted(
        facts_rows + hist_fact_rows + list(band_rows[0]) + list(band_rows[1]),
        key=lambda r: r.y,
    )
    numbers = {id(r): i + 1 for i, r in enumerate(numbered)}

    # --- emit tokens in document-source order ----------------------------
    tokens: list[Token] = []
    header_row = _RowPlan(jitter(_HEADER_Y), numbered=False, historical=False)
    x = _FILLER_X0
    for w in header_words + [register_no]:
        header_row.add(x, w)
        x += _word_width(w) + _WORD_GAP
    _emit_row(tokens, header_row, None)

    facts_header = _RowPlan(jitter(_FACTS_HEADER_Y), numbered=False, historical=False)
    for x, w in zip(_FACTS_COL_X, FACT_HEADERS):
        facts_header.add(x, w)
    _emit_row(tokens, facts_header, None)
    for row in facts_rows:
        _emit_row(tokens, row, numbers[id(row)])
    for row in hist_fact_rows:
        _emit_row(tokens, row, numbers[id(row)])

    bands = tuple(zip(_BLOCK_Y0, band_rows))
    for y0, rows in bands:
        if not rows:
            continue
        head = _RowPlan(jitter(y0), numbered=False, historical=False)
        for x, w in zip(_PERSON_COL_X, PERSON_HEADERS):
            head.add(x, w)
        _emit_row(tokens, head, None)
        for row in rows:
            _emit_row(tokens, row, numbers[id(row)])

    # --- filler to reach the target token count --------------------------
    # Empty row slots are filled strictly top to bottom so that, when the
    # budget runs out, the cutoff position says nothing about the bands.
    budget = _TARGET_TOTAL_TOKENS - len(tokens)
    filler_ys = list(band0_ys)
    for y0, rows in bands:
        first_free = y0 + _ROW_PITCH * (len(rows) + 1 if rows else 0)
        y = first_free
        while y <= y0 + _ROW_PITCH * _BLOCK_MAX_ENTRY_ROWS:
            filler_ys.append(y)
            y += _ROW_PITCH
    filler_ys.extend(_BAND3_FILLER_Y)
    for y in filler_ys:
        if budget <= 0:
            break
        row = _RowPlan(jitter(y), numbered=False, historical=False)
        x = _FILLER_X0
        while budget > 0:
            w = str(filler_vocab[int(rng.integers(0, len(filler_vocab)))])
            if x + _word_width(w) > _FILLER_X1:
                break
            row.add(x, w)
            x += _word_width(w) + _WORD_GAP
            budget -= 1
        _emit_row(tokens, row, None)

    # --- metadata ---------------------------------------------------------
    metadata: dict[LabelClass, tuple[str, ...]] = {
        LabelClass.COMPANY_NAME: (" ".join(company_words),),
        LabelClass.LEGAL_FORM: (legal_form,),
        LabelClass.HEADQUARTERS: (city,),
        LabelClass.CAPITAL_NUMBER: (capital_text,),
        LabelClass.CAPITAL_CURRENCY: ("EUR",),
    }
    role_values: dict[LabelClass, list[str]] = {}
    for counts, names_pool, is_hist in zip(band_counts, band_names, band_hist):
        if is_hist:
            continue  # historical names carry no labels, so none are planted
        idx = 0
        for col, count in enumerate(counts):
            if count:
                role_values.setdefault(PERSON_ROLES[col], []).extend(
                    f"{f} {l}" for f, l in names_pool[idx : idx + count]
                )
                idx += count
    for role, values in role_values.items():
        metadata[role] = tuple(values)

    page = Page(
        page_id=page_id if page_id is not None else f"page-{seed}",
        width_px=spec.page_width,
        height_px=spec.page_height,
        tokens=tuple(tokens),
        entity_metadata=metadata,
    )
    expected_entity = base + 2 * sum(
        n for n, is_hist in zip((n_upper, n_lower), band_hist) if not is_hist
    )
    n_entity = page.entity_token_count
    if n_entity != expected_entity or n_entity < 3:
        raise GenerationError(
            f"generated page has {n_entity} entity tokens, expected {expected_entity}"
        )
    return page


def generate_corpus(n_pages: int, seed: int, spec: GeneratorSpec | None = None) -> Corpus:
    """Generate `n_pages` pages with per-page seeds derived from (seed, index)."""
    if n_pages < 1:
        raise GenerationError("n_pages must be >= 1")
    spec = spec if spec is not None else GeneratorSpec()
    spec.validate()
    pages = []
    rasters = {}
    for i in range(n_pages):
        page_seed = int(np.random.SeedSequence(entropy=seed, spawn_key=(i,)).generate_state(1, np.uint64)[0])
        page = generate_page(page_seed, spec, page_id=f"page-{i:05d}")
        pages.append(page)
        rasters[page.page_id] = rasterize(page, spec.raster_size, spec.raster_size)
    return Corpus(pages, rasters, spec)


# ---------------------------------------------------------------------------
# rasterization
# ---------------------------------------------------------------------------

_INK = {"black": (0, 0, 0), "red": (255, 0, 0)}


def rasterize(page: Page, target_w: int, target_h: int) -> PageRaster:
    """Render the page as ink rectangles on white at the target resolution.

    Underlines are a 1-px stroke on the first raster row below the scaled
    box, extended one pixel past each horizontal edge; underlined tokens that
    share one text row merge into a single continuous stroke spanning the
    row, the way superseded register entries are struck through in one rule.
    """
    if target_w < 16 or target_h < 16:
        raise ValueError("raster dimensions must be >= 16")
    pixels = np.full((target_h, target_w, 3), 255, dtype=np.uint8)
    sx = target_w / page.width_px
    sy = target_h / page.height_px
    strokes: dict[tuple[int, int, int, str], list[int]] = {}
    for t in page.tokens:
        x0, y0, x1, y1 = t.box
        cx0 = max(0, min(target_w - 1, math.floor(x0 * sx)))
        cx1 = max(cx0 + 1, min(target_w, math.ceil(x1 * sx)))
        cy0 = max(0, min(target_h - 1, math.floor(y0 * sy)))
        cy1 = max(cy0 + 1, min(target_h, math.ceil(y1 * sy)))
        pixels[cy0:cy1, cx0:cx1] = _INK[t.color]
        if t.underlined and cy1 < target_h:
            spans = strokes.setdefault((y0, y1, cy1, t.color), [])
            spans.extend((cx0, cx1))
    for (_, _, cy1, color), spans in strokes.items():
        ux0 = max(0, min(spans) - 1)
        ux1 = min(target_w, max(spans) + 1)
        pixels[cy1 : cy1 + 1, ux0:ux1] = _INK[color]
    return PageRaster(target_w, target_h, pixels)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

SCHEMA_VERSION = "register-corpus/1"


def _page_to_json(page: Page) -> str:
    rec = {
        "page_id": page.page_id,
        "width_px": page.width_px,
        "height_px": page.height_px,
        "tokens": [
            {
                "text": t.text,
                "box": list(t.box),
                "color": t.color,
                "underlined": t.underlined,
                "gold_label": t.gold_label.value,
                "historical": t.historical,
            }
            for t in page.tokens
        ],
        "entity_metadata": {k.value: list(v) for k, v in page.entity_metadata.items()},
    }
    return json.dumps(rec, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def _page_from_json(rec: dict) -> Page:
    tokens = tuple(
        Token(
            text=t["text"],
            box=tuple(t["box"]),
            color=t["color"],
            underlined=bool(t["underlined"]),
            gold_label=LabelClass(t["gold_label"]),
            historical=bool(t["historical"]),
        )
        for t in rec["tokens"]
    )
    metadata = {LabelClass(k): tuple(v) for k, v in rec["entity_metadata"].items()}
    return Page(
        page_id=rec["page_id"],
        width_px=rec["width_px"],
        height_px=rec["height_px"],
        tokens=tokens,
        entity_metadata=metadata,
    )


def corpus_hash(pages) -> str:
    """Hex digest over the canonical JSON serialization of all pages."""
    h = hashlib.sha256()
    for page in pages:
        h.update(_page_to_json(page).encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()


def save_corpus(corpus: Corpus, out_dir) -> Path:
    """Write `<out_dir>/corpus.jsonl` plus PNG rasters under `<out_dir>/pages/`."""
    out_dir = Path(out_dir)
    pages_dir = out_dir / "pages"
    pages_dir.mkdir(parents=True, exist_ok=True)
    header = {
        "schema": SCHEMA_VERSION,
        "n_pages": len(corpus.pages),
        "corpus_hash": corpus_hash(corpus.pages),
        "generator_spec": asdict(corpus.spec),
    }
    path = out_dir / "corpus.jsonl"
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n")
        for page in corpus.pages:
            f.write(_page_to_json(page) + "\n")
    for page_id, raster in corpus.rasters.items():
        Image.fromarray(raster.pixels, "RGB").save(pages_dir / f"{page_id}.png")
    return path


def load_corpus(in_dir) -> Corpus:
    """Read a corpus directory; verifies schema version, page count, and hash."""
    in_dir = Path(in_dir)
    path = in_dir / "corpus.jsonl"
    if not path.exists():
        raise CorpusFormatError(f"no corpus.jsonl under {in_dir}")
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines:
        raise CorpusFormatError(f"{path}: empty file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise CorpusFormatError(f"{path}:1: malformed header: {e}") from e
    if header.get("schema") != SCHEMA_VERSION:
        raise CorpusFormatError(
            f"{path}: schema version {header.get('schema')!r} "
            f"(this reader supports {SCHEMA_VERSION!r})"
        )
    n_pages = header.get("n_pages")
    if len(lines) - 1 != n_pages:
        raise CorpusFormatError(
            f"{path}: header declares {n_pages} pages but file has {len(lines) - 1} records "
            "(truncated or corrupt)"
        )
    pages = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            pages.append(_page_from_json(json.loads(line)))
        except (json.JSONDecodeError, KeyError, ValueError) as e:
            raise CorpusFormatError(f"{path}:{lineno}: malformed page record: {e}") from e
    recomputed = corpus_hash(pages)
    if recomputed != header.get("corpus_hash"):
        raise CorpusFormatError(
            f"{path}: corpus hash mismatch (header {header.get('corpus_hash')}, "
            f"recomputed {recomputed})"
        )
    spec = GeneratorSpec(**header["generator_spec"])
    rasters = {}
    for page in pages:
        png = in_dir / "pages" / f"{page.page_id}.png"
        if not png.exists():
            raise CorpusFormatError(f"missing page raster {png}")
        arr = np.asarray(Image.open(png).convert("RGB"))
        rasters[page.page_id] = PageRaster(arr.shape[1], arr.shape[0], arr)
    return Corpus(pages, rasters, spec)
