"""The closed 10-class token label schema."""

from __future__ import annotations

from enum import Enum

__all__ = ["LabelClass", "LABEL_ORDER", "ENTITY_LABELS", "N_CLASSES", "label_index"]


class LabelClass(str, Enum):
    """One label per word token; ``OTHER`` covers everything non-entity."""

    COMPANY_NAME = "company_name"
    LEGAL_FORM = "legal_form"
    HEADQUARTERS = "headquarters"
    CAPITAL_NUMBER = "capital_number"
    CAPITAL_CURRENCY = "capital_currency"
    DIRECTOR = "director"
    AUTHORIZED_OFFICER = "authorized_officer"
    LIMITED_PARTNER = "limited_partner"
    SHAREHOLDER = "shareholder"
    OTHER = "other"


LABEL_ORDER: tuple[LabelClass, ...] = tuple(LabelClass)
ENTITY_LABELS: tuple[LabelClass, ...] = tuple(c for c in LabelClass if c is not LabelClass.OTHER)
N_CLASSES = len(LABEL_ORDER)

_INDEX = {c: i for i, c in enumerate(LABEL_ORDER)}


def label_index(label: LabelClass) -> int:
    """Stable integer id of a label (enumeration order; ``other`` is last)."""
    return _INDEX[label]
