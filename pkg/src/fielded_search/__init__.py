"""
fielded-search - Fielded semantic product search with lexical baselines.
"""

__version__ = "0.1.0"

from fielded_search.models import (
    FieldedDocument,
    FieldName,
    InputError,
    LabeledPair,
    QueryClass,
)
from fielded_search.smm import FieldedMatcher, FlatMatcher

__all__ = [
    "FieldedDocument",
    "FieldName",
    "InputError",
    "LabeledPair",
    "QueryClass",
    "FieldedMatcher",
    "FlatMatcher",
]
