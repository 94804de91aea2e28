"""
Data models for fielded product search.
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, FrozenSet, List, Mapping, Optional, Sequence, Tuple


class InputError(ValueError):
    """Raised for malformed user input (files, records, arguments)."""


class FieldName(Enum):
    """The seven product fields, in canonical order."""

    TITLE = "Title"
    DESCRIPTION = "Description"
    PRODUCT_CATEGORY = "ProductCategory"
    METADATA = "Metadata"
    BRAND = "Brand"
    NUMERIC = "Numeric"
    SEARCH_TERMS = "SearchTerms"

    @classmethod
    def parse(cls, name: str) -> "FieldName":
        """
        Look up a field by its serialized name.

        Raises:
            InputError: If the name is not one of the seven fields
        """
        for member in cls:
            if member.value == name:
                return member
        raise InputError(f"Unknown field '{name}'. Expected one of: {[f.value for f in cls]}")


FIELD_ORDER: Tuple[FieldName, ...] = tuple(FieldName)
NUM_FIELDS = len(FIELD_ORDER)


class QueryClass(Enum):
    """Manual query annotation classes used for error analysis."""

    BRAND_COLLECTION = "BrandCollection"
    COLOR_FINISH = "ColorFinish"
    UNIT = "Unit"
    MATERIAL = "Material"
    MODEL = "Model"
    TYPO = "Typo"
    ALL_OTHERS = "AllOthers"

    @classmethod
    def parse(cls, name: str) -> "QueryClass":
        """Parse a class name; slashes, spaces and case are ignored."""
        key = name.replace("/", "").replace(" ", "").replace("-", "").lower()
        for member in cls:
            if member.value.lower() == key:
                return member
        raise InputError(f"Unknown query class '{name}'")


def normalize_classes(classes: Sequence[QueryClass]) -> FrozenSet[QueryClass]:
    """AllOthers is kept only when no other class applies."""
    specific = frozenset(c for c in classes if c is not QueryClass.ALL_OTHERS)
    return specific if specific else frozenset({QueryClass.ALL_OTHERS})


@dataclass(frozen=True)
class FieldedDocument:
    """A product represented as seven fields, each a list of instance strings."""

    doc_id: str
    fields: Mapping[FieldName, Tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        complete = {name: tuple(self.fields.get(name, ())) for name in FIELD_ORDER}
        if len(complete[FieldName.TITLE]) > 1:
            raise InputError(f"Document '{self.doc_id}' has more than one Title instance")
        object.__setattr__(self, "fields", complete)

    @classmethod
    def build(cls, doc_id: str, **instances: Sequence[str]) -> "FieldedDocument":
        """
        Build a document from keyword arguments keyed by field value names.

        Example:
            FieldedDocument.build("P1", Title=["Oak Door"], Brand=["Acme"])
        """
        fields = {FieldName.parse(name): tuple(values) for name, values in instances.items()}
        return cls(doc_id=doc_id, fields=fields)

    def instances(self, name: FieldName) -> Tuple[str, ...]:
        """Instances stored in a field."""
        return self.fields[name]

    def non_empty_fields(self) -> List[FieldName]:
        """Fields holding at least one non-blank instance."""
        return [name for name in FIELD_ORDER if any(s.strip() for s in self.fields[name])]

    def with_field(self, name: FieldName, values: Sequence[str]) -> "FieldedDocument":
        """Return a copy with one field replaced."""
        fields = dict(self.fields)
        fields[name] = tuple(values)
        return FieldedDocument(doc_id=self.doc_id, fields=fields)

    def to_dict(self) -> Dict:
        """Convert to dictionary for JSON serialization."""
        return {
            "doc_id": self.doc_id,
            "fields": {name.value: list(self.fields[name]) for name in FIELD_ORDER},
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "FieldedDocument":
        """Inverse of to_dict."""
        if "doc_id" not in data:
            raise InputError("Catalog record is missing 'doc_id'")
        raw_fields = data.get("fields", {})
        fields = {}
        for name, values in raw_fields.items():
            if not isinstance(values, list):
                raise InputError(f"Field '{name}' of '{data['doc_id']}' must be a list")
            fields[FieldName.parse(name)] = tuple(str(v) for v in values)
        return cls(doc_id=str(data["doc_id"]), fields=fields)


@dataclass(frozen=True)
class ClickTriple:
    """One (query, product, clicks) entry from the click logs."""

    query: str
    doc_id: str
    clicks: int


@dataclass(frozen=True)
class LabeledPair:
    """A query-document pair with a binary relevance label."""

    query: str
    doc_id: str
    label: int
    raw_signal: Optional[float] = None

    def __post_init__(self) -> None:
        if self.label not in (0, 1):
            raise InputError(f"Label must be 0 or 1, got {self.label}")


@dataclass
class DatasetStats:
    """Statistics of one dataset split."""

    split: str
    entries: int
    unique_queries: int
    unique_products: int
    relevant_fraction: float

    @property
    def not_relevant_fraction(self) -> float:
        return 1.0 - self.relevant_fraction if self.entries else 0.0

    def to_dict(self) -> Dict:
        """Convert to dictionary for JSON serialization."""
        return {
            "split": self.split,
            "entries": self.entries,
            "unique_queries": self.unique_queries,
            "unique_products": self.unique_products,
            "relevant": round(self.relevant_fraction, 4),
            "not_relevant": round(self.not_relevant_fraction, 4),
        }


def group_by_query(pairs: Sequence[LabeledPair]) -> Dict[str, List[LabeledPair]]:
    """Group pairs by query, preserving first-seen query order and pair order."""
    groups: Dict[str, List[LabeledPair]] = {}
    for pair in pairs:
        groups.setdefault(pair.query, []).append(pair)
    return groups
