"""
Product catalog and labeled dataset construction.

Builds train/validation/test pairs from click-log triples or from the public
Product Search Relevance (PSR) CSV files, applying the query, product and
labeling rules of the dataset pipeline.
"""

import json
import logging
import math
import random
import re
from collections import defaultdict
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple, Union

import pandas as pd

from fielded_search.models import (
    FIELD_ORDER,
    ClickTriple,
    DatasetStats,
    FieldedDocument,
    FieldName,
    InputError,
    LabeledPair,
    QueryClass,
    group_by_query,
    normalize_classes,
)

logger = logging.getLogger(__name__)

Catalog = Dict[str, FieldedDocument]

_NUMERIC_ONLY_RE = re.compile(r"^[\d\s]*$")


class RecordError(InputError):
    """A malformed input record; carries the 1-based line number."""

    def __init__(self, line_number: int, message: str) -> None:
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


# --- click logs -----------------------------------------------------------


def parse_click_triples(
    lines: Iterable[str],
    errors: Optional[List[RecordError]] = None,
) -> List[ClickTriple]:
    """
    Parse tab-separated `query, doc_id, clicks` records.

    Args:
        lines: Input lines (trailing newlines allowed)
        errors: If given, malformed records are appended here and skipped;
            otherwise the first malformed record raises

    Returns:
        One triple per valid line, in input order

    Raises:
        RecordError: On a malformed record when `errors` is None
    """
    triples = []
    for line_number, line in enumerate(lines, start=1):
        line = line.rstrip("\r\n")
        if not line.strip():
            continue
        try:
            triples.append(_parse_click_line(line, line_number))
        except RecordError as e:
            if errors is None:
                raise
            errors.append(e)
    return triples


def _parse_click_line(line: str, line_number: int) -> ClickTriple:
    columns = line.split("\t")
    if len(columns) != 3:
        raise RecordError(line_number, f"expected 3 tab-separated columns, got {len(columns)}")
    query, doc_id, raw_clicks = columns
    try:
        clicks = int(raw_clicks.strip())
    except ValueError:
        raise RecordError(line_number, f"clicks is not an integer: {raw_clicks!r}") from None
    if clicks < 0:
        raise RecordError(line_number, f"negative clicks: {clicks}")
    if not doc_id.strip():
        raise RecordError(line_number, "empty doc_id")
    return ClickTriple(query=query, doc_id=doc_id.strip(), clicks=clicks)


def binarize_clicks(clicks: int, r: int) -> int:
    """Relevant iff clicks >= r (inclusive threshold)."""
    return 1 if clicks >= r else 0


def label_triples(triples: Sequence[ClickTriple], r: int) -> List[LabeledPair]:
    """Attach binary labels to click triples."""
    if r < 1:
        raise InputError(f"click threshold must be >= 1, got {r}")
    return [
        LabeledPair(t.query, t.doc_id, binarize_clicks(t.clicks, r), float(t.clicks))
        for t in triples
    ]


def is_numeric_only(query: str) -> bool:
    return bool(_NUMERIC_ONLY_RE.match(query))


def filter_queries(
    groups: Mapping[str, Sequence[LabeledPair]],
    min_chars: int = 3,
) -> Dict[str, List[LabeledPair]]:
    """
    Keep queries with a relevant pair, at least `min_chars` characters and at
    least one non-numeric character.
    """
    retained = {}
    for query, pairs in groups.items():
        if not any(p.label == 1 for p in pairs):
            continue
        if len(query.strip()) < min_chars:
            continue
        if is_numeric_only(query):
            continue
        retained[query] = list(pairs)
    logger.debug(f"Query filter kept {len(retained)} of {len(groups)} queries")
    return retained


# --- products -------------------------------------------------------------


def is_valid_document(doc: FieldedDocument, min_fields: int = 2) -> bool:
    """Title and Description present and at least `min_fields` non-empty fields."""
    present = doc.non_empty_fields()
    return (
        FieldName.TITLE in present
        and FieldName.DESCRIPTION in present
        and len(present) >= min_fields
    )


def filter_documents(
    pairs: Sequence[LabeledPair],
    catalog: Mapping[str, FieldedDocument],
    min_fields: int = 2,
) -> List[LabeledPair]:
    """Drop pairs whose product is missing from the catalog or invalid."""
    valid = {doc_id for doc_id, doc in catalog.items() if is_valid_document(doc, min_fields)}
    kept = [p for p in pairs if p.doc_id in valid]
    dropped = len(pairs) - len(kept)
    if dropped:
        logger.info(f"Product filter dropped {dropped} pairs ({len(catalog) - len(valid)} invalid products)")
    return kept


def assemble_field_text(doc: FieldedDocument, name: FieldName) -> str:
    """Join a field's instances with single spaces."""
    return " ".join(doc.instances(name))


def flatten_document(doc: FieldedDocument) -> str:
    """All non-empty field texts in canonical field order, space-separated."""
    parts = [assemble_field_text(doc, name) for name in FIELD_ORDER]
    return " ".join(p for p in parts if p)


# --- search terms ---------------------------------------------------------


def search_terms_index(
    triples: Iterable[Tuple[str, str, float]],
    top_k: int = 10,
) -> Dict[str, List[str]]:
    """
    Top clicked queries per product.

    Args:
        triples: (query, doc_id, clicks) drawn from the training split only
        top_k: Maximum number of queries kept per product

    Returns:
        doc_id -> up to top_k unique queries by descending total clicks,
        ties broken lexicographically
    """
    totals: Dict[str, Dict[str, float]] = defaultdict(lambda: defaultdict(float))
    for query, doc_id, clicks in triples:
        if clicks >= 1:
            totals[doc_id][query] += clicks
    return {
        doc_id: [q for q, _ in sorted(per_query.items(), key=lambda kv: (-kv[1], kv[0]))[:top_k]]
        for doc_id, per_query in totals.items()
    }


def build_search_terms_field(
    triples: Iterable[Tuple[str, str, float]],
    doc_id: str,
    top_k: int = 10,
) -> List[str]:
    """SearchTerms instances for a single product."""
    return search_terms_index(
        ((q, d, c) for q, d, c in triples if d == doc_id), top_k
    ).get(doc_id, [])


def attach_search_terms(
    catalog: Mapping[str, FieldedDocument],
    signal: Iterable[Tuple[str, str, float]],
    top_k: int = 10,
) -> Catalog:
    """Rebuild the SearchTerms field of every product from training data."""
    index = search_terms_index(signal, top_k)
    return {
        doc_id: doc.with_field(FieldName.SEARCH_TERMS, index.get(doc_id, []))
        for doc_id, doc in catalog.items()
    }


def training_signal(pairs: Sequence[LabeledPair], from_clicks: bool) -> List[Tuple[str, str, float]]:
    """
    Click evidence for SearchTerms from labeled training pairs.

    Click-log pairs contribute their click counts; graded (PSR) pairs contribute
    one unit when labeled relevant.
    """
    if from_clicks:
        return [(p.query, p.doc_id, p.raw_signal or 0.0) for p in pairs]
    return [(p.query, p.doc_id, float(p.label)) for p in pairs]


# --- splits ---------------------------------------------------------------


def _split_count(size: Union[int, float], total: int) -> int:
    if size >= 1:
        return min(int(size), total)
    return int(round(size * total))


def split_by_query(
    pairs: Sequence[LabeledPair],
    validation_size: Union[int, float],
    test_size: Union[int, float],
    seed: int,
) -> Tuple[List[LabeledPair], List[LabeledPair], List[LabeledPair]]:
    """
    Reserve unique queries for validation and test.

    Sizes >= 1 are absolute query counts, smaller values are fractions of the
    unique queries. No query appears in more than one split.
    """
    queries = sorted({p.query for p in pairs})
    random.Random(seed).shuffle(queries)
    n_val = _split_count(validation_size, len(queries))
    n_test = _split_count(test_size, len(queries) - n_val)
    val_q = set(queries[:n_val])
    test_q = set(queries[n_val:n_val + n_test])
    train = [p for p in pairs if p.query not in val_q and p.query not in test_q]
    validation = [p for p in pairs if p.query in val_q]
    test = [p for p in pairs if p.query in test_q]
    return train, validation, test


def dataset_stats(split: str, pairs: Sequence[LabeledPair]) -> DatasetStats:
    relevant = sum(p.label for p in pairs)
    return DatasetStats(
        split=split,
        entries=len(pairs),
        unique_queries=len({p.query for p in pairs}),
        unique_products=len({p.doc_id for p in pairs}),
        relevant_fraction=relevant / len(pairs) if pairs else 0.0,
    )


# --- PSR ------------------------------------------------------------------


def binarize_psr(graded: float, threshold: float = 2.5) -> int:
    """
    Round a graded PSR score half-up to {1, 2, 3} and threshold it.

    Raises:
        InputError: If the score lies outside [1, 3]
    """
    if not 1.0 <= graded <= 3.0:
        raise InputError(f"graded relevance must lie in [1, 3], got {graded}")
    rounded = math.floor(graded + 0.5)
    return 1 if rounded >= threshold else 0


_UNIT_MARKERS = ("(in.)", "(ft.)", "(lb.)", "(sq. ft.)", "(gal.)", "(w)", "(v)", "(mm)", "(cm)")
_NUMERIC_PREFIXES = ("width", "height", "depth", "length", "weight", "size", "diameter", "thickness")
_CATEGORY_PREFIXES = ("product type", "category")


def attribute_field(name: str) -> FieldName:
    """Map a PSR attribute name to a product field."""
    key = name.strip().lower()
    if key.startswith("mfg brand name") or key == "brand":
        return FieldName.BRAND
    if any(marker in key for marker in _UNIT_MARKERS) or key.startswith(_NUMERIC_PREFIXES):
        return FieldName.NUMERIC
    if key.startswith(_CATEGORY_PREFIXES):
        return FieldName.PRODUCT_CATEGORY
    return FieldName.METADATA


def load_psr(
    directory: Path,
    threshold: float = 2.5,
) -> Tuple[Catalog, List[LabeledPair]]:
    """
    Load the PSR files and build a catalog plus labeled pairs.

    Args:
        directory: Folder holding train.csv, product_descriptions.csv and
            optionally attributes.csv
        threshold: Binarization threshold on the rounded grade

    Returns:
        (catalog, pairs) with raw_signal holding the averaged grade
    """
    train_path = directory / "train.csv"
    desc_path = directory / "product_descriptions.csv"
    attr_path = directory / "attributes.csv"
    for path in (train_path, desc_path):
        if not path.exists():
            raise FileNotFoundError(f"PSR file not found: {path}")

    train = pd.read_csv(train_path, encoding="ISO-8859-1", dtype={"product_uid": str})
    missing = {"product_uid", "search_term", "relevance"} - set(train.columns)
    if missing:
        raise InputError(f"{train_path} lacks columns {sorted(missing)}")
    descriptions = pd.read_csv(desc_path, encoding="ISO-8859-1", dtype={"product_uid": str})

    fields: Dict[str, Dict[FieldName, List[str]]] = defaultdict(lambda: defaultdict(list))
    if "product_title" in train.columns:
        titles = train.drop_duplicates("product_uid")[["product_uid", "product_title"]]
        for uid, title in titles.itertuples(index=False):
            if isinstance(title, str) and title.strip():
                fields[uid][FieldName.TITLE] = [title.strip()]
    for uid, text in descriptions[["product_uid", "product_description"]].itertuples(index=False):
        if isinstance(text, str) and text.strip():
            fields[uid][FieldName.DESCRIPTION].append(text.strip())

    if attr_path.exists():
        attributes = pd.read_csv(attr_path, encoding="ISO-8859-1", dtype={"product_uid": str})
        attributes = attributes.dropna(subset=["product_uid", "name", "value"])
        for uid, name, value in attributes[["product_uid", "name", "value"]].itertuples(index=False):
            if str(value).strip():
                fields[_normalize_uid(uid)][attribute_field(str(name))].append(str(value).strip())
    else:
        logger.warning(f"{attr_path} not found; Metadata, Brand and Numeric stay empty")

    catalog = {
        uid: FieldedDocument(doc_id=uid, fields={k: tuple(v) for k, v in per_field.items()})
        for uid, per_field in fields.items()
    }

    pairs = []
    for uid, query, relevance in train[["product_uid", "search_term", "relevance"]].itertuples(index=False):
        graded = float(relevance)
        pairs.append(LabeledPair(str(query), str(uid), binarize_psr(graded, threshold), graded))
    logger.info(f"Loaded {len(pairs)} PSR pairs over {len(catalog)} products")
    return catalog, pairs


def _normalize_uid(uid: str) -> str:
    # attributes.csv stores uids as floats ("100001.0")
    return uid[:-2] if uid.endswith(".0") else uid


# --- file formats ---------------------------------------------------------


def read_catalog(path: Path) -> Catalog:
    """Read a JSON-lines catalog (one document per line)."""
    if not path.exists():
        raise FileNotFoundError(f"Catalog not found: {path}")
    catalog: Catalog = {}
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                doc = FieldedDocument.from_dict(json.loads(line))
            except json.JSONDecodeError as e:
                raise RecordError(line_number, f"invalid JSON: {e.msg}") from None
            except InputError as e:
                raise RecordError(line_number, str(e)) from None
            catalog[doc.doc_id] = doc
    return catalog


def write_catalog(catalog: Mapping[str, FieldedDocument], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for doc_id in sorted(catalog):
            f.write(json.dumps(catalog[doc_id].to_dict(), ensure_ascii=False, sort_keys=True) + "\n")


def read_pairs(path: Path) -> List[LabeledPair]:
    """Read `query, doc_id, label[, raw_signal]` TSV lines."""
    if not path.exists():
        raise FileNotFoundError(f"Pairs file not found: {path}")
    pairs = []
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            columns = line.split("\t")
            if len(columns) not in (3, 4):
                raise RecordError(line_number, f"expected 3 or 4 columns, got {len(columns)}")
            try:
                label = int(columns[2])
                raw = float(columns[3]) if len(columns) == 4 and columns[3] != "" else None
                pairs.append(LabeledPair(columns[0], columns[1], label, raw))
            except (ValueError, InputError) as e:
                raise RecordError(line_number, str(e)) from None
    return pairs


def write_pairs(pairs: Sequence[LabeledPair], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for p in pairs:
            raw = "" if p.raw_signal is None else f"{p.raw_signal:g}"
            f.write(f"{p.query}\t{p.doc_id}\t{p.label}\t{raw}\n")


def read_query_classes(path: Path) -> Dict[str, Set[QueryClass]]:
    """Read `query \\t class[,class...]` lines."""
    if not path.exists():
        raise FileNotFoundError(f"Query class file not found: {path}")
    classes: Dict[str, Set[QueryClass]] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            if "\t" not in line:
                raise RecordError(line_number, "expected query<TAB>classes")
            query, names = line.split("\t", 1)
            try:
                parsed = [QueryClass.parse(n) for n in names.split(",") if n.strip()]
            except InputError as e:
                raise RecordError(line_number, str(e)) from None
            classes[query] = set(normalize_classes(parsed))
    return classes


def build_click_dataset(
    triples: Sequence[ClickTriple],
    catalog: Mapping[str, FieldedDocument],
    click_threshold: int = 5,
    min_query_chars: int = 3,
    min_fields: int = 2,
) -> List[LabeledPair]:
    """Label click triples and apply the product and query filters, in that order."""
    pairs = filter_documents(label_triples(triples, click_threshold), catalog, min_fields)
    retained = filter_queries(group_by_query(pairs), min_query_chars)
    return [p for p in pairs if p.query in retained]
