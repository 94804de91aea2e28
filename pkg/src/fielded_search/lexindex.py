"""
Fielded inverted index with BM25 and BM25F scoring.

Field texts are analyzed with stopword removal and Porter stemming before
indexing. Document frequency is counted over whole documents.
"""

import itertools
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Callable, Dict, Iterator, List, Mapping, Sequence, Tuple

import numpy as np

from fielded_search.catalog import assemble_field_text
from fielded_search.config import Bm25Params
from fielded_search.evaluation import ndcg_at_k
from fielded_search.models import FIELD_ORDER, NUM_FIELDS, FieldedDocument, FieldName, InputError
from fielded_search.text import analyze

logger = logging.getLogger(__name__)

INDEX_MAGIC = b"FSIX"
INDEX_VERSION = 1

K1_GRID = (0.9, 1.2, 1.5, 2.0)
B_GRID = (0.3, 0.5, 0.75)
WEIGHT_GRID = (0.0, 0.5, 1.0, 2.0, 4.0)

Posting = Tuple[int, int]  # (document index, term frequency)


class UnknownDocumentError(InputError):
    """Raised when scoring a doc_id that is not in the index."""


@dataclass
class FieldedIndex:
    """Per-field postings and length statistics over a product catalog."""

    doc_ids: List[str]
    postings: Dict[FieldName, Dict[str, List[Posting]]]
    field_lengths: np.ndarray  # (N, 7)
    doc_index: Dict[str, int] = field(init=False)
    avg_lengths: np.ndarray = field(init=False)
    df: Dict[str, int] = field(init=False)
    forward: List[Dict[str, np.ndarray]] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.doc_index = {doc_id: i for i, doc_id in enumerate(self.doc_ids)}
        self.avg_lengths = self.field_lengths.mean(axis=0) if self.doc_ids else np.zeros(NUM_FIELDS)
        docs_with_term: Dict[str, set] = {}
        self.forward = [{} for _ in self.doc_ids]
        for f, name in enumerate(FIELD_ORDER):
            for term, plist in self.postings.get(name, {}).items():
                holders = docs_with_term.setdefault(term, set())
                for doc, tf in plist:
                    holders.add(doc)
                    vec = self.forward[doc].setdefault(term, np.zeros(NUM_FIELDS))
                    vec[f] = tf
        self.df = {term: len(holders) for term, holders in docs_with_term.items()}

    @property
    def num_docs(self) -> int:
        return len(self.doc_ids)

    @property
    def avg_doc_length(self) -> float:
        return float(self.field_lengths.sum(axis=1).mean()) if self.doc_ids else 0.0

    def field_postings(self, name: FieldName, term: str) -> List[Posting]:
        return self.postings.get(name, {}).get(term, [])

    def position(self, doc_id: str) -> int:
        try:
            return self.doc_index[doc_id]
        except KeyError:
            raise UnknownDocumentError(f"Document '{doc_id}' is not in the index") from None

    def idf(self, term: str) -> float:
        """Smoothed IDF: ln((N - df + 0.5) / (df + 0.5) + 1), never negative."""
        df = self.df.get(term, 0)
        return math.log((self.num_docs - df + 0.5) / (df + 0.5) + 1.0)


def build_index(catalog: Mapping[str, FieldedDocument]) -> FieldedIndex:
    """
    Index every field of every product.

    Raises:
        InputError: If the catalog is empty
    """
    if not catalog:
        raise InputError("Cannot build an index over an empty catalog")
    doc_ids = sorted(catalog)
    postings: Dict[FieldName, Dict[str, List[Posting]]] = {name: {} for name in FIELD_ORDER}
    lengths = np.zeros((len(doc_ids), NUM_FIELDS), dtype=np.int64)
    for d, doc_id in enumerate(doc_ids):
        doc = catalog[doc_id]
        for f, name in enumerate(FIELD_ORDER):
            terms = analyze(assemble_field_text(doc, name))
            lengths[d, f] = len(terms)
            counts: Dict[str, int] = {}
            for term in terms:
                counts[term] = counts.get(term, 0) + 1
            for term, tf in counts.items():
                postings[name].setdefault(term, []).append((d, tf))
    logger.info(f"Indexed {len(doc_ids)} documents, {sum(len(p) for p in postings.values())} field terms")
    return FieldedIndex(doc_ids=doc_ids, postings=postings, field_lengths=lengths)


def bm25_score(index: FieldedIndex, query_terms: Sequence[str], doc_id: str, params: Bm25Params) -> float:
    """BM25 over the document as one bag (all fields merged)."""
    d = index.position(doc_id)
    forward = index.forward[d]
    length = float(index.field_lengths[d].sum())
    avg = index.avg_doc_length
    norm = 1.0 - params.b + params.b * (length / avg if avg > 0 else 0.0)
    score = 0.0
    for term in query_terms:
        vec = forward.get(term)
        if vec is None:
            continue
        tf = float(vec.sum())
        score += index.idf(term) * tf * (params.k1 + 1.0) / (tf + params.k1 * norm)
    return score


def bm25f_score(index: FieldedIndex, query_terms: Sequence[str], doc_id: str, params: Bm25Params) -> float:
    """BM25F: per-field weighted, length-normalized frequencies combined before saturation."""
    d = index.position(doc_id)
    forward = index.forward[d]
    score = 0.0
    for term in query_terms:
        vec = forward.get(term)
        if vec is None:
            continue
        pseudo_tf = 0.0
        for f, name in enumerate(FIELD_ORDER):
            tf = vec[f]
            avg = index.avg_lengths[f]
            if tf == 0 or avg == 0:
                continue
            b_f = params.b_for(name)
            pseudo_tf += params.weight(name) * tf / (1.0 - b_f + b_f * index.field_lengths[d, f] / avg)
        if pseudo_tf > 0:
            score += index.idf(term) * pseudo_tf * (params.k1 + 1.0) / (params.k1 + pseudo_tf)
    return score


SCORERS: Dict[str, Callable[[FieldedIndex, Sequence[str], str, Bm25Params], float]] = {
    "bm25": bm25_score,
    "bm25f": bm25f_score,
}


def get_scorer(name: str) -> Callable[[FieldedIndex, Sequence[str], str, Bm25Params], float]:
    try:
        return SCORERS[name]
    except KeyError:
        raise InputError(f"Unknown scorer '{name}'. Available: {sorted(SCORERS)}") from None


def rank_lexical(
    index: FieldedIndex,
    query: str,
    candidates: Sequence[str],
    params: Bm25Params,
    scorer: str = "bm25",
) -> List[Tuple[str, float]]:
    """Score candidates and sort by descending score, ties by ascending doc_id."""
    score_fn = get_scorer(scorer)
    terms = analyze(query)
    scored = [(doc_id, score_fn(index, terms, doc_id, params)) for doc_id in candidates]
    return sorted(scored, key=lambda item: (-item[1], item[0]))


# --- tuning ---------------------------------------------------------------


def tune_params(
    index: FieldedIndex,
    groups: Mapping[str, Sequence[Tuple[str, int]]],
    scorer: str = "bm25",
    k: int = 5,
) -> Tuple[Bm25Params, float]:
    """
    Grid-search parameters on validation data, maximizing mean NDCG@k.

    k1 and b are searched jointly; for BM25F the field weights are then tuned
    by one coordinate-ascent sweep per field over the weight grid.

    Args:
        index: Index over the catalog
        groups: query -> [(doc_id, label), ...] validation candidates
        scorer: "bm25" or "bm25f"
        k: NDCG cutoff

    Returns:
        (best parameters, best validation NDCG@k)
    """
    get_scorer(scorer)
    if not groups:
        raise InputError("Cannot tune on an empty validation set")

    def objective(params: Bm25Params) -> float:
        values = []
        for query, candidates in groups.items():
            labels = dict(candidates)
            ranked = rank_lexical(index, query, list(labels), params, scorer)
            values.append(ndcg_at_k([labels[doc_id] for doc_id, _ in ranked], k))
        return float(np.mean(values))

    best = Bm25Params()
    best_value = -1.0
    for k1, b in itertools.product(K1_GRID, B_GRID):
        candidate = Bm25Params(k1=k1, b=b, field_weights=dict(best.field_weights))
        value = objective(candidate)
        if value > best_value:
            best, best_value = candidate, value
    logger.info(f"{scorer}: k1={best.k1}, b={best.b}, NDCG@{k}={best_value:.4f}")

    if scorer == "bm25f":
        for name in FIELD_ORDER:
            for weight in WEIGHT_GRID:
                weights = dict(best.field_weights)
                weights[name] = weight
                if not any(w > 0 for w in weights.values()):
                    continue
                candidate = Bm25Params(k1=best.k1, b=best.b, field_weights=weights)
                value = objective(candidate)
                if value > best_value:
                    best, best_value = candidate, value
            logger.debug(f"  weight[{name.value}]={best.weight(name)}")
        logger.info(f"bm25f weights: { {n.value: w for n, w in best.field_weights.items()} }")
    return best, best_value


# --- persistence ----------------------------------------------------------


def _write_str(f: BinaryIO, value: str) -> None:
    data = value.encode("utf-8")
    f.write(struct.pack("<I", len(data)))
    f.write(data)


def _read_exact(f: BinaryIO, size: int) -> bytes:
    data = f.read(size)
    if len(data) != size:
        raise InputError("Index file is truncated")
    return data


def _read_str(f: BinaryIO) -> str:
    (length,) = struct.unpack("<I", _read_exact(f, 4))
    return _read_exact(f, length).decode("utf-8")


def save_index(index: FieldedIndex, path: Path) -> None:
    """Write the index as a versioned little-endian binary file."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(INDEX_MAGIC)
        f.write(struct.pack("<III", INDEX_VERSION, index.num_docs, NUM_FIELDS))
        for d, doc_id in enumerate(index.doc_ids):
            _write_str(f, doc_id)
            f.write(struct.pack(f"<{NUM_FIELDS}I", *(int(n) for n in index.field_lengths[d])))
        for name in FIELD_ORDER:
            terms = index.postings.get(name, {})
            f.write(struct.pack("<I", len(terms)))
            for term in sorted(terms):
                _write_str(f, term)
                plist = terms[term]
                f.write(struct.pack("<I", len(plist)))
                for doc, tf in plist:
                    f.write(struct.pack("<II", doc, tf))


def load_index(path: Path) -> FieldedIndex:
    """
    Read an index written by save_index.

    Raises:
        InputError: On a bad magic header, version or truncated file
    """
    if not path.exists():
        raise FileNotFoundError(f"Index file not found: {path}")
    with open(path, "rb") as f:
        if f.read(4) != INDEX_MAGIC:
            raise InputError(f"{path} is not a fielded-search index")
        version, num_docs, num_fields = struct.unpack("<III", _read_exact(f, 12))
        if version != INDEX_VERSION or num_fields != NUM_FIELDS:
            raise InputError(f"Unsupported index version {version} ({num_fields} fields)")
        doc_ids = []
        lengths = np.zeros((num_docs, NUM_FIELDS), dtype=np.int64)
        for d in range(num_docs):
            doc_ids.append(_read_str(f))
            lengths[d] = struct.unpack(f"<{NUM_FIELDS}I", _read_exact(f, 4 * NUM_FIELDS))
        postings: Dict[FieldName, Dict[str, List[Posting]]] = {}
        for name in FIELD_ORDER:
            (n_terms,) = struct.unpack("<I", _read_exact(f, 4))
            terms: Dict[str, List[Posting]] = {}
            for _ in range(n_terms):
                term = _read_str(f)
                (n_postings,) = struct.unpack("<I", _read_exact(f, 4))
                raw = _read_exact(f, 8 * n_postings)
                terms[term] = [
                    (int(doc), int(tf)) for doc, tf in struct.iter_unpack("<II", raw)
                ]
            postings[name] = terms
    return FieldedIndex(doc_ids=doc_ids, postings=postings, field_lengths=lengths)


def dump_postings(index: FieldedIndex) -> Iterator[str]:
    """Human-readable postings: `field \\t term \\t doc_id:tf ...`."""
    for name in FIELD_ORDER:
        terms = index.postings.get(name, {})
        for term in sorted(terms):
            entries = " ".join(f"{index.doc_ids[doc]}:{tf}" for doc, tf in terms[term])
            yield f"{name.value}\t{term}\t{entries}"
