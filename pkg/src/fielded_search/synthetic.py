"""
Deterministic synthetic fielded corpora.

Used for the overfit and structured-matching experiments and for smoke runs
of the command-line pipeline without external data.
"""

import logging
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Set

from fielded_search.catalog import Catalog, write_catalog, write_pairs
from fielded_search.models import FieldedDocument, InputError, LabeledPair

logger = logging.getLogger(__name__)

_ONSETS = "bdfgklmnprstvz"
_VOWELS = "aeiou"

CATEGORIES = ("door", "lamp", "faucet", "drill", "paint", "shelf", "mower", "grill")
COLORS = ("black", "white", "red", "blue", "green", "silver", "bronze", "oak")
MATERIALS = ("steel", "wood", "brass", "plastic", "glass", "ceramic")


@dataclass
class SyntheticTask:
    """A generated catalog with labeled (query, doc) pairs."""

    catalog: Catalog
    pairs: List[LabeledPair]
    name: str = "synthetic"

    def save(self, directory: Path) -> Dict[str, Path]:
        """Write `catalog.jsonl` and `pairs.tsv` into a directory."""
        paths = {"catalog": directory / "catalog.jsonl", "pairs": directory / "pairs.tsv"}
        write_catalog(self.catalog, paths["catalog"])
        write_pairs(self.pairs, paths["pairs"])
        return paths


class WordFactory:
    """Pronounceable pseudo-words, never repeated within one factory."""

    def __init__(self, rng: random.Random) -> None:
        self.rng = rng
        self.used: Set[str] = set()

    def word(self, syllables: int = 3) -> str:
        while True:
            w = "".join(self.rng.choice(_ONSETS) + self.rng.choice(_VOWELS) for _ in range(syllables))
            if w not in self.used:
                self.used.add(w)
                return w


def _filler(rng: random.Random) -> List[str]:
    return [
        f"{rng.choice(COLORS)} {rng.choice(MATERIALS)} {rng.choice(CATEGORIES)} for everyday use",
        f"durable {rng.choice(MATERIALS)} finish",
    ]


def make_overfit_task(
    n_docs: int = 64,
    n_queries: int = 64,
    negatives: int = 3,
    seed: int = 13,
) -> SyntheticTask:
    """
    One relevant document per query plus random negatives.

    Query i is a unique pseudo-word that occurs only in the Title of
    document i, so every positive pair is separable.

    Raises:
        InputError: If there are fewer documents than queries or negatives
    """
    if n_queries > n_docs:
        raise InputError(f"n_queries ({n_queries}) cannot exceed n_docs ({n_docs})")
    if negatives >= n_docs:
        raise InputError(f"negatives ({negatives}) must be below n_docs ({n_docs})")
    rng = random.Random(seed)
    words = WordFactory(rng)
    catalog: Catalog = {}
    keys = []
    for i in range(n_docs):
        key = words.word()
        keys.append(key)
        doc_id = f"p{i:04d}"
        catalog[doc_id] = FieldedDocument.build(
            doc_id,
            Title=[f"{key} {rng.choice(CATEGORIES)}"],
            Description=_filler(rng),
            Brand=[words.word(2)],
            ProductCategory=[rng.choice(CATEGORIES)],
        )
    doc_ids = sorted(catalog)
    pairs = []
    for i in range(n_queries):
        relevant = doc_ids[i]
        pairs.append(LabeledPair(keys[i], relevant, 1))
        others = [d for d in doc_ids if d != relevant]
        for negative in sorted(rng.sample(others, negatives)):
            pairs.append(LabeledPair(keys[i], negative, 0))
    logger.debug(f"Overfit task: {n_docs} documents, {len(pairs)} pairs")
    return SyntheticTask(catalog=catalog, pairs=pairs, name="overfit")


def make_field_task(
    n_queries: int = 200,
    candidates: int = 4,
    seed: int = 13,
) -> SyntheticTask:
    """
    Relevance decided by WHICH field holds the query term.

    Every query is a brand word. Its relevant product carries the word in
    Brand and a decoy word inside the Description; a field-swapped negative
    carries the decoy in Brand and the query word in the Description, so
    both flatten to the same bag of words. Remaining candidates are
    distractors without the query word.

    Raises:
        InputError: If candidates is outside [2, 26]
    """
    if not 2 <= candidates <= 26:
        raise InputError(f"candidates must lie in [2, 26], got {candidates}")
    rng = random.Random(seed)
    words = WordFactory(rng)
    catalog: Catalog = {}
    pairs: List[LabeledPair] = []

    def product(doc_id: str, title: str, brand: str, mention: str, tail: str) -> FieldedDocument:
        return FieldedDocument.build(
            doc_id,
            Title=[title],
            Description=[f"works well with {mention} accessories", tail],
            Brand=[brand],
            ProductCategory=[title.split()[-1]],
        )

    for q in range(n_queries):
        brand, decoy = words.word(), words.word()
        title = f"{rng.choice(COLORS)} {rng.choice(CATEGORIES)}"
        tail = _filler(rng)[1]
        positive, swapped = f"q{q:04d}a", f"q{q:04d}b"
        catalog[positive] = product(positive, title, brand, decoy, tail)
        catalog[swapped] = product(swapped, title, decoy, brand, tail)
        pairs.append(LabeledPair(brand, positive, 1))
        pairs.append(LabeledPair(brand, swapped, 0))
        for j in range(candidates - 2):
            doc_id = f"q{q:04d}{chr(ord('c') + j)}"
            other_title = f"{rng.choice(COLORS)} {rng.choice(CATEGORIES)}"
            catalog[doc_id] = product(doc_id, other_title, words.word(), words.word(), _filler(rng)[1])
            pairs.append(LabeledPair(brand, doc_id, 0))
    logger.debug(f"Field task: {n_queries} queries, {len(catalog)} documents")
    return SyntheticTask(catalog=catalog, pairs=pairs, name="field")


TASKS = {"overfit": make_overfit_task, "field": make_field_task}
