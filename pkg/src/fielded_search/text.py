"""
Tokenization, lexical analysis and vocabulary handling.

The neural path uses `tokenize` only (lowercase word tokens). The lexical
path uses `analyze`, which additionally drops stopwords and applies the
Porter stemmer before indexing.
"""

import logging
import re
from collections import Counter
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Dict, Iterable, List, Sequence

import numpy as np
from nltk.stem.porter import PorterStemmer

from fielded_search.models import InputError

logger = logging.getLogger(__name__)

PAD_ID = 0
UNK_ID = 1
PAD_TOKEN = "[PAD]"
UNK_TOKEN = "[UNK]"

_TOKEN_RE = re.compile(r"[^\W_]+")

STOPWORDS = frozenset(
    """
    a about above after again against all am an and any are as at be because been before
    being below between both but by can cannot could did do does doing down during each few
    for from further had has have having he her here hers herself him himself his how i if
    in into is it its itself just me more most my myself no nor not now of off on once only
    or other ought our ours ourselves out over own same she should so some such than that the
    their theirs them themselves then there these they this those through to too under until
    up very was we were what when where which while who whom why will with would you your
    yours yourself yourselves
    """.split()
)

_stemmer = PorterStemmer(mode=PorterStemmer.ORIGINAL_ALGORITHM)


def tokenize(text: str) -> List[str]:
    """
    Lowercase and split on non-alphanumeric characters.

    Letter-digit runs such as "36in" stay a single token; pure numbers are kept.
    """
    return _TOKEN_RE.findall(text.lower())


@lru_cache(maxsize=200_000)
def stem(token: str) -> str:
    """Porter stem; tokens with non-ASCII characters pass through unchanged."""
    if not token.isascii():
        return token
    return _stemmer.stem(token)


def analyze(text: str) -> List[str]:
    """Lexical-path analysis: tokenize, drop stopwords, stem."""
    return [stem(t) for t in tokenize(text) if t not in STOPWORDS]


@dataclass(frozen=True)
class Vocab:
    """Token <-> id mapping with PAD=0 and UNK=1 reserved."""

    token_to_id: Dict[str, int]
    id_to_token: List[str]

    def __len__(self) -> int:
        return len(self.id_to_token)

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def corpus_tokens(self) -> List[str]:
        """Non-reserved tokens in id order."""
        return self.id_to_token[2:]


def vocab_from_tokens(tokens: Sequence[str]) -> Vocab:
    id_to_token = [PAD_TOKEN, UNK_TOKEN] + list(tokens)
    token_to_id = {tok: i for i, tok in enumerate(id_to_token) if i >= 2}
    if len(token_to_id) != len(tokens):
        raise InputError("Vocabulary contains duplicate tokens")
    return Vocab(token_to_id=token_to_id, id_to_token=id_to_token)


def build_vocab(tokens: Iterable[str], min_freq: int = 1) -> Vocab:
    """
    Build a vocabulary from a token stream.

    Tokens with frequency >= min_freq receive ids from 2 upward in descending
    frequency order, ties broken lexicographically.
    """
    if min_freq < 1:
        raise InputError(f"min_freq must be >= 1, got {min_freq}")
    counts = Counter(tokens)
    kept = sorted((tok for tok, n in counts.items() if n >= min_freq), key=lambda t: (-counts[t], t))
    logger.debug(f"Vocabulary: {len(kept)} of {len(counts)} distinct tokens kept")
    return vocab_from_tokens(kept)


def save_vocab(vocab: Vocab, path: Path) -> None:
    """One token per line; line number (from 0) is id - 2."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for token in vocab.corpus_tokens():
            f.write(token + "\n")


def load_vocab(path: Path) -> Vocab:
    if not path.exists():
        raise FileNotFoundError(f"Vocabulary file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        tokens = [line.rstrip("\n") for line in f if line.rstrip("\n")]
    return vocab_from_tokens(tokens)


@dataclass(frozen=True)
class TokenSeq:
    """Fixed-length id sequence with its padding mask (1 = real token)."""

    ids: np.ndarray
    mask: np.ndarray


def encode_ids(tokens: Sequence[str], vocab: Vocab, max_len: int) -> TokenSeq:
    """Truncate to max_len, map unknowns to UNK and pad with PAD."""
    if max_len < 1:
        raise InputError(f"max_len must be >= 1, got {max_len}")
    kept = list(tokens)[:max_len]
    ids = np.full(max_len, PAD_ID, dtype=np.int64)
    mask = np.zeros(max_len, dtype=np.int8)
    for i, token in enumerate(kept):
        ids[i] = vocab.lookup(token)
        mask[i] = 1
    return TokenSeq(ids=ids, mask=mask)
