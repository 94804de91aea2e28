"""
Structured matching: query-field interaction features and the relevance head.

Features for one (query, document) pair are the concatenation
[|Q - D|; Q * D; M], where Q is the pooled query vector broadcast to every
document row, D stacks the pooled field vectors (7 rows, or 1 row for the
flat variant) and M marks which query tokens occur in each row's text.
"""

import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import FrozenSet, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from fielded_search.catalog import assemble_field_text, flatten_document, is_valid_document
from fielded_search.config import EncoderConfig
from fielded_search.encoder import (
    EncoderTape,
    Grads,
    Params,
    TransformerEncoder,
    dropout_mask,
    encoder_param_shapes,
    field_seqs,
    flat_seq,
    init_params,
    load_checkpoint,
    query_seq,
    save_checkpoint,
    zeros_like,
)
from fielded_search.models import FIELD_ORDER, NUM_FIELDS, FieldedDocument, InputError
from fielded_search.text import Vocab, load_vocab, save_vocab, tokenize

logger = logging.getLogger(__name__)

FEATURE_SEGMENTS = ("diff", "prod", "match")


def head_param_shapes(config: EncoderConfig) -> List[Tuple[str, Tuple[int, ...]]]:
    return [
        ("head.w1", (config.feature_size, config.head_hidden)),
        ("head.b1", (config.head_hidden,)),
        ("head.w2", (config.head_hidden, 1)),
        ("head.b2", (1,)),
    ]


# --- features -------------------------------------------------------------


def broadcast_query(q: np.ndarray, rows: int = NUM_FIELDS) -> np.ndarray:
    """Replicate a query vector (d,) or batch (B, d) into `rows` rows."""
    return np.repeat(q[..., None, :], rows, axis=-2)


def _match_row(query_tokens: Sequence[str], text_tokens: set, query_max_len: int) -> np.ndarray:
    row = np.zeros(query_max_len, dtype=np.int8)
    for j, token in enumerate(list(query_tokens)[:query_max_len]):
        if token in text_tokens:
            row[j] = 1
    return row


def build_match_matrix(query_tokens: Sequence[str], doc: FieldedDocument, query_max_len: int) -> np.ndarray:
    """
    Binary (7, query_max_len) lexical match matrix.

    M[i, j] = 1 iff query token j occurs among field i's unstemmed tokens.
    Columns past the query length stay zero.
    """
    return np.stack([
        _match_row(query_tokens, set(tokenize(assemble_field_text(doc, name))), query_max_len)
        for name in FIELD_ORDER
    ])


def build_flat_match_row(query_tokens: Sequence[str], doc: FieldedDocument, query_max_len: int) -> np.ndarray:
    """(1, query_max_len) match row against the flattened document."""
    return _match_row(query_tokens, set(tokenize(flatten_document(doc))), query_max_len)[None, :]


def smm_features(
    q: np.ndarray,
    doc_rows: np.ndarray,
    match: np.ndarray,
    disabled: FrozenSet[str] = frozenset(),
) -> np.ndarray:
    """
    Concatenate [|Q - D|; Q * D; M], each flattened row-major.

    Accepts a single pair (q (d,), doc_rows (R, d), match (R, L)) or a batch
    with a leading B axis.

    Args:
        disabled: Segments from {"diff", "prod", "match"} to zero out

    Raises:
        InputError: On mismatched dimensions
    """
    single = q.ndim == 1
    if single:
        q, doc_rows, match = q[None], doc_rows[None], match[None]
    if doc_rows.shape[0] != q.shape[0] or doc_rows.shape[-1] != q.shape[-1]:
        raise InputError(f"Query {q.shape} and document rows {doc_rows.shape} do not align")
    if match.shape[:2] != doc_rows.shape[:2]:
        raise InputError(f"Match matrix {match.shape} does not align with rows {doc_rows.shape}")
    batch = q.shape[0]
    q_rows = broadcast_query(q, doc_rows.shape[1])
    diff = np.abs(q_rows - doc_rows).reshape(batch, -1)
    prod = (q_rows * doc_rows).reshape(batch, -1)
    lexical = match.reshape(batch, -1).astype(q.dtype)
    segments = {"diff": diff, "prod": prod, "match": lexical}
    for name in disabled:
        segments[name] = np.zeros_like(segments[name])
    features = np.concatenate([segments[name] for name in FEATURE_SEGMENTS], axis=1)
    return features[0] if single else features


def feature_mask(config: EncoderConfig, disabled: FrozenSet[str] = frozenset()) -> np.ndarray:
    """Boolean vector over the feature layout; False where a segment is disabled."""
    rows = NUM_FIELDS if config.fielded else 1
    sizes = {"diff": rows * config.d_model, "prod": rows * config.d_model, "match": rows * config.query_max_len}
    return np.concatenate([np.full(sizes[name], name not in disabled) for name in FEATURE_SEGMENTS])


def smm_features_backward(
    d_features: np.ndarray,
    q: np.ndarray,
    doc_rows: np.ndarray,
    disabled: FrozenSet[str] = frozenset(),
) -> Tuple[np.ndarray, np.ndarray]:
    """Gradients of the batched features w.r.t. q (B, d) and doc_rows (B, R, d)."""
    batch, rows, d = doc_rows.shape
    size = rows * d
    d_diff = d_features[:, :size].reshape(batch, rows, d)
    d_prod = d_features[:, size:2 * size].reshape(batch, rows, d)
    if "diff" in disabled:
        d_diff = np.zeros_like(d_diff)
    if "prod" in disabled:
        d_prod = np.zeros_like(d_prod)
    q_rows = broadcast_query(q, rows)
    sign = np.sign(q_rows - doc_rows)
    d_q_rows = sign * d_diff + doc_rows * d_prod
    d_doc = -sign * d_diff + q_rows * d_prod
    return d_q_rows.sum(axis=1), d_doc


# --- head -----------------------------------------------------------------


def head_forward(
    features: np.ndarray,
    params: Params,
    dropout_p: float = 0.5,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[np.ndarray, Tuple]:
    """
    sigmoid(W2 dropout(relu(W1 x + b1)) + b2).

    Args:
        features: (B, F) or (F,) feature vectors
        rng: Dropout stream; None selects eval mode

    Returns:
        (probabilities (B,) or scalar array, cache)
    """
    single = features.ndim == 1
    x = features[None] if single else features
    pre = x @ params["head.w1"] + params["head.b1"]
    act = np.maximum(pre, 0.0)
    drop = dropout_mask(act.shape, dropout_p, rng, act.dtype)
    hidden = act * drop if drop is not None else act
    logits = (hidden @ params["head.w2"] + params["head.b2"])[:, 0]
    probs = expit(logits)
    cache = (x, pre, drop, hidden, probs)
    return (probs[0] if single else probs), cache


def head_backward(d_logits: np.ndarray, cache: Tuple, params: Params, grads: Grads) -> np.ndarray:
    """Accumulate head gradients from gradients w.r.t. the logits; returns d_features."""
    x, pre, drop, hidden, _ = cache
    d_logits = np.asarray(d_logits, dtype=hidden.dtype).reshape(-1, 1)
    grads["head.w2"] += hidden.T @ d_logits
    grads["head.b2"] += d_logits.sum(axis=0)
    d_hidden = d_logits @ params["head.w2"].T
    if drop is not None:
        d_hidden = d_hidden * drop
    d_pre = d_hidden * (pre > 0)
    grads["head.w1"] += x.T @ d_pre
    grads["head.b1"] += d_pre.sum(axis=0)
    return d_pre @ params["head.w1"].T


# --- models ---------------------------------------------------------------


@dataclass(frozen=True)
class PairInputs:
    """Tokenized model inputs for one (query, document) pair."""

    query_ids: np.ndarray  # (Lq,)
    query_mask: np.ndarray
    doc_ids: np.ndarray  # (R, Ld)
    doc_mask: np.ndarray
    match: np.ndarray  # (R, Lq)


@dataclass
class _Tape:
    batch: int
    q_vec: np.ndarray
    q_tape: EncoderTape
    doc_rows: np.ndarray
    d_tape: EncoderTape
    head_cache: Tuple


class Matcher:
    """
    Siamese matcher: shared encoder for query and document rows, SMM
    features and a two-layer head.
    """

    fielded = True

    def __init__(
        self,
        config: EncoderConfig,
        vocab: Vocab,
        params: Params,
        disabled: FrozenSet[str] = frozenset(),
        min_fields: int = 2,
    ) -> None:
        """
        Initialize a matcher around existing parameters.

        Args:
            config: Encoder configuration (its `fielded` flag must match the class)
            vocab: Vocabulary used for token ids
            params: Encoder and head tensors
            disabled: Feature segments zeroed for ablation
            min_fields: Non-empty fields a scored document needs
        """
        if config.fielded != self.fielded:
            raise InputError(f"{type(self).__name__} needs fielded={self.fielded}")
        unknown = set(disabled) - set(FEATURE_SEGMENTS)
        if unknown:
            raise InputError(f"Unknown feature segments: {sorted(unknown)}")
        config.validate()
        self.config = config
        self.vocab = vocab
        self.params = params
        self.disabled = frozenset(disabled)
        self.min_fields = min_fields
        self.encoder = TransformerEncoder(config, params)
        self._tape: Optional[_Tape] = None

    @classmethod
    def param_shapes(cls, config: EncoderConfig) -> List[Tuple[str, Tuple[int, ...]]]:
        return encoder_param_shapes(config) + head_param_shapes(config)

    @classmethod
    def initialize(
        cls,
        config: EncoderConfig,
        vocab: Vocab,
        seed: int,
        disabled: FrozenSet[str] = frozenset(),
        min_fields: int = 2,
    ) -> "Matcher":
        """Create a randomly initialized model sized for `vocab`."""
        config = dataclasses.replace(config, vocab_size=len(vocab), fielded=cls.fielded)
        config.validate()
        logger.debug(f"Initializing {cls.__name__} with vocab size {len(vocab)}, seed {seed}")
        return cls(config, vocab, init_params(cls.param_shapes(config), config, seed), disabled, min_fields)

    def save(self, checkpoint: Path, vocab_path: Path) -> None:
        save_checkpoint(checkpoint, self.config, self.params)
        save_vocab(self.vocab, vocab_path)

    @staticmethod
    def load(
        checkpoint: Path,
        vocab_path: Path,
        disabled: FrozenSet[str] = frozenset(),
        min_fields: int = 2,
    ) -> "Matcher":
        """
        Restore a model saved with `save`; the class follows the checkpoint.

        Raises:
            InputError: If the vocabulary does not match the checkpoint
        """
        config, params = load_checkpoint(checkpoint)
        vocab = load_vocab(vocab_path)
        if len(vocab) != config.vocab_size:
            raise InputError(
                f"Vocabulary has {len(vocab)} entries but checkpoint expects {config.vocab_size}"
            )
        expected = [name for name, _ in matcher_class(config.fielded).param_shapes(config)]
        if list(params) != expected:
            raise InputError(f"Checkpoint {checkpoint} does not hold a matcher")
        model: Matcher = matcher_class(config.fielded)(config, vocab, params, disabled, min_fields)
        return model

    # subclasses choose how a document becomes rows
    def document_rows(self, doc: FieldedDocument) -> Tuple[np.ndarray, np.ndarray]:
        seqs = field_seqs(doc, self.vocab, self.config)
        return np.stack([s.ids for s in seqs]), np.stack([s.mask for s in seqs])

    def match_matrix(self, query_tokens: Sequence[str], doc: FieldedDocument) -> np.ndarray:
        return build_match_matrix(query_tokens, doc, self.config.query_max_len)

    def prepare(self, query: str, doc: FieldedDocument) -> PairInputs:
        """
        Tokenize one pair.

        Raises:
            InputError: If the document is invalid or the query is empty
        """
        if not is_valid_document(doc, self.min_fields):
            raise InputError(f"Document '{doc.doc_id}' lacks Title/Description or enough fields")
        tokens = tokenize(query)
        if not tokens:
            raise InputError(f"Query {query!r} is empty after tokenization")
        q = query_seq(query, self.vocab, self.config)
        doc_ids, doc_mask = self.document_rows(doc)
        return PairInputs(
            query_ids=q.ids,
            query_mask=q.mask,
            doc_ids=doc_ids,
            doc_mask=doc_mask,
            match=self.match_matrix(tokens, doc),
        )

    def features(self, batch: Sequence[PairInputs]) -> np.ndarray:
        """Eval-mode feature vectors for a batch (no tape recorded)."""
        q_vec, _, doc_rows, _ = self._encode(batch, None)
        match = np.stack([b.match for b in batch])
        return smm_features(q_vec, doc_rows, match, self.disabled)

    def _encode(self, batch: Sequence[PairInputs], rng: Optional[np.random.Generator]) -> Tuple:
        q_vec, q_tape = self.encoder.forward(
            np.stack([b.query_ids for b in batch]), np.stack([b.query_mask for b in batch]), rng
        )
        doc_ids = np.stack([b.doc_ids for b in batch])
        doc_mask = np.stack([b.doc_mask for b in batch])
        n, rows, length = doc_ids.shape
        d_vec, d_tape = self.encoder.forward(
            doc_ids.reshape(n * rows, length), doc_mask.reshape(n * rows, length), rng
        )
        return q_vec, q_tape, d_vec.reshape(n, rows, -1), d_tape

    def forward(self, batch: Sequence[PairInputs], rng: Optional[np.random.Generator] = None) -> np.ndarray:
        """
        Relevance probabilities for a batch; records a tape for backward.

        Args:
            rng: Dropout stream; None selects eval mode
        """
        if not batch:
            return np.zeros(0, dtype=np.dtype(self.config.dtype))
        probs, self._tape = self._run(batch, rng)
        return probs

    def _run(self, batch: Sequence[PairInputs], rng: Optional[np.random.Generator]) -> Tuple[np.ndarray, _Tape]:
        q_vec, q_tape, doc_rows, d_tape = self._encode(batch, rng)
        match = np.stack([b.match for b in batch])
        features = smm_features(q_vec, doc_rows, match, self.disabled)
        probs, head_cache = head_forward(features, self.params, self.config.head_dropout_p, rng)
        return probs, _Tape(len(batch), q_vec, q_tape, doc_rows, d_tape, head_cache)

    def backward(self, d_probs: np.ndarray) -> Grads:
        """
        Parameter gradients of sum(d_probs * probs) for the last forward pass.

        Raises:
            RuntimeError: If no forward pass has been recorded
        """
        if self._tape is None:
            raise RuntimeError("backward() called before forward()")
        probs = self._tape.head_cache[-1]
        return self.backward_logits(np.asarray(d_probs) * probs * (1.0 - probs))

    def backward_logits(self, d_logits: np.ndarray) -> Grads:
        """
        Parameter gradients given gradients w.r.t. the head logits.

        Training passes `probs - labels` here, the fused sigmoid and BCE
        derivative, which stays nonzero when the sigmoid saturates.

        Raises:
            RuntimeError: If no forward pass has been recorded
        """
        if self._tape is None:
            raise RuntimeError("backward() called before forward()")
        tape, self._tape = self._tape, None
        grads = zeros_like(self.params)
        d_features = head_backward(d_logits, tape.head_cache, self.params, grads)
        d_q, d_rows = smm_features_backward(d_features, tape.q_vec, tape.doc_rows, self.disabled)
        n, rows, d = d_rows.shape
        self.encoder.backward(d_rows.reshape(n * rows, d), tape.d_tape, grads)
        self.encoder.backward(d_q, tape.q_tape, grads)
        return grads

    def score_inputs(self, inputs: Sequence[PairInputs], batch_size: int = 64) -> np.ndarray:
        """Eval-mode scores for prepared pairs; no tape is recorded."""
        scores = [self._run(inputs[i:i + batch_size], None)[0] for i in range(0, len(inputs), batch_size)]
        return np.concatenate(scores) if scores else np.zeros(0)

    def score_pairs(self, pairs: Sequence[Tuple[str, FieldedDocument]], batch_size: int = 64) -> np.ndarray:
        return self.score_inputs([self.prepare(q, doc) for q, doc in pairs], batch_size)

    def score(self, query: str, doc: FieldedDocument) -> float:
        """Eval-mode relevance probability for one pair."""
        return float(self.score_pairs([(query, doc)])[0])


class FieldedMatcher(Matcher):
    """Seven field rows per document."""

    fielded = True


class FlatMatcher(Matcher):
    """Whole document encoded as one text; a single row and one match row."""

    fielded = False

    def document_rows(self, doc: FieldedDocument) -> Tuple[np.ndarray, np.ndarray]:
        seq = flat_seq(doc, self.vocab, self.config)
        return seq.ids[None, :], seq.mask[None, :]

    def match_matrix(self, query_tokens: Sequence[str], doc: FieldedDocument) -> np.ndarray:
        return build_flat_match_row(query_tokens, doc, self.config.query_max_len)


def matcher_class(fielded: bool) -> type:
    return FieldedMatcher if fielded else FlatMatcher


def score(query: str, doc: FieldedDocument, model: FieldedMatcher) -> float:
    """End-to-end fielded relevance probability in eval mode."""
    return model.score(query, doc)


def score_flat(query: str, doc: FieldedDocument, model: FlatMatcher) -> float:
    """End-to-end flat-document relevance probability in eval mode."""
    return model.score(query, doc)
