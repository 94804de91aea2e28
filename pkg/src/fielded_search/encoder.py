"""
Context encoder: token + positional embeddings, pre-norm transformer blocks
and masked mean pooling, with exact reverse-mode gradients.

Arrays are batched: token ids are (B, L), hidden states (B, L, d). Every
forward function returns its output together with a cache that the matching
backward function consumes; parameter gradients are accumulated into a
caller-owned dictionary keyed like the parameters.
"""

import dataclasses
import json
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from fielded_search.catalog import assemble_field_text, flatten_document
from fielded_search.config import EncoderConfig
from fielded_search.models import FIELD_ORDER, FieldedDocument, InputError
from fielded_search.text import TokenSeq, Vocab, encode_ids, tokenize

logger = logging.getLogger(__name__)

Params = Dict[str, np.ndarray]
Grads = Dict[str, np.ndarray]

LN_EPS = 1e-5
CHECKPOINT_MAGIC = b"FSCK"
CHECKPOINT_VERSION = 1


# --- parameters -----------------------------------------------------------


def max_positions(config: EncoderConfig) -> int:
    return max(config.query_max_len, config.field_max_len, flat_max_len(config))


def flat_max_len(config: EncoderConfig) -> int:
    """Flattened documents get twice the per-field length."""
    return 2 * config.field_max_len


def encoder_param_shapes(config: EncoderConfig) -> List[Tuple[str, Tuple[int, ...]]]:
    """Encoder tensors in declaration order."""
    d, ff = config.d_model, config.d_ff
    shapes: List[Tuple[str, Tuple[int, ...]]] = [
        ("embed.tokens", (config.vocab_size, d)),
        ("embed.positions", (max_positions(config), d)),
    ]
    for layer in range(config.n_layers):
        p = f"block{layer}."
        shapes += [
            (p + "ln1.gamma", (d,)),
            (p + "ln1.beta", (d,)),
            (p + "attn.wq", (d, d)),
            (p + "attn.bq", (d,)),
            (p + "attn.wk", (d, d)),
            (p + "attn.bk", (d,)),
            (p + "attn.wv", (d, d)),
            (p + "attn.bv", (d,)),
            (p + "attn.wo", (d, d)),
            (p + "attn.bo", (d,)),
            (p + "ln2.gamma", (d,)),
            (p + "ln2.beta", (d,)),
            (p + "ff.w1", (d, ff)),
            (p + "ff.b1", (ff,)),
            (p + "ff.w2", (ff, d)),
            (p + "ff.b2", (d,)),
        ]
    shapes += [("final_ln.gamma", (d,)), ("final_ln.beta", (d,))]
    return shapes


def init_tensor(name: str, shape: Tuple[int, ...], config: EncoderConfig, rng: np.random.Generator) -> np.ndarray:
    """
    Initialize one tensor by naming convention.

    Embeddings: uniform +-1/sqrt(d_model). Matrices: Xavier uniform.
    Vectors: ones for layer-norm gains, zeros otherwise.
    """
    dtype = np.dtype(config.dtype)
    if name.startswith("embed."):
        limit = 1.0 / np.sqrt(config.d_model)
        return rng.uniform(-limit, limit, size=shape).astype(dtype)
    if len(shape) == 2:
        limit = np.sqrt(6.0 / (shape[0] + shape[1]))
        return rng.uniform(-limit, limit, size=shape).astype(dtype)
    if name.endswith(".gamma"):
        return np.ones(shape, dtype=dtype)
    return np.zeros(shape, dtype=dtype)


def init_params(
    shapes: Sequence[Tuple[str, Tuple[int, ...]]],
    config: EncoderConfig,
    seed: int,
) -> Params:
    """Initialize an ordered parameter map from a shape list."""
    rng = np.random.default_rng(seed)
    return {name: init_tensor(name, shape, config, rng) for name, shape in shapes}


def zeros_like(params: Params) -> Grads:
    return {name: np.zeros_like(value) for name, value in params.items()}


# --- primitives -----------------------------------------------------------


def dropout_mask(shape: Tuple[int, ...], p: float, rng: Optional[np.random.Generator], dtype: Any) -> Optional[np.ndarray]:
    """Inverted-dropout scale mask, or None when dropout is inactive."""
    if p <= 0.0 or rng is None:
        return None
    keep = rng.random(shape) >= p
    return keep.astype(dtype) / (1.0 - p)


def embed(ids: np.ndarray, params: Params) -> np.ndarray:
    """
    Token embedding plus learned positional embedding.

    Args:
        ids: (B, L) token ids

    Returns:
        (B, L, d) embedded sequence

    Raises:
        InputError: If an id is outside the vocabulary
    """
    tokens = params["embed.tokens"]
    if ids.size and (ids.min() < 0 or ids.max() >= tokens.shape[0]):
        raise InputError(f"Token id out of range for vocabulary of size {tokens.shape[0]}")
    length = ids.shape[-1]
    return tokens[ids] + params["embed.positions"][:length]


def embed_backward(d_out: np.ndarray, ids: np.ndarray, grads: Grads) -> None:
    d = d_out.shape[-1]
    np.add.at(grads["embed.tokens"], ids.reshape(-1), d_out.reshape(-1, d))
    grads["embed.positions"][: ids.shape[-1]] += d_out.sum(axis=0)


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray) -> Tuple[np.ndarray, Tuple]:
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv
    return xhat * gamma + beta, (xhat, inv)


def layer_norm_backward(d_out: np.ndarray, cache: Tuple, gamma: np.ndarray, prefix: str, grads: Grads) -> np.ndarray:
    xhat, inv = cache
    d = d_out.shape[-1]
    grads[prefix + ".gamma"] += (d_out * xhat).reshape(-1, d).sum(axis=0)
    grads[prefix + ".beta"] += d_out.reshape(-1, d).sum(axis=0)
    dxhat = d_out * gamma
    return inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )


def _linear(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    return x @ w + b


def _linear_backward(d_out: np.ndarray, x: np.ndarray, w: np.ndarray, prefix_w: str, prefix_b: str, grads: Grads) -> np.ndarray:
    grads[prefix_w] += x.reshape(-1, x.shape[-1]).T @ d_out.reshape(-1, d_out.shape[-1])
    grads[prefix_b] += d_out.reshape(-1, d_out.shape[-1]).sum(axis=0)
    return d_out @ w.T


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    b, length, d = x.shape
    return x.reshape(b, length, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, length, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, length, h * dh)


def masked_softmax(scores: np.ndarray, key_mask: np.ndarray) -> np.ndarray:
    """
    Softmax over the last axis with masked keys at -inf.

    A row whose keys are all masked yields all-zero weights.
    """
    masked = np.where(key_mask, scores, -np.inf)
    row_max = masked.max(axis=-1, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    e = np.exp(masked - row_max)
    denom = e.sum(axis=-1, keepdims=True)
    return e / np.where(denom > 0, denom, 1.0)


def self_attention(x: np.ndarray, mask: np.ndarray, params: Params, prefix: str, n_heads: int) -> Tuple[np.ndarray, Tuple]:
    """Multi-head scaled dot-product self-attention over unmasked keys."""
    q = _split_heads(_linear(x, params[prefix + "wq"], params[prefix + "bq"]), n_heads)
    k = _split_heads(_linear(x, params[prefix + "wk"], params[prefix + "bk"]), n_heads)
    v = _split_heads(_linear(x, params[prefix + "wv"], params[prefix + "bv"]), n_heads)
    scale = 1.0 / math.sqrt(q.shape[-1])
    key_mask = mask[:, None, None, :].astype(bool)
    weights = masked_softmax((q @ k.transpose(0, 1, 3, 2)) * scale, key_mask).astype(x.dtype)
    context = _merge_heads(weights @ v)
    out = _linear(context, params[prefix + "wo"], params[prefix + "bo"])
    return out, (x, q, k, v, weights, context, scale)


def self_attention_backward(d_out: np.ndarray, cache: Tuple, params: Params, prefix: str, grads: Grads) -> np.ndarray:
    x, q, k, v, weights, context, scale = cache
    n_heads = q.shape[1]
    d_context = _split_heads(
        _linear_backward(d_out, context, params[prefix + "wo"], prefix + "wo", prefix + "bo", grads), n_heads
    )
    d_weights = d_context @ v.transpose(0, 1, 3, 2)
    d_v = weights.transpose(0, 1, 3, 2) @ d_context
    d_scores = weights * (d_weights - (d_weights * weights).sum(axis=-1, keepdims=True)) * scale
    d_q = d_scores @ k
    d_k = d_scores.transpose(0, 1, 3, 2) @ q
    dx = _linear_backward(_merge_heads(d_q), x, params[prefix + "wq"], prefix + "wq", prefix + "bq", grads)
    dx = dx + _linear_backward(_merge_heads(d_k), x, params[prefix + "wk"], prefix + "wk", prefix + "bk", grads)
    dx = dx + _linear_backward(_merge_heads(d_v), x, params[prefix + "wv"], prefix + "wv", prefix + "bv", grads)
    return dx


def transformer_block(
    x: np.ndarray,
    mask: np.ndarray,
    params: Params,
    layer: int,
    config: EncoderConfig,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[np.ndarray, Dict[str, Any]]:
    """
    Pre-norm block: x + Attn(LN1(x)), then h + FF(LN2(h)).

    Dropout is applied to both sublayer outputs when `rng` is given
    (training mode).
    """
    p = f"block{layer}."
    a_in, ln1 = layer_norm(x, params[p + "ln1.gamma"], params[p + "ln1.beta"])
    attn, attn_cache = self_attention(a_in, mask, params, p + "attn.", config.n_heads)
    drop1 = dropout_mask(attn.shape, config.dropout_p, rng, x.dtype)
    h = x + (attn * drop1 if drop1 is not None else attn)
    f_in, ln2 = layer_norm(h, params[p + "ln2.gamma"], params[p + "ln2.beta"])
    pre = _linear(f_in, params[p + "ff.w1"], params[p + "ff.b1"])
    act = np.maximum(pre, 0.0)
    ff = _linear(act, params[p + "ff.w2"], params[p + "ff.b2"])
    drop2 = dropout_mask(ff.shape, config.dropout_p, rng, x.dtype)
    y = h + (ff * drop2 if drop2 is not None else ff)
    cache = {
        "ln1": ln1, "attn": attn_cache, "drop1": drop1,
        "ln2": ln2, "f_in": f_in, "pre": pre, "act": act, "drop2": drop2,
    }
    return y, cache


def transformer_block_backward(d_out: np.ndarray, cache: Dict[str, Any], params: Params, layer: int, grads: Grads) -> np.ndarray:
    p = f"block{layer}."
    d_h = d_out
    d_ff = d_out * cache["drop2"] if cache["drop2"] is not None else d_out
    d_act = _linear_backward(d_ff, cache["act"], params[p + "ff.w2"], p + "ff.w2", p + "ff.b2", grads)
    d_pre = d_act * (cache["pre"] > 0)
    d_f_in = _linear_backward(d_pre, cache["f_in"], params[p + "ff.w1"], p + "ff.w1", p + "ff.b1", grads)
    d_h = d_h + layer_norm_backward(d_f_in, cache["ln2"], params[p + "ln2.gamma"], p + "ln2", grads)
    d_attn = d_h * cache["drop1"] if cache["drop1"] is not None else d_h
    d_a_in = self_attention_backward(d_attn, cache["attn"], params, p + "attn.", grads)
    return d_h + layer_norm_backward(d_a_in, cache["ln1"], params[p + "ln1.gamma"], p + "ln1", grads)


def mean_pool(hidden: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Mean over unmasked positions; an all-masked sequence pools to zero."""
    m = mask[..., None].astype(hidden.dtype)
    count = np.maximum(m.sum(axis=-2), 1.0)
    return (hidden * m).sum(axis=-2) / count


def mean_pool_backward(d_pooled: np.ndarray, mask: np.ndarray) -> np.ndarray:
    m = mask[..., None].astype(d_pooled.dtype)
    count = np.maximum(m.sum(axis=-2), 1.0)
    return m * (d_pooled / count)[..., None, :]


# --- encoder --------------------------------------------------------------


@dataclass
class EncoderTape:
    """Activations recorded by one batched forward pass."""

    ids: np.ndarray
    mask: np.ndarray
    blocks: List[Dict[str, Any]]
    final_ln: Tuple


@dataclass(frozen=True)
class FieldMatrix:
    """Pooled field vectors (7, d) with per-row presence flags."""

    rows: np.ndarray
    presence: np.ndarray


class TransformerEncoder:
    """Siamese context encoder; queries and fields share these parameters."""

    def __init__(self, config: EncoderConfig, params: Params) -> None:
        """
        Initialize the encoder.

        Args:
            config: Encoder configuration
            params: Parameter map holding at least the encoder tensors;
                shared by reference with the owning model
        """
        self.config = config
        self.params = params

    def forward(
        self,
        ids: np.ndarray,
        mask: np.ndarray,
        rng: Optional[np.random.Generator] = None,
    ) -> Tuple[np.ndarray, EncoderTape]:
        """
        Encode a batch of sequences.

        Args:
            ids: (B, L) token ids
            mask: (B, L) 1 for real tokens
            rng: Dropout stream; None selects eval mode

        Returns:
            (pooled (B, d), tape for backward)
        """
        x = embed(ids, self.params)
        blocks = []
        for layer in range(self.config.n_layers):
            x, cache = transformer_block(x, mask, self.params, layer, self.config, rng)
            blocks.append(cache)
        hidden, final_ln = layer_norm(x, self.params["final_ln.gamma"], self.params["final_ln.beta"])
        pooled = mean_pool(hidden, mask)
        return pooled, EncoderTape(ids=ids, mask=mask, blocks=blocks, final_ln=final_ln)

    def backward(self, d_pooled: np.ndarray, tape: EncoderTape, grads: Grads) -> None:
        """Accumulate parameter gradients for one recorded forward pass."""
        d_hidden = mean_pool_backward(d_pooled, tape.mask)
        dx = layer_norm_backward(d_hidden, tape.final_ln, self.params["final_ln.gamma"], "final_ln", grads)
        for layer in reversed(range(self.config.n_layers)):
            dx = transformer_block_backward(dx, tape.blocks[layer], self.params, layer, grads)
        embed_backward(dx, tape.ids, grads)

    def encode(self, seqs: Sequence[TokenSeq], rng: Optional[np.random.Generator] = None) -> Tuple[np.ndarray, EncoderTape]:
        ids = np.stack([s.ids for s in seqs])
        mask = np.stack([s.mask for s in seqs])
        return self.forward(ids, mask, rng)


def query_seq(query: str, vocab: Vocab, config: EncoderConfig) -> TokenSeq:
    return encode_ids(tokenize(query), vocab, config.query_max_len)


def field_seqs(doc: FieldedDocument, vocab: Vocab, config: EncoderConfig) -> List[TokenSeq]:
    return [
        encode_ids(tokenize(assemble_field_text(doc, name)), vocab, config.field_max_len)
        for name in FIELD_ORDER
    ]


def flat_seq(doc: FieldedDocument, vocab: Vocab, config: EncoderConfig) -> TokenSeq:
    return encode_ids(tokenize(flatten_document(doc)), vocab, flat_max_len(config))


def encode_query(query: str, vocab: Vocab, encoder: TransformerEncoder) -> np.ndarray:
    """
    Pooled query vector in eval mode.

    Raises:
        InputError: If the query has no tokens
    """
    if not tokenize(query):
        raise InputError(f"Query {query!r} is empty after tokenization")
    pooled, _ = encoder.encode([query_seq(query, vocab, encoder.config)])
    return pooled[0]


def encode_document_fields(doc: FieldedDocument, vocab: Vocab, encoder: TransformerEncoder) -> FieldMatrix:
    """
    Field matrix in eval mode.

    Each field is encoded independently with the shared encoder; an empty
    field gives a zero row and a False flag.
    """
    seqs = field_seqs(doc, vocab, encoder.config)
    pooled, _ = encoder.encode(seqs)
    presence = np.array([bool(s.mask.any()) for s in seqs])
    return FieldMatrix(rows=pooled, presence=presence)


def encode_document_flat(doc: FieldedDocument, vocab: Vocab, encoder: TransformerEncoder) -> np.ndarray:
    """Single vector for the whole document encoded as one text."""
    pooled, _ = encoder.encode([flat_seq(doc, vocab, encoder.config)])
    return pooled[0]


# --- checkpoints ----------------------------------------------------------


def save_checkpoint(path: Path, config: EncoderConfig, params: Params) -> None:
    """
    Write a versioned binary checkpoint plus a `.manifest.txt` sidecar.

    Layout: magic, version (uint32), header length (uint32), JSON header
    with config and tensor shapes, then float32 little-endian tensors in
    declaration order.
    """
    path.parent.mkdir(parents=True, exist_ok=True)
    header = json.dumps(
        {
            "config": dataclasses.asdict(config),
            "tensors": [[name, list(value.shape)] for name, value in params.items()],
        },
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        f.write(header)
        for value in params.values():
            f.write(np.ascontiguousarray(value, dtype="<f4").tobytes())
    manifest = manifest_path(path)
    with open(manifest, "w") as f:
        for name, value in params.items():
            f.write(f"{name}\t{'x'.join(str(n) for n in value.shape)}\n")
    logger.debug(f"Checkpoint saved: {path}")


def manifest_path(path: Path) -> Path:
    return path.with_name(path.name + ".manifest.txt")


def load_checkpoint(path: Path) -> Tuple[EncoderConfig, Params]:
    """
    Read a checkpoint written by save_checkpoint.

    Raises:
        FileNotFoundError: If the file is missing
        InputError: On a bad header or truncated payload
    """
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    with open(path, "rb") as f:
        if f.read(4) != CHECKPOINT_MAGIC:
            raise InputError(f"{path} is not a fielded-search checkpoint")
        prefix = f.read(8)
        if len(prefix) != 8:
            raise InputError(f"Checkpoint {path} is truncated in its header")
        version, header_len = struct.unpack("<II", prefix)
        if version != CHECKPOINT_VERSION:
            raise InputError(f"Unsupported checkpoint version {version}")
        raw_header = f.read(header_len)
        if len(raw_header) != header_len:
            raise InputError(f"Checkpoint {path} is truncated in its header")
        try:
            header = json.loads(raw_header.decode("utf-8"))
            config = EncoderConfig(**header["config"])
        except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as e:
            raise InputError(f"Checkpoint {path} has a malformed header: {e}") from None
        dtype = np.dtype(config.dtype)
        params: Params = {}
        for name, shape in header["tensors"]:
            count = int(np.prod(shape)) if shape else 1
            raw = f.read(4 * count)
            if len(raw) != 4 * count:
                raise InputError(f"Checkpoint {path} is truncated at tensor '{name}'")
            params[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(dtype)
    return config, params
