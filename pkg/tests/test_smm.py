"""Tests for structured matching features, the head and the matcher models."""

import dataclasses

import numpy as np
import pytest

from fielded_search.config import EncoderConfig
from fielded_search.models import FieldedDocument, InputError
from fielded_search.smm import (
    FieldedMatcher,
    FlatMatcher,
    Matcher,
    broadcast_query,
    build_flat_match_row,
    build_match_matrix,
    feature_mask,
    head_backward,
    head_forward,
    head_param_shapes,
    score,
    score_flat,
    smm_features,
)
from fielded_search.text import build_vocab, tokenize
from fielded_search.train import bce_logit_grad


@pytest.fixture
def doc():
    return FieldedDocument.build(
        "P1",
        Title=["Red Barn Lamp"],
        Description=["warm light for the porch door"],
        Brand=["Acme"],
        Numeric=["36in", "40W"],
    )


@pytest.fixture
def vocab():
    return build_vocab(tokenize("red barn lamp warm light for the porch door acme 36in 40w zenith"))


@pytest.fixture
def config():
    return EncoderConfig(
        d_model=8, n_layers=1, n_heads=2, d_ff=16, query_max_len=4, field_max_len=8, head_hidden=5
    )


def test_default_feature_size():
    """Test the fielded feature width for the default shape."""
    config = EncoderConfig()
    assert config.feature_size == 1008
    assert dict(head_param_shapes(config))["head.w1"] == (1008, 256)


def test_broadcast_query():
    """Test the query vector is replicated per row."""
    q = np.array([1.0, 2.0])
    assert broadcast_query(q).shape == (7, 2)
    assert broadcast_query(np.stack([q, q]), 3).shape == (2, 3, 2)


def test_match_matrix(doc):
    """Test exact unstemmed token matching per field."""
    match = build_match_matrix(["red", "door"], doc, 16)

    assert match.shape == (7, 16)
    assert match[0, :3].tolist() == [1, 0, 0]
    assert match[1, :3].tolist() == [0, 1, 0]
    assert match[2:].sum() == 0
    assert build_match_matrix(["36in", "doors"], doc, 4)[5].tolist() == [1, 0, 0, 0]


def test_match_matrix_truncates_query(doc):
    """Test query tokens past the length limit are ignored."""
    tokens = ["x", "y", "z", "w", "red"]
    assert build_match_matrix(tokens, doc, 4).sum() == 0


def test_flat_match_row(doc):
    """Test the single match row over the flattened document."""
    row = build_flat_match_row(["red", "door", "zenith"], doc, 4)
    assert row.tolist() == [[1, 1, 0, 0]]


def test_features_identity_and_zero_query():
    """Test |Q-D| vanishes on identical rows and Q*D on a zero query."""
    rng = np.random.default_rng(0)
    q = rng.normal(size=4)
    match = np.zeros((7, 3), dtype=np.int8)

    identical = smm_features(q, broadcast_query(q), match)
    assert identical.shape == (7 * 4 * 2 + 7 * 3,)
    assert np.all(identical[:28] == 0.0)

    zero = smm_features(np.zeros(4), rng.normal(size=(7, 4)), match)
    assert np.all(zero[28:56] == 0.0)


def test_features_layout():
    """Test row-major segment order [diff; prod; match]."""
    q = np.array([1.0, 2.0])
    rows = np.array([[3.0, 1.0]])
    match = np.array([[1, 0, 1]], dtype=np.int8)

    features = smm_features(q, rows, match)
    assert features.tolist() == [2.0, 1.0, 3.0, 2.0, 1.0, 0.0, 1.0]

    no_match = smm_features(q, rows, match, frozenset({"match"}))
    assert no_match.tolist() == [2.0, 1.0, 3.0, 2.0, 0.0, 0.0, 0.0]


def test_features_batched_matches_single():
    """Test the batched path equals per-pair features."""
    rng = np.random.default_rng(1)
    q = rng.normal(size=(3, 4))
    rows = rng.normal(size=(3, 7, 4))
    match = rng.integers(0, 2, size=(3, 7, 5))

    batched = smm_features(q, rows, match)
    for i in range(3):
        np.testing.assert_array_equal(batched[i], smm_features(q[i], rows[i], match[i]))


def test_features_shape_mismatch():
    """Test misaligned inputs."""
    with pytest.raises(InputError):
        smm_features(np.zeros(4), np.zeros((7, 5)), np.zeros((7, 3)))
    with pytest.raises(InputError):
        smm_features(np.zeros(4), np.zeros((7, 4)), np.zeros((6, 3)))


def test_field_swap_changes_fielded_features(vocab, config):
    """Test moving text between fields is visible only to the fielded model."""
    original = FieldedDocument.build(
        "A", Title=["Lamp"], Description=["warm light by zenith"], Brand=["Acme"]
    )
    swapped = FieldedDocument.build(
        "B", Title=["Lamp"], Description=["warm light by acme"], Brand=["Zenith"]
    )
    tokens = ["acme", "lamp"]

    assert not np.array_equal(
        build_match_matrix(tokens, original, 4), build_match_matrix(tokens, swapped, 4)
    )
    assert np.array_equal(
        build_flat_match_row(tokens, original, 4), build_flat_match_row(tokens, swapped, 4)
    )

    model = FieldedMatcher.initialize(config, vocab, seed=2)
    a = model.features([model.prepare("acme lamp", original)])
    b = model.features([model.prepare("acme lamp", swapped)])
    assert not np.allclose(a, b)


def test_feature_mask(config):
    """Test the mask covers each segment."""
    fielded = dataclasses.replace(config, fielded=True)
    mask = feature_mask(fielded, frozenset({"match"}))

    assert mask.shape == (fielded.feature_size,)
    assert mask[: 2 * 7 * 8].all()
    assert not mask[2 * 7 * 8:].any()

    flat = dataclasses.replace(config, fielded=False)
    assert feature_mask(flat).shape == (8 + 8 + 4,)


def test_head_zero_weights_is_half():
    """Test an all-zero head predicts 0.5."""
    config = EncoderConfig(d_model=4, query_max_len=2, head_hidden=3)
    params = {name: np.zeros(shape) for name, shape in head_param_shapes(config)}
    probs, _ = head_forward(np.ones((2, config.feature_size)), params)

    np.testing.assert_allclose(probs, [0.5, 0.5])


def test_head_monotone_in_match_features():
    """Test a head wired to the match segment scores more matches higher."""
    config = EncoderConfig(d_model=2, query_max_len=3, head_hidden=1, fielded=False)
    params = {name: np.zeros(shape) for name, shape in head_param_shapes(config)}
    params["head.w1"][4:, 0] = 1.0
    params["head.w2"][0, 0] = 1.0

    q = np.array([0.5, -0.5])
    rows = np.array([[0.1, 0.2]])
    scores = [
        float(head_forward(smm_features(q, rows, np.array([m])), params)[0])
        for m in ([0, 0, 0], [1, 0, 0], [1, 1, 0], [1, 1, 1])
    ]
    assert scores == sorted(scores)
    assert len(set(scores)) == 4


def test_head_dropout_only_in_training():
    """Test head dropout needs a stream."""
    config = EncoderConfig(d_model=4, query_max_len=2, head_hidden=32)
    params = {name: np.ones(shape) * 0.01 for name, shape in head_param_shapes(config)}
    x = np.ones((1, config.feature_size))

    eval_a, eval_cache = head_forward(x, params, 0.5)
    eval_b, _ = head_forward(x, params, 0.5)
    _, train_cache = head_forward(x, params, 0.5, np.random.default_rng(0))

    assert eval_a[0] == eval_b[0]
    assert eval_cache[2] is None
    assert np.any(train_cache[3] == 0.0)


def test_saturated_wrong_prediction_keeps_gradient():
    """Test a confidently wrong float32 head still receives a gradient."""
    config = EncoderConfig(d_model=4, query_max_len=2, head_hidden=2)
    params = {name: np.zeros(shape, dtype=np.float32) for name, shape in head_param_shapes(config)}
    params["head.w1"][0, 0] = 1.0
    params["head.w1"][1, 1] = 1.0
    params["head.w2"][:, 0] = 30.0
    x = np.ones((1, config.feature_size), dtype=np.float32)

    probs, cache = head_forward(x, params, 0.0)
    assert probs[0] == 1.0

    grads = {name: np.zeros_like(value) for name, value in params.items()}
    head_backward(bce_logit_grad(probs, np.zeros(1)), cache, params, grads)

    assert np.all(grads["head.w2"] > 0.0)
    assert grads["head.b2"][0] == pytest.approx(1.0)
    assert np.any(grads["head.w1"] != 0.0)


def test_backward_is_backward_logits_times_sigmoid_slope(vocab, config, doc):
    """Test both backward entry points agree through the sigmoid derivative."""
    model = FieldedMatcher.initialize(dataclasses.replace(config, dtype="float64"), vocab, seed=2)
    batch = [model.prepare("red lamp", doc)]
    probs = model.forward(batch)
    via_probs = model.backward(np.ones(1))
    model.forward(batch)
    via_logits = model.backward_logits(probs * (1.0 - probs))

    for name in model.params:
        np.testing.assert_allclose(via_probs[name], via_logits[name], rtol=1e-12, atol=1e-15)


def test_initialize_sizes_model(vocab, config):
    """Test initialize fits the vocabulary and leaves the config alone."""
    model = FieldedMatcher.initialize(config, vocab, seed=0)

    assert model.config.vocab_size == len(vocab)
    assert config.vocab_size == 2
    assert model.params["head.w1"].shape == (config.feature_size, 5)

    flat = FlatMatcher.initialize(config, vocab, seed=0)
    assert flat.config.fielded is False
    assert flat.params["head.w1"].shape == (8 + 8 + 4, 5)


def test_matcher_rejects_bad_arguments(vocab, config):
    """Test mismatched variant and unknown segments."""
    model = FieldedMatcher.initialize(config, vocab, seed=0)
    with pytest.raises(InputError):
        FlatMatcher(model.config, vocab, model.params)
    with pytest.raises(InputError):
        FieldedMatcher(model.config, vocab, model.params, frozenset({"cosine"}))


def test_prepare_rejects_invalid_inputs(doc, vocab, config):
    """Test invalid documents and empty queries."""
    model = FieldedMatcher.initialize(config, vocab, seed=0)
    with pytest.raises(InputError):
        model.prepare("lamp", FieldedDocument.build("P9", Title=["Lamp"]))
    with pytest.raises(InputError):
        model.prepare("!!", doc)


def test_prepare_uses_configured_min_fields(doc, vocab, config):
    """Test the field threshold given at construction gates documents."""
    FieldedMatcher.initialize(config, vocab, seed=0).prepare("red lamp", doc)

    strict = FieldedMatcher.initialize(config, vocab, seed=0, min_fields=5)
    assert strict.min_fields == 5
    with pytest.raises(InputError):
        strict.prepare("red lamp", doc)


def test_scores_are_probabilities_and_batch_independent(doc, vocab, config):
    """Test batched scoring equals one-at-a-time scoring."""
    model = FieldedMatcher.initialize(config, vocab, seed=4)
    other = FieldedDocument.build("P2", Title=["Porch Light"], Description=["warm acme lamp"])
    pairs = [("red lamp", doc), ("porch door", other), ("acme", doc)]

    batched = model.score_pairs(pairs, batch_size=2)
    single = [score(q, d, model) for q, d in pairs]

    assert np.all((batched > 0.0) & (batched < 1.0))
    np.testing.assert_allclose(batched, single, rtol=1e-5)


def test_flat_scoring(doc, vocab, config):
    """Test the flat variant scores end to end."""
    model = FlatMatcher.initialize(config, vocab, seed=4)
    value = score_flat("red lamp", doc, model)
    assert 0.0 < value < 1.0
    assert model.prepare("red lamp", doc).doc_ids.shape == (1, 16)


def test_disabled_match_segment_ignores_lexical_overlap(vocab, config):
    """Test scores no longer depend on M once the segment is disabled."""
    model = FieldedMatcher.initialize(config, vocab, seed=6, disabled=frozenset({"match"}))
    doc = FieldedDocument.build("P1", Title=["Red Lamp"], Description=["warm light"])
    inputs = model.prepare("red lamp", doc)
    cleared = dataclasses.replace(inputs, match=np.zeros_like(inputs.match))

    np.testing.assert_array_equal(model.score_inputs([inputs]), model.score_inputs([cleared]))


def test_save_and_load(tmp_path, doc, vocab, config):
    """Test a saved model reloads as the same class with the same scores."""
    for cls in (FieldedMatcher, FlatMatcher):
        model = cls.initialize(config, vocab, seed=9)
        checkpoint, vocab_path = tmp_path / f"{cls.__name__}.ckpt", tmp_path / "vocab.txt"
        model.save(checkpoint, vocab_path)

        loaded = Matcher.load(checkpoint, vocab_path)
        assert type(loaded) is cls
        assert loaded.score("red lamp", doc) == pytest.approx(model.score("red lamp", doc))


def test_load_rejects_vocabulary_mismatch(tmp_path, vocab, config):
    """Test a vocabulary that does not fit the checkpoint."""
    model = FieldedMatcher.initialize(config, vocab, seed=0)
    model.save(tmp_path / "model.ckpt", tmp_path / "vocab.txt")
    (tmp_path / "vocab.txt").write_text("only\n")

    with pytest.raises(InputError):
        Matcher.load(tmp_path / "model.ckpt", tmp_path / "vocab.txt")
