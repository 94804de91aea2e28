"""Tests for the fielded inverted index and BM25/BM25F scoring."""

import math

import numpy as np
import pytest

from fielded_search.config import Bm25Params
from fielded_search.lexindex import (
    UnknownDocumentError,
    bm25_score,
    bm25f_score,
    build_index,
    dump_postings,
    get_scorer,
    load_index,
    rank_lexical,
    save_index,
    tune_params,
)
from fielded_search.models import FIELD_ORDER, FieldedDocument, FieldName, InputError
from fielded_search.text import analyze

WORDS = ["door", "lamp", "oak", "red", "chair", "sink", "tile", "brass", "faucet", "shelf"]


@pytest.fixture
def catalog():
    """Two products with equal length."""
    return {
        "A": FieldedDocument.build("A", Title=["door"], Description=["lamp"]),
        "B": FieldedDocument.build("B", Title=["chair"], Description=["table"]),
    }


@pytest.fixture
def index(catalog):
    return build_index(catalog)


def test_build_index_statistics(index):
    """Test document frequencies and field lengths."""
    assert index.num_docs == 2
    assert index.doc_ids == ["A", "B"]
    assert index.df["door"] == 1
    assert index.field_lengths[0].tolist() == [1, 1, 0, 0, 0, 0, 0]
    assert index.avg_doc_length == 2.0


def test_bm25_reference_value(index):
    """Test N=2, df=1, tf=1 at average length scores ln 2."""
    score = bm25_score(index, ["door"], "A", Bm25Params(k1=1.2, b=0.75))
    assert score == pytest.approx(math.log(2.0), abs=1e-9)
    assert bm25_score(index, ["door"], "B", Bm25Params()) == 0.0


def test_idf_never_negative(catalog):
    """Test a term present in every document still has positive IDF."""
    catalog["B"] = FieldedDocument.build("B", Title=["door"], Description=["table"])
    index = build_index(catalog)
    assert index.idf("door") > 0


def test_bm25f_reference_value(index):
    """Test BM25F reduces to BM25 on a term found in one field."""
    score = bm25f_score(index, ["lamp"], "A", Bm25Params(k1=1.2, b=0.75))
    assert score == pytest.approx(math.log(2.0), abs=1e-9)


def test_bm25f_field_weight_zero_ignores_field(index):
    """Test a zero weight removes a field's contribution."""
    params = Bm25Params(field_weights={FieldName.DESCRIPTION: 1.0, FieldName.TITLE: 0.0})
    assert bm25f_score(index, ["door"], "A", params) == 0.0
    assert bm25f_score(index, ["lamp"], "A", params) > 0.0


def test_bm25f_matches_bm25_on_single_field_corpora():
    """Test BM25F with unit weights equals BM25 when each corpus uses one field."""
    rng = np.random.default_rng(0)
    for trial in range(100):
        name = FIELD_ORDER[trial % len(FIELD_ORDER)]
        n_docs = int(rng.integers(2, 6))
        catalog = {}
        for d in range(n_docs):
            words = rng.choice(WORDS, size=int(rng.integers(1, 9)))
            catalog[f"d{d}"] = FieldedDocument.build(f"d{d}", **{name.value: [" ".join(words)]})
        index = build_index(catalog)
        query = analyze(" ".join(rng.choice(WORDS, size=int(rng.integers(1, 4)))))
        params = Bm25Params(k1=float(rng.uniform(0.5, 2.0)), b=float(rng.uniform(0.0, 1.0)))

        for doc_id in catalog:
            assert bm25f_score(index, query, doc_id, params) == pytest.approx(
                bm25_score(index, query, doc_id, params), abs=1e-9
            )


def test_unknown_document(index):
    """Test scoring an unindexed product."""
    with pytest.raises(UnknownDocumentError):
        bm25_score(index, ["door"], "Z", Bm25Params())


def test_unknown_scorer():
    """Test scorer lookup."""
    assert get_scorer("bm25f") is bm25f_score
    with pytest.raises(InputError):
        get_scorer("tfidf")


def test_empty_catalog():
    """Test indexing nothing."""
    with pytest.raises(InputError):
        build_index({})


def test_rank_lexical_orders_ties_by_doc_id(index):
    """Test ranking is descending by score with doc_id tie-break."""
    ranked = rank_lexical(index, "door", ["B", "A"], Bm25Params())
    assert [doc_id for doc_id, _ in ranked] == ["A", "B"]

    tied = rank_lexical(index, "window", ["B", "A"], Bm25Params())
    assert [doc_id for doc_id, _ in tied] == ["A", "B"]


def test_tune_params(index):
    """Test the grid search keeps the first best setting."""
    groups = {"door": [("A", 1), ("B", 0)], "table": [("A", 0), ("B", 1)]}
    params, value = tune_params(index, groups, "bm25", k=5)

    assert value == pytest.approx(1.0)
    assert (params.k1, params.b) == (0.9, 0.3)

    params, value = tune_params(index, groups, "bm25f", k=5)
    assert value == pytest.approx(1.0)
    assert any(w > 0 for w in params.field_weights.values())


def test_tune_params_empty(index):
    """Test tuning without validation queries."""
    with pytest.raises(InputError):
        tune_params(index, {}, "bm25")


def test_index_file(tmp_path, index):
    """Test index persistence."""
    path = tmp_path / "index.bin"
    save_index(index, path)
    loaded = load_index(path)

    assert loaded.doc_ids == index.doc_ids
    assert loaded.postings == index.postings
    assert np.array_equal(loaded.field_lengths, index.field_lengths)
    assert loaded.df == index.df


def test_load_index_rejects_bad_files(tmp_path, index):
    """Test bad magic and truncated index files."""
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"NOPE")
    with pytest.raises(InputError):
        load_index(bad)

    path = tmp_path / "index.bin"
    save_index(index, path)
    truncated = tmp_path / "short.bin"
    truncated.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(InputError):
        load_index(truncated)

    with pytest.raises(FileNotFoundError):
        load_index(tmp_path / "missing.bin")


def test_dump_postings(index):
    """Test the human-readable postings listing."""
    lines = list(dump_postings(index))

    assert "Title\tdoor\tA:1" in lines
    assert "Description\tlamp\tA:1" in lines
    assert all(len(line.split("\t")) == 3 for line in lines)
