"""Tests for the synthetic fielded corpora."""

import random

import pytest

from fielded_search.catalog import assemble_field_text, flatten_document, read_catalog, read_pairs
from fielded_search.models import FIELD_ORDER, FieldName, InputError
from fielded_search.synthetic import WordFactory, make_field_task, make_overfit_task
from fielded_search.text import tokenize


def test_word_factory_never_repeats():
    """Test generated words are unique."""
    factory = WordFactory(random.Random(0))
    words = [factory.word() for _ in range(500)]
    assert len(set(words)) == 500
    assert all(len(w) == 6 for w in words)


def test_overfit_task_shape():
    """Test one positive and the requested negatives per query."""
    task = make_overfit_task(n_docs=20, n_queries=10, negatives=3, seed=2)

    assert len(task.catalog) == 20
    assert len(task.pairs) == 10 * 4
    positives = [p for p in task.pairs if p.label == 1]
    assert len(positives) == 10
    assert len({p.query for p in positives}) == 10


def test_overfit_query_occurs_only_in_positive_title():
    """Test each query word is found in its positive's Title and nowhere else."""
    task = make_overfit_task(n_docs=16, n_queries=16, negatives=3, seed=5)
    for pair in task.pairs:
        doc = task.catalog[pair.doc_id]
        for name in FIELD_ORDER:
            present = pair.query in tokenize(assemble_field_text(doc, name))
            assert present == (pair.label == 1 and name is FieldName.TITLE)


def test_overfit_task_is_seeded():
    """Test the same seed gives the same task."""
    assert make_overfit_task(seed=3).pairs == make_overfit_task(seed=3).pairs
    assert make_overfit_task(seed=3).pairs != make_overfit_task(seed=4).pairs


def test_overfit_task_rejects_bad_sizes():
    """Test impossible size combinations."""
    with pytest.raises(InputError):
        make_overfit_task(n_docs=4, n_queries=5)
    with pytest.raises(InputError):
        make_overfit_task(n_docs=4, n_queries=4, negatives=4)


def test_field_task_swapped_negative_has_same_bag_of_words():
    """Test the swapped negative differs from the positive only by field placement."""
    task = make_field_task(n_queries=20, candidates=4, seed=1)

    for q in range(20):
        positive, swapped = task.catalog[f"q{q:04d}a"], task.catalog[f"q{q:04d}b"]
        assert sorted(tokenize(flatten_document(positive))) == sorted(
            tokenize(flatten_document(swapped))
        )
        assert positive.instances(FieldName.BRAND) != swapped.instances(FieldName.BRAND)


def test_field_task_labels():
    """Test the query word is the positive's brand."""
    task = make_field_task(n_queries=10, candidates=5, seed=1)

    assert len(task.pairs) == 50
    for pair in task.pairs:
        brand = task.catalog[pair.doc_id].instances(FieldName.BRAND)
        assert (brand == (pair.query,)) == (pair.label == 1)


def test_field_task_rejects_bad_candidate_count():
    """Test candidate bounds."""
    with pytest.raises(InputError):
        make_field_task(candidates=1)
    with pytest.raises(InputError):
        make_field_task(candidates=27)


def test_task_save(tmp_path):
    """Test a task writes readable catalog and pair files."""
    task = make_field_task(n_queries=3, candidates=3, seed=0)
    paths = task.save(tmp_path)

    assert read_catalog(paths["catalog"]) == task.catalog
    assert read_pairs(paths["pairs"]) == task.pairs
