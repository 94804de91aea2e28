"""Tests for ranking metrics, reports and significance testing."""

import itertools
import json
import math

import numpy as np
import pytest
from scipy import stats

from fielded_search.evaluation import (
    TTestResult,
    average_precision,
    class_breakdown,
    compare_reports,
    dcg_at_k,
    evaluate_rankings,
    evaluate_run,
    format_ablation_table,
    format_class_table,
    format_table,
    label_groups,
    mean_average_precision,
    mean_reciprocal_rank,
    metric_names,
    mrr,
    ndcg_at_k,
    paired_ttest,
    rank_candidates,
    report_records,
    run_ablation,
)
from fielded_search.models import InputError, LabeledPair, QueryClass


def brute_force_ndcg(labels, k):
    dcg = sum(rel / math.log2(i + 2) for i, rel in enumerate(labels[:k]))
    ideal_labels = sorted(labels, reverse=True)
    ideal = sum(rel / math.log2(i + 2) for i, rel in enumerate(ideal_labels[:k]))
    return dcg / ideal if ideal else 0.0


def brute_force_ap(labels):
    relevant = [i for i, rel in enumerate(labels) if rel]
    if not relevant:
        return 0.0
    return sum(sum(labels[: i + 1]) / (i + 1) for i in relevant) / len(relevant)


def table_scorer(table):
    """Scorer backed by a {(query, doc_id): score} dictionary."""
    return lambda query, doc_ids: [table[(query, d)] for d in doc_ids]


@pytest.fixture
def groups():
    return {
        "oak door": [("A", 1), ("B", 0), ("C", 1)],
        "red lamp": [("A", 0), ("B", 1), ("C", 0)],
        "brass tap": [("A", 0), ("B", 0), ("C", 1)],
    }


def test_reference_values():
    """Test metrics on a worked example."""
    labels = [1, 0, 1, 0]

    assert ndcg_at_k(labels, 5) == pytest.approx(0.91972, abs=1e-5)
    assert average_precision(labels) == pytest.approx(0.83333, abs=1e-5)
    assert mrr([0, 0, 1]) == pytest.approx(1 / 3)
    assert ndcg_at_k([0, 1], 1) == 0.0
    assert dcg_at_k([1, 1], 2) == pytest.approx(1 + 1 / math.log2(3))


def test_no_relevant_documents():
    """Test lists without a relevant document score zero."""
    assert ndcg_at_k([0, 0, 0], 5) == 0.0
    assert average_precision([0, 0]) == 0.0
    assert mrr([0, 0]) == 0.0


def test_ndcg_rejects_bad_cutoff():
    """Test k must be positive."""
    with pytest.raises(InputError):
        ndcg_at_k([1, 0], 0)


def test_metrics_against_brute_force():
    """Test metrics on random label lists against direct formulas."""
    rng = np.random.default_rng(0)
    for _ in range(200):
        labels = rng.integers(0, 2, size=int(rng.integers(1, 12))).tolist()
        k = int(rng.integers(1, 8))

        assert ndcg_at_k(labels, k) == pytest.approx(brute_force_ndcg(labels, k), abs=1e-12)
        assert average_precision(labels) == pytest.approx(brute_force_ap(labels), abs=1e-12)
        assert 0.0 <= ndcg_at_k(labels, k) <= 1.0


def test_dcg_grows_with_cutoff():
    """Test DCG never drops as the cutoff deepens, while NDCG may."""
    rng = np.random.default_rng(1)
    for _ in range(100):
        labels = rng.integers(0, 2, size=int(rng.integers(1, 12))).tolist()
        values = [dcg_at_k(labels, k) for k in range(1, len(labels) + 2)]
        assert values == sorted(values)

    assert ndcg_at_k([1, 0, 1], 1) == 1.0
    assert ndcg_at_k([1, 0, 1], 3) < ndcg_at_k([1, 0, 1], 1)


def test_mean_metrics():
    """Test macro averages over queries."""
    ranked = [[1, 0], [0, 1]]
    assert mean_reciprocal_rank(ranked) == pytest.approx(0.75)
    assert mean_average_precision(ranked) == pytest.approx(0.75)
    assert mean_reciprocal_rank([]) == 0.0


def test_random_ranking_expected_mrr():
    """Test uniformly random ranking of 1 relevant among 4 candidates."""
    labels = [1, 0, 0, 0]
    permutations = list(itertools.permutations(labels))
    expected = np.mean([mrr(list(p)) for p in permutations])

    assert expected == pytest.approx((1 + 1 / 2 + 1 / 3 + 1 / 4) / 4)
    assert expected == pytest.approx(0.5208, abs=1e-4)


def test_metric_names():
    """Test report column order."""
    assert metric_names() == ["NDCG@1", "NDCG@5", "MAP", "MRR"]
    assert metric_names((10,)) == ["NDCG@10", "MAP", "MRR"]


def test_rank_candidates_tie_break():
    """Test descending score with ascending doc_id on ties."""
    ranked = rank_candidates("q", [("B", 1), ("A", 0), ("C", 0)], [0.5, 0.5, 0.9])

    assert ranked.doc_ids == ("C", "A", "B")
    assert ranked.labels == (0, 0, 1)
    with pytest.raises(InputError):
        rank_candidates("q", [("A", 1)], [0.1, 0.2])


def test_evaluate_run_perfect_scorer(groups):
    """Test an oracle scorer gets perfect metrics."""
    oracle = {(q, d): float(label) for q, cands in groups.items() for d, label in cands}
    report = evaluate_run(table_scorer(oracle), groups)

    assert report.num_queries == 3
    assert report.means == {"NDCG@1": 1.0, "NDCG@5": 1.0, "MAP": 1.0, "MRR": 1.0}


def test_evaluate_run_threads_match_serial(groups):
    """Test threaded scoring gives the same report."""
    rng = np.random.default_rng(1)
    table = {(q, d): float(rng.random()) for q, cands in groups.items() for d, _ in cands}

    serial = evaluate_run(table_scorer(table), groups)
    threaded = evaluate_run(table_scorer(table), groups, threads=3)
    assert serial.per_query == threaded.per_query


def test_evaluate_run_is_rank_invariant(groups):
    """Test a monotone transform of scores leaves metrics unchanged."""
    rng = np.random.default_rng(2)
    table = {(q, d): float(rng.normal()) for q, cands in groups.items() for d, _ in cands}
    transformed = {key: math.exp(3 * value) + 7 for key, value in table.items()}

    assert evaluate_run(table_scorer(table), groups).means == evaluate_run(
        table_scorer(transformed), groups
    ).means


def test_single_candidate_queries_are_excluded(groups):
    """Test a query with one candidate is left out of the report."""
    groups = dict(groups, lonely=[("A", 1)])
    table = {(q, d): 0.0 for q, cands in groups.items() for d, _ in cands}

    assert "lonely" not in evaluate_run(table_scorer(table), groups).per_query


def test_label_groups_order():
    """Test grouping keeps candidate order."""
    pairs = [LabeledPair("a", "P2", 0), LabeledPair("a", "P1", 1), LabeledPair("b", "P1", 0)]
    assert label_groups(pairs) == {"a": [("P2", 0), ("P1", 1)], "b": [("P1", 0)]}


def test_paired_ttest_reference():
    """Test the t statistic on differences [0.1, -0.1, 0.2, 0.0, 0.3]."""
    a = [0.6, 0.4, 0.7, 0.5, 0.8]
    b = [0.5, 0.5, 0.5, 0.5, 0.5]
    result = paired_ttest(a, b)

    assert result.t == pytest.approx(math.sqrt(2), abs=1e-5)
    assert result.df == 4
    reference = stats.ttest_rel(a, b)
    assert result.t == pytest.approx(reference.statistic)
    assert result.p == pytest.approx(reference.pvalue)
    assert not result.significant


def test_paired_ttest_random_against_scipy():
    """Test random samples against scipy's paired test."""
    rng = np.random.default_rng(3)
    for _ in range(20):
        a = rng.random(15)
        b = a + rng.normal(0.05, 0.1, 15)
        result = paired_ttest(a, b)
        reference = stats.ttest_rel(a, b)
        assert result.t == pytest.approx(reference.statistic)
        assert result.p == pytest.approx(reference.pvalue)


def test_paired_ttest_degenerate_cases():
    """Test identical samples and constant differences."""
    same = paired_ttest([0.1, 0.2, 0.3], [0.1, 0.2, 0.3])
    assert (same.t, same.p, same.degenerate) == (0.0, 1.0, False)

    constant = paired_ttest([0.5, 0.5, 0.5], [0.25, 0.25, 0.25])
    assert constant.t == math.inf
    assert constant.p == 0.0
    assert constant.degenerate

    with pytest.raises(InputError):
        paired_ttest([0.1], [0.2])
    with pytest.raises(InputError):
        paired_ttest([0.1, 0.2], [0.2])


def test_ttest_result_to_dict():
    """Test significance flag and serialization."""
    result = TTestResult(t=2.5, p=0.03, df=9)
    assert result.significant
    assert result.to_dict() == {"t": 2.5, "p": 0.03, "df": 9, "degenerate": False}


def test_same_model_ablation_has_p_one(groups):
    """Test comparing a scorer with itself."""
    rng = np.random.default_rng(4)
    table = {(q, d): float(rng.random()) for q, cands in groups.items() for d, _ in cands}
    scorer = table_scorer(table)
    result = run_ablation(scorer, scorer, groups, dataset="toy")

    assert result.candidate.means == result.baseline.means
    assert all(t.p == 1.0 for t in result.ttests.values())
    assert result.dataset == "toy"


def test_compare_reports_needs_same_queries(groups):
    """Test reports over different query sets are rejected."""
    oracle = {(q, d): float(label) for q, cands in groups.items() for d, label in cands}
    full = evaluate_run(table_scorer(oracle), groups)
    partial = full.subset(["oak door", "red lamp"])

    with pytest.raises(InputError):
        compare_reports(full, partial)


def test_class_breakdown(groups):
    """Test per-class subsets, multi-class queries and AllOthers."""
    oracle = {(q, d): float(label) for q, cands in groups.items() for d, label in cands}
    report = evaluate_run(table_scorer(oracle), groups)
    classes = {
        "oak door": {QueryClass.MATERIAL},
        "red lamp": {QueryClass.COLOR_FINISH, QueryClass.MATERIAL},
    }
    breakdown = class_breakdown(report, classes)

    assert breakdown[QueryClass.MATERIAL].num_queries == 2
    assert breakdown[QueryClass.COLOR_FINISH].queries == ["red lamp"]
    assert breakdown[QueryClass.ALL_OTHERS].queries == ["brass tap"]
    assert QueryClass.UNIT not in breakdown


def test_format_table(groups):
    """Test the model table layout."""
    oracle = {(q, d): float(label) for q, cands in groups.items() for d, label in cands}
    report = evaluate_run(table_scorer(oracle), groups, name="bm25")
    lines = format_table([report]).splitlines()

    assert lines[0] == "model\tNDCG@1\tNDCG@5\tMAP\tMRR\tqueries"
    assert lines[1] == "bm25\t1.0000\t1.0000\t1.0000\t1.0000\t3"


def test_format_class_table(groups):
    """Test class rows for two models."""
    oracle = {(q, d): float(label) for q, cands in groups.items() for d, label in cands}
    report = evaluate_run(table_scorer(oracle), groups, name="ours")
    classes = {"oak door": {QueryClass.MATERIAL}}
    table = format_class_table({
        "ours": class_breakdown(report, classes),
        "db": class_breakdown(report.subset(report.queries, "db"), classes),
    })
    lines = table.splitlines()

    assert lines[0].startswith("class\tqueries\tours NDCG@1\tdb NDCG@1")
    assert lines[1].startswith("Material\t1\t")


def test_format_ablation_table_marks(groups):
    """Test bold for the strictly better row and no marks on ties."""
    oracle = {(q, d): float(label) for q, cands in groups.items() for d, label in cands}
    reversed_scores = {key: -value for key, value in oracle.items()}
    result = run_ablation(table_scorer(oracle), table_scorer(reversed_scores), groups, dataset="toy")
    lines = format_ablation_table([result]).splitlines()

    assert lines[0] == "dataset\tmodel\tNDCG@1\tNDCG@5\tMAP\tMRR"
    baseline_row, candidate_row = lines[1].split("\t"), lines[2].split("\t")
    assert baseline_row[:2] == ["toy", "DB"]
    assert candidate_row[1] == "Ours"
    assert candidate_row[2].startswith("**1.0000")
    assert "**" not in "".join(baseline_row)

    tie = run_ablation(table_scorer(oracle), table_scorer(oracle), groups)
    assert "**" not in format_ablation_table([tie])
    assert "*" not in format_ablation_table([tie])


def test_report_records(groups):
    """Test one JSON record per query plus a summary."""
    oracle = {(q, d): float(label) for q, cands in groups.items() for d, label in cands}
    report = evaluate_rankings(
        "m", [rank_candidates(q, c, table_scorer(oracle)(q, [d for d, _ in c])) for q, c in groups.items()]
    )
    records = [json.loads(line) for line in report_records(report)]

    assert len(records) == 4
    assert records[0]["query"] == "brass tap"
    assert records[-1]["summary"]["queries"] == 3
