"""
Ranking metrics, per-class breakdowns, ablation comparison and paired
significance testing.

Relevance labels are binary. Rankings order candidates by descending score
with ties broken by ascending doc_id, so every report is reproducible.
"""

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np
from scipy import stats

from fielded_search.models import InputError, LabeledPair, QueryClass, normalize_classes

logger = logging.getLogger(__name__)

DEFAULT_KS: Tuple[int, ...] = (1, 5)
SIGNIFICANCE_LEVEL = 0.05

# (query, candidate doc_ids) -> one score per candidate
Scorer = Callable[[str, Sequence[str]], Sequence[float]]
Groups = Mapping[str, Sequence[Tuple[str, int]]]


# --- metrics --------------------------------------------------------------


def dcg_at_k(labels: Sequence[int], k: int) -> float:
    """Sum of rel_i / log2(i + 1) over the first k ranks (i from 1)."""
    gains = np.asarray(labels, dtype=np.float64)[:k]
    if not gains.size:
        return 0.0
    discounts = np.log2(np.arange(2, gains.size + 2))
    return float(np.sum(gains / discounts))


def ndcg_at_k(labels: Sequence[int], k: int) -> float:
    """
    Normalized DCG at cutoff k for a ranked list of binary labels.

    Returns 0.0 when the list holds no relevant document.

    Raises:
        InputError: If k < 1
    """
    if k < 1:
        raise InputError(f"k must be >= 1, got {k}")
    ideal = dcg_at_k(sorted(labels, reverse=True), k)
    if ideal == 0.0:
        return 0.0
    return dcg_at_k(labels, k) / ideal


def average_precision(labels: Sequence[int]) -> float:
    """Mean of precision@i over the ranks i holding a relevant document."""
    hits = 0
    total = 0.0
    for i, label in enumerate(labels, start=1):
        if label:
            hits += 1
            total += hits / i
    return total / hits if hits else 0.0


def mean_average_precision(ranked: Sequence[Sequence[int]]) -> float:
    if not ranked:
        return 0.0
    return float(np.mean([average_precision(r) for r in ranked]))


def mrr(labels: Sequence[int]) -> float:
    """Reciprocal rank of the first relevant document, 0.0 if none."""
    for i, label in enumerate(labels, start=1):
        if label:
            return 1.0 / i
    return 0.0


def mean_reciprocal_rank(ranked: Sequence[Sequence[int]]) -> float:
    if not ranked:
        return 0.0
    return float(np.mean([mrr(r) for r in ranked]))


def metric_names(ks: Sequence[int] = DEFAULT_KS) -> List[str]:
    return [f"NDCG@{k}" for k in ks] + ["MAP", "MRR"]


def query_metrics(labels: Sequence[int], ks: Sequence[int] = DEFAULT_KS) -> Dict[str, float]:
    values = {f"NDCG@{k}": ndcg_at_k(labels, k) for k in ks}
    values["MAP"] = average_precision(labels)
    values["MRR"] = mrr(labels)
    return values


# --- ranking --------------------------------------------------------------


@dataclass(frozen=True)
class RankedList:
    """Candidates of one query in ranked order with aligned labels."""

    query: str
    doc_ids: Tuple[str, ...]
    labels: Tuple[int, ...]
    scores: Tuple[float, ...]


def rank_candidates(query: str, candidates: Sequence[Tuple[str, int]], scores: Sequence[float]) -> RankedList:
    """Order candidates by descending score, ties by ascending doc_id."""
    if len(scores) != len(candidates):
        raise InputError(f"Got {len(scores)} scores for {len(candidates)} candidates of '{query}'")
    order = sorted(range(len(candidates)), key=lambda i: (-float(scores[i]), candidates[i][0]))
    return RankedList(
        query=query,
        doc_ids=tuple(candidates[i][0] for i in order),
        labels=tuple(int(candidates[i][1]) for i in order),
        scores=tuple(float(scores[i]) for i in order),
    )


def label_groups(pairs: Sequence[LabeledPair]) -> Dict[str, List[Tuple[str, int]]]:
    """query -> [(doc_id, label)] in first-seen order."""
    groups: Dict[str, List[Tuple[str, int]]] = {}
    for pair in pairs:
        groups.setdefault(pair.query, []).append((pair.doc_id, pair.label))
    return groups


# --- reports --------------------------------------------------------------


@dataclass
class TTestResult:
    """Two-tailed paired t-test outcome."""

    t: float
    p: float
    df: int
    degenerate: bool = False

    @property
    def significant(self) -> bool:
        return self.p < SIGNIFICANCE_LEVEL

    def to_dict(self) -> Dict:
        return {"t": self.t, "p": self.p, "df": self.df, "degenerate": self.degenerate}


@dataclass
class MetricsReport:
    """Per-query metric values of one model and their macro averages."""

    name: str
    metrics: List[str]
    per_query: Dict[str, Dict[str, float]] = field(default_factory=dict)
    rankings: Dict[str, RankedList] = field(default_factory=dict)
    ttests: Dict[str, TTestResult] = field(default_factory=dict)

    @property
    def num_queries(self) -> int:
        return len(self.per_query)

    @property
    def queries(self) -> List[str]:
        return sorted(self.per_query)

    def values(self, metric: str) -> List[float]:
        """Per-query values of one metric in sorted query order."""
        return [self.per_query[q][metric] for q in self.queries]

    @property
    def means(self) -> Dict[str, float]:
        if not self.per_query:
            return {m: 0.0 for m in self.metrics}
        return {m: float(np.mean(self.values(m))) for m in self.metrics}

    def subset(self, queries: Sequence[str], name: Optional[str] = None) -> "MetricsReport":
        return MetricsReport(
            name=name or self.name,
            metrics=list(self.metrics),
            per_query={q: self.per_query[q] for q in queries},
            rankings={q: self.rankings[q] for q in queries if q in self.rankings},
        )

    def to_dict(self) -> Dict:
        return {
            "model": self.name,
            "queries": self.num_queries,
            "means": self.means,
            "ttests": {m: r.to_dict() for m, r in self.ttests.items()},
        }


def evaluate_rankings(name: str, rankings: Sequence[RankedList], ks: Sequence[int] = DEFAULT_KS) -> MetricsReport:
    report = MetricsReport(name=name, metrics=metric_names(ks))
    for ranked in rankings:
        report.per_query[ranked.query] = query_metrics(ranked.labels, ks)
        report.rankings[ranked.query] = ranked
    return report


def evaluate_run(
    scorer: Scorer,
    groups: Groups,
    ks: Sequence[int] = DEFAULT_KS,
    name: str = "model",
    threads: int = 1,
) -> MetricsReport:
    """
    Rank every query's candidates with `scorer` and compute all metrics.

    Args:
        scorer: Callable returning one score per candidate doc_id
        groups: query -> [(doc_id, label), ...]
        ks: NDCG cutoffs
        name: Model name carried into tables
        threads: Worker threads for scoring; results are reduced in query order

    Returns:
        MetricsReport with macro-averaged metrics
    """
    queries = []
    for query in sorted(groups):
        if len(groups[query]) < 2:
            logger.warning(f"Query '{query}' has a single candidate; excluded from evaluation")
            continue
        queries.append(query)

    def rank(query: str) -> RankedList:
        candidates = list(groups[query])
        return rank_candidates(query, candidates, scorer(query, [d for d, _ in candidates]))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rankings = list(pool.map(rank, queries))
    else:
        rankings = [rank(q) for q in queries]
    report = evaluate_rankings(name, rankings, ks)
    logger.debug(f"{name}: evaluated {report.num_queries} queries")
    return report


def class_breakdown(
    report: MetricsReport,
    classes: Mapping[str, Set[QueryClass]],
) -> Dict[QueryClass, MetricsReport]:
    """
    Split a report by query class.

    Queries without an annotation fall into AllOthers; a query with several
    classes contributes to each of them. Classes with no query are omitted.
    """
    members: Dict[QueryClass, List[str]] = {c: [] for c in QueryClass}
    for query in report.queries:
        for cls in normalize_classes(list(classes.get(query, ()))):
            members[cls].append(query)
    breakdown = {}
    for cls in QueryClass:
        if not members[cls]:
            logger.warning(f"No evaluated query in class {cls.value}; row omitted")
            continue
        breakdown[cls] = report.subset(members[cls])
    return breakdown


# --- significance ---------------------------------------------------------


def paired_ttest(a: Sequence[float], b: Sequence[float]) -> TTestResult:
    """
    Two-tailed paired Student's t-test on per-query differences a - b.

    All-zero differences give t = 0, p = 1. Constant nonzero differences give
    an infinite t with p = 0 and the `degenerate` flag set.

    Raises:
        InputError: If the samples differ in length or hold fewer than 2 values
    """
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape:
        raise InputError(f"Paired samples differ in length: {x.size} vs {y.size}")
    n = x.size
    if n < 2:
        raise InputError("Paired t-test needs at least 2 pairs")
    diffs = x - y
    df = n - 1
    mean = float(diffs.mean())
    if not np.any(diffs):
        return TTestResult(t=0.0, p=1.0, df=df)
    sd = float(diffs.std(ddof=1))
    if sd == 0.0:
        return TTestResult(t=math.copysign(math.inf, mean), p=0.0, df=df, degenerate=True)
    t = mean / (sd / math.sqrt(n))
    p = float(2.0 * stats.t.sf(abs(t), df))
    return TTestResult(t=float(t), p=min(p, 1.0), df=df)


def compare_reports(baseline: MetricsReport, candidate: MetricsReport) -> Dict[str, TTestResult]:
    """
    Paired t-tests per metric between two reports over the same queries.

    Raises:
        InputError: If the reports cover different query sets
    """
    if baseline.queries != candidate.queries:
        raise InputError(
            f"Reports '{baseline.name}' and '{candidate.name}' cover different test queries"
        )
    return {m: paired_ttest(candidate.values(m), baseline.values(m)) for m in candidate.metrics}


@dataclass
class AblationResult:
    """Baseline and candidate reports with per-metric significance."""

    baseline: MetricsReport
    candidate: MetricsReport
    dataset: str = ""

    @property
    def ttests(self) -> Dict[str, TTestResult]:
        return self.candidate.ttests


def run_ablation(
    candidate: Scorer,
    baseline: Scorer,
    groups: Groups,
    ks: Sequence[int] = DEFAULT_KS,
    names: Tuple[str, str] = ("Ours", "DB"),
    dataset: str = "",
    threads: int = 1,
) -> AblationResult:
    """
    Evaluate two scorers on the same test groups and test every metric.

    Args:
        candidate: The fielded model's scorer
        baseline: The flat model's scorer
        groups: Shared test candidates
        names: (candidate name, baseline name)
    """
    ours = evaluate_run(candidate, groups, ks, names[0], threads)
    theirs = evaluate_run(baseline, groups, ks, names[1], threads)
    ours.ttests = compare_reports(theirs, ours)
    return AblationResult(baseline=theirs, candidate=ours, dataset=dataset)


# --- formatting -----------------------------------------------------------


def _fmt(value: float) -> str:
    return f"{value:.4f}"


def format_table(reports: Sequence[MetricsReport]) -> str:
    """Tab-separated table: one row per model with mean metrics."""
    if not reports:
        return ""
    metrics = reports[0].metrics
    lines = ["\t".join(["model"] + metrics + ["queries"])]
    for report in reports:
        means = report.means
        lines.append("\t".join([report.name] + [_fmt(means[m]) for m in metrics] + [str(report.num_queries)]))
    return "\n".join(lines) + "\n"


def format_class_table(breakdowns: Mapping[str, Mapping[QueryClass, MetricsReport]]) -> str:
    """
    Class-by-model table: class, #queries, then each metric for every model.

    Args:
        breakdowns: model name -> class_breakdown() result
    """
    names = list(breakdowns)
    if not names:
        return ""
    first = breakdowns[names[0]]
    metrics = next(iter(first.values())).metrics if first else metric_names()
    header = ["class", "queries"] + [f"{name} {m}" for m in metrics for name in names]
    lines = ["\t".join(header)]
    for cls in QueryClass:
        if cls not in first:
            continue
        row = [cls.value, str(first[cls].num_queries)]
        for m in metrics:
            for name in names:
                report = breakdowns[name].get(cls)
                row.append(_fmt(report.means[m]) if report is not None else "-")
        lines.append("\t".join(row))
    return "\n".join(lines) + "\n"


def format_ablation_table(results: Sequence[AblationResult]) -> str:
    """
    Ablation table with two model rows per dataset.

    A candidate value carries `*` when its paired t-test is significant.
    The best value of a column within a dataset is shown as **x** only when
    strictly higher than the other row.
    """
    if not results:
        return ""
    metrics = results[0].candidate.metrics
    lines = ["\t".join(["dataset", "model"] + metrics)]
    for result in results:
        rows = [result.baseline, result.candidate]
        means = [r.means for r in rows]
        for i, report in enumerate(rows):
            cells = []
            for m in metrics:
                text = _fmt(means[i][m])
                other = means[1 - i][m]
                if report is result.candidate and m in result.ttests and result.ttests[m].significant:
                    text += "*"
                if round(means[i][m], 4) > round(other, 4):
                    text = f"**{text}**"
                cells.append(text)
            lines.append("\t".join([result.dataset or "-", report.name] + cells))
    return "\n".join(lines) + "\n"


def report_records(report: MetricsReport) -> Iterator[str]:
    """Line-delimited JSON: one record per query, then a summary record."""
    for query in report.queries:
        yield json.dumps({"model": report.name, "query": query, **report.per_query[query]}, sort_keys=True)
    yield json.dumps({"model": report.name, "summary": report.to_dict()}, sort_keys=True)
