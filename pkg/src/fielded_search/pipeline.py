"""
Pipeline orchestration: dataset ingestion, lexical baselines and the neural
matcher, each writing its artifacts under the run's output directory.
"""

import dataclasses
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from fielded_search.catalog import (
    Catalog,
    RecordError,
    attach_search_terms,
    assemble_field_text,
    build_click_dataset,
    dataset_stats,
    filter_documents,
    filter_queries,
    load_psr,
    parse_click_triples,
    read_catalog,
    read_pairs,
    read_query_classes,
    split_by_query,
    training_signal,
    write_catalog,
    write_pairs,
)
from fielded_search.config import Bm25Params, RunConfig, save_bm25_params
from fielded_search.evaluation import (
    AblationResult,
    MetricsReport,
    Scorer,
    class_breakdown,
    compare_reports,
    evaluate_run,
    format_ablation_table,
    format_class_table,
    format_table,
    label_groups,
    report_records,
    run_ablation,
)
from fielded_search.lexindex import (
    build_index,
    get_scorer,
    load_index,
    save_index,
    tune_params,
)
from fielded_search.models import FIELD_ORDER, DatasetStats, InputError, LabeledPair, group_by_query
from fielded_search.smm import Matcher, matcher_class
from fielded_search.synthetic import TASKS
from fielded_search.text import Vocab, analyze, build_vocab, tokenize
from fielded_search.train import FitResult, fit, model_scorer

logger = logging.getLogger(__name__)

SPLITS = ("train", "validation", "test")
CHECKPOINT_FILE = "model.ckpt"
VOCAB_FILE = "vocab.txt"
INDEX_FILE = "index.bin"


# --- score files ----------------------------------------------------------


def format_score_line(query: str, doc_id: str, score: float) -> str:
    return f"{query}\t{doc_id}\t{score:.6f}"


def write_scores(lines: Iterable[str], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for line in lines:
            f.write(line + "\n")


def read_scores(path: Path) -> Dict[Tuple[str, str], float]:
    """Read `query \\t doc_id \\t score` lines."""
    if not path.exists():
        raise FileNotFoundError(f"Score file not found: {path}")
    scores = {}
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            columns = line.split("\t")
            if len(columns) != 3:
                raise RecordError(line_number, f"expected 3 columns, got {len(columns)}")
            try:
                scores[(columns[0], columns[1])] = float(columns[2])
            except ValueError:
                raise RecordError(line_number, f"invalid score '{columns[2]}'") from None
    return scores


def lookup_scorer(scores: Mapping[Tuple[str, str], float]) -> Scorer:
    """Scorer backed by precomputed scores."""

    def score(query: str, doc_ids: Sequence[str]) -> Sequence[float]:
        missing = [d for d in doc_ids if (query, d) not in scores]
        if missing:
            raise InputError(f"No score for query '{query}' and documents {missing[:3]}")
        return [scores[(query, d)] for d in doc_ids]

    return score


def format_stats(stats: Sequence[DatasetStats]) -> str:
    lines = ["split\tentries\tunique_queries\tunique_products\trelevant\tnot_relevant"]
    for s in stats:
        lines.append(
            f"{s.split}\t{s.entries}\t{s.unique_queries}\t{s.unique_products}"
            f"\t{s.relevant_fraction:.4f}\t{s.not_relevant_fraction:.4f}"
        )
    return "\n".join(lines) + "\n"


def _write_text(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)
    return path


# --- ingestion ------------------------------------------------------------


class IngestPipeline:
    """Builds the catalog and train/validation/test pair files."""

    def __init__(self, config: RunConfig) -> None:
        self.config = config
        self.out_dir = config.out_dir

    def from_clicks(self, clicks_path: Path, catalog_path: Path) -> Dict:
        """
        Label click-log triples against a catalog and write the splits.

        Malformed lines are skipped and counted; the run aborts when they
        reach `max_malformed_fraction` of the input.

        Raises:
            InputError: On empty input or too many malformed records
        """
        if not clicks_path.exists():
            raise FileNotFoundError(f"Click log not found: {clicks_path}")
        catalog = read_catalog(catalog_path)
        errors: List[RecordError] = []
        with open(clicks_path, "r", encoding="utf-8") as f:
            triples = parse_click_triples(f, errors)
        total = len(triples) + len(errors)
        if total == 0:
            raise InputError(f"Click log {clicks_path} is empty")
        for error in errors[:10]:
            logger.warning(f"Skipped malformed record: {error}")
        if errors and len(errors) / total >= self.config.data.max_malformed_fraction:
            raise InputError(
                f"{len(errors)} of {total} click records are malformed "
                f"(limit {self.config.data.max_malformed_fraction:.0%})"
            )
        data = self.config.data
        pairs = build_click_dataset(
            triples, catalog, data.click_threshold, data.min_query_chars, data.min_fields
        )
        info = self._finish(catalog, pairs, from_clicks=True)
        info["malformed"] = len(errors)
        return info

    def from_psr(self, directory: Path) -> Dict:
        """Build the dataset from the public PSR CSV files."""
        catalog, pairs = load_psr(directory, self.config.data.psr_threshold)
        if not pairs:
            raise InputError(f"No PSR pairs found in {directory}")
        return self._finish(catalog, self._filter(pairs, catalog), from_clicks=False)

    def from_synthetic(self, task: str, n_queries: Optional[int] = None) -> Dict:
        if task not in TASKS:
            raise InputError(f"Unknown synthetic task '{task}'. Available: {sorted(TASKS)}")
        kwargs: Dict[str, int] = {"seed": self.config.seed}
        if n_queries is not None:
            kwargs["n_queries"] = n_queries
            if task == "overfit":
                kwargs["n_docs"] = max(n_queries, 4)
        generated = TASKS[task](**kwargs)
        return self._finish(generated.catalog, generated.pairs, from_clicks=False, search_terms=False)

    def _filter(self, pairs: Sequence[LabeledPair], catalog: Catalog) -> List[LabeledPair]:
        data = self.config.data
        kept = filter_documents(pairs, catalog, data.min_fields)
        retained = filter_queries(group_by_query(kept), data.min_query_chars)
        return [p for p in kept if p.query in retained]

    def _finish(
        self,
        catalog: Catalog,
        pairs: List[LabeledPair],
        from_clicks: bool,
        search_terms: bool = True,
    ) -> Dict:
        if not pairs:
            raise InputError("No labeled pairs survive the dataset filters")
        data = self.config.data
        train, validation, test = split_by_query(pairs, data.validation_size, data.test_size, self.config.seed)
        if search_terms:
            catalog = attach_search_terms(catalog, training_signal(train, from_clicks), data.search_terms_top_k)
        used = {p.doc_id for p in pairs}
        catalog = {doc_id: doc for doc_id, doc in catalog.items() if doc_id in used}

        paths = {"catalog": self.out_dir / "catalog.jsonl"}
        write_catalog(catalog, paths["catalog"])
        splits = dict(zip(SPLITS, (train, validation, test)))
        for name, split in splits.items():
            paths[name] = self.out_dir / f"{name}.tsv"
            write_pairs(split, paths[name])
        stats = [dataset_stats(name, split) for name, split in splits.items()]
        paths["stats"] = _write_text(self.out_dir / "stats.tsv", format_stats(stats))
        logger.info(f"Catalog: {len(catalog)} products; pairs: {len(pairs)}")
        return {
            "paths": {k: str(v) for k, v in paths.items()},
            "products": len(catalog),
            "stats": [s.to_dict() for s in stats],
            "stats_table": format_stats(stats),
        }


# --- lexical --------------------------------------------------------------


class LexicalPipeline:
    """BM25 and BM25F baselines over the fielded index."""

    def __init__(self, config: RunConfig) -> None:
        self.config = config
        self.out_dir = config.out_dir

    def index(self, catalog_path: Path, tune_on: Optional[Path] = None) -> Dict:
        """
        Build and save the index; optionally tune both scorers on validation pairs.

        Returns:
            Info dictionary with index statistics and written paths
        """
        index = build_index(read_catalog(catalog_path))
        index_path = self.out_dir / INDEX_FILE
        save_index(index, index_path)
        info: Dict = {
            "index": str(index_path),
            "documents": index.num_docs,
            "terms": len(index.df),
        }
        if tune_on is not None:
            groups = label_groups(read_pairs(tune_on))
            for scorer in ("bm25", "bm25f"):
                params, value = tune_params(index, groups, scorer, self.config.train.eval_k)
                path = self.out_dir / f"{scorer}_params.yaml"
                save_bm25_params(params, path)
                info[f"{scorer}_params"] = str(path)
                info[f"{scorer}_validation_ndcg"] = value
        return info

    def score(
        self,
        index_path: Path,
        pairs_path: Path,
        scorer: str = "bm25",
        params: Optional[Bm25Params] = None,
    ) -> List[str]:
        """Score every pair in input order; returns `query, doc_id, score` lines."""
        score_fn = get_scorer(scorer)
        index = load_index(index_path)
        params = params or Bm25Params()
        lines = []
        terms_cache: Dict[str, List[str]] = {}
        for pair in read_pairs(pairs_path):
            terms = terms_cache.setdefault(pair.query, analyze(pair.query))
            lines.append(format_score_line(pair.query, pair.doc_id, score_fn(index, terms, pair.doc_id, params)))
        return lines


# --- neural ---------------------------------------------------------------


def build_model_vocab(catalog: Catalog, pairs: Sequence[LabeledPair], min_freq: int = 1) -> Vocab:
    """Vocabulary over training queries and every field of the catalog."""
    tokens: List[str] = []
    for query in sorted({p.query for p in pairs}):
        tokens.extend(tokenize(query))
    for doc_id in sorted(catalog):
        for name in FIELD_ORDER:
            tokens.extend(tokenize(assemble_field_text(catalog[doc_id], name)))
    return build_vocab(tokens, min_freq)


class NeuralPipeline:
    """Training, scoring and ablation of the fielded and flat matchers."""

    def __init__(self, config: RunConfig) -> None:
        self.config = config
        self.out_dir = config.out_dir

    def train_model(
        self,
        catalog: Catalog,
        train: Sequence[LabeledPair],
        validation: Sequence[LabeledPair],
        run_dir: Path,
        fielded: bool = True,
        disabled: FrozenSet[str] = frozenset(),
        seed: Optional[int] = None,
    ) -> Tuple[Matcher, FitResult]:
        seed = self.config.seed if seed is None else seed
        vocab = build_model_vocab(catalog, train, self.config.data.min_freq)
        model = matcher_class(fielded).initialize(
            self.config.encoder, vocab, seed, disabled, self.config.data.min_fields
        )
        train_cfg = self.config.train
        if train_cfg.seed != seed:
            train_cfg = dataclasses.replace(train_cfg, seed=seed)
        result = fit(model, catalog, train, validation, train_cfg, run_dir)
        model.save(run_dir / CHECKPOINT_FILE, run_dir / VOCAB_FILE)
        return model, result

    def train(
        self,
        catalog_path: Path,
        train_path: Path,
        validation_path: Optional[Path] = None,
        fielded: bool = True,
        disabled: FrozenSet[str] = frozenset(),
    ) -> Dict:
        """Train one model and save its checkpoint, vocabulary and logs."""
        catalog = read_catalog(catalog_path)
        train = read_pairs(train_path)
        validation = read_pairs(validation_path) if validation_path is not None else []
        _, result = self.train_model(catalog, train, validation, self.out_dir, fielded, disabled)
        return {
            "checkpoint": str(self.out_dir / CHECKPOINT_FILE),
            "vocab": str(self.out_dir / VOCAB_FILE),
            "steps": result.total_steps,
            "best_epoch": result.best_epoch,
            "best_validation_ndcg": result.best_validation_ndcg,
            "final_loss": result.history[-1].train_loss,
        }

    def score(
        self,
        checkpoint: Path,
        vocab_path: Path,
        catalog_path: Path,
        pairs_path: Path,
        disabled: FrozenSet[str] = frozenset(),
    ) -> List[str]:
        """Score every pair in input order with a saved model."""
        model = Matcher.load(checkpoint, vocab_path, disabled, self.config.data.min_fields)
        catalog = read_catalog(catalog_path)
        pairs = read_pairs(pairs_path)
        missing = sorted({p.doc_id for p in pairs} - set(catalog))
        if missing:
            raise InputError(f"{len(missing)} scored documents are not in the catalog, e.g. {missing[0]}")
        scores = self._score_all(model, [(p.query, catalog[p.doc_id]) for p in pairs])
        return [format_score_line(p.query, p.doc_id, float(s)) for p, s in zip(pairs, scores)]

    def _score_all(self, model: Matcher, pairs: Sequence) -> np.ndarray:
        threads = max(1, self.config.threads)
        chunk = 64
        chunks = [pairs[i:i + chunk] for i in range(0, len(pairs), chunk)]
        if not chunks:
            return np.zeros(0)
        if threads == 1:
            parts = [model.score_pairs(c) for c in chunks]
        else:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                parts = list(pool.map(model.score_pairs, chunks))
        return np.concatenate(parts)

    def ablate(
        self,
        catalog_path: Path,
        train_path: Path,
        validation_path: Path,
        test_path: Path,
        runs: int = 1,
        dataset: str = "",
    ) -> Dict:
        """
        Train fielded and flat models under identical seeds and compare them
        on the test pairs, once per run with seeds seed, seed + 1, ...
        """
        if runs < 1:
            raise InputError("runs must be >= 1")
        catalog = read_catalog(catalog_path)
        train = read_pairs(train_path)
        validation = read_pairs(validation_path)
        groups = label_groups(read_pairs(test_path))
        if not groups:
            raise InputError(f"No test pairs in {test_path}")
        ks = (1, self.config.train.eval_k)
        results: List[AblationResult] = []
        for run in range(runs):
            seed = self.config.seed + run
            run_dir = self.out_dir / f"run{run}"
            fielded, _ = self.train_model(catalog, train, validation, run_dir / "fielded", True, seed=seed)
            flat, _ = self.train_model(catalog, train, validation, run_dir / "flat", False, seed=seed)
            label = dataset or "-"
            result = run_ablation(
                model_scorer(fielded, catalog),
                model_scorer(flat, catalog),
                groups,
                ks,
                dataset=f"{label} seed={seed}" if runs > 1 else label,
                threads=self.config.threads,
            )
            results.append(result)
            logger.info(
                f"Run {run} (seed {seed}): MAP fielded {result.candidate.means['MAP']:.4f}"
                f" vs flat {result.baseline.means['MAP']:.4f}"
            )
        table = format_ablation_table(results)
        table_path = _write_text(self.out_dir / "ablation.tsv", table)
        records = []
        for result in results:
            records.extend(report_records(result.baseline))
            records.extend(report_records(result.candidate))
        _write_text(self.out_dir / "ablation.jsonl", "\n".join(records) + "\n")
        wins = sum(r.candidate.means["MAP"] > r.baseline.means["MAP"] for r in results)
        return {
            "table": table,
            "table_path": str(table_path),
            "runs": runs,
            "fielded_map_wins": wins,
            "p_values": [{m: t.p for m, t in r.ttests.items()} for r in results],
        }


# --- evaluation -----------------------------------------------------------


class EvaluationPipeline:
    """Metrics reports from score files."""

    def __init__(self, config: RunConfig) -> None:
        self.config = config
        self.out_dir = config.out_dir

    def evaluate(
        self,
        scores_path: Path,
        pairs_path: Path,
        baseline_path: Optional[Path] = None,
        classes_path: Optional[Path] = None,
        ks: Sequence[int] = (1, 5),
        names: Tuple[str, str] = ("model", "baseline"),
    ) -> Dict:
        """
        Evaluate a score file, optionally against a baseline score file and
        per query class.
        """
        groups = label_groups(read_pairs(pairs_path))
        threads = self.config.threads
        report = evaluate_run(lookup_scorer(read_scores(scores_path)), groups, ks, names[0], threads)
        reports: List[MetricsReport] = [report]
        if baseline_path is not None:
            baseline = evaluate_run(lookup_scorer(read_scores(baseline_path)), groups, ks, names[1], threads)
            report.ttests = compare_reports(baseline, report)
            reports.append(baseline)
        table = format_table(reports)
        if report.ttests:
            table += "\n" + "\n".join(
                f"t-test {m}\tt={t.t:.4f}\tp={t.p:.4f}{' (degenerate)' if t.degenerate else ''}"
                for m, t in report.ttests.items()
            ) + "\n"
        paths = {"report": _write_text(self.out_dir / "report.tsv", table)}
        records = [line for r in reports for line in report_records(r)]
        paths["records"] = _write_text(self.out_dir / "report.jsonl", "\n".join(records) + "\n")
        if classes_path is not None:
            classes = read_query_classes(classes_path)
            breakdowns = {r.name: class_breakdown(r, classes) for r in reports}
            class_table = format_class_table(breakdowns)
            paths["classes"] = _write_text(self.out_dir / "classes.tsv", class_table)
            table += "\n" + class_table
        return {
            "table": table,
            "means": {r.name: r.means for r in reports},
            "paths": {k: str(v) for k, v in paths.items()},
        }
