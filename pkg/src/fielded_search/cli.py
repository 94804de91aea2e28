"""
Command-line interface for fielded-search.
"""

import functools
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Tuple

import click

from fielded_search import __version__
from fielded_search.config import RunConfig, load_bm25_params, load_config, parse_overrides
from fielded_search.lexindex import dump_postings, load_index
from fielded_search.models import FieldName, InputError
from fielded_search.pipeline import (
    CHECKPOINT_FILE,
    VOCAB_FILE,
    EvaluationPipeline,
    IngestPipeline,
    LexicalPipeline,
    NeuralPipeline,
    write_scores,
)

logger = logging.getLogger(__name__)

EXIT_INPUT_ERROR = 2
EXIT_INTERNAL_ERROR = 1
EXIT_INTERRUPTED = 130


def setup_logging(verbose: bool = False) -> None:
    """
    Configure logging for the application.

    Log records go to stderr; stdout carries tabular results.

    Args:
        verbose: Enable verbose (DEBUG) logging
    """
    level = logging.DEBUG if verbose else logging.INFO
    format_str = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

    logging.basicConfig(
        level=level,
        format=format_str,
        handlers=[
            logging.StreamHandler(sys.stderr),
        ],
        force=True,
    )


def log_banner(title: str, items: Dict[str, Any]) -> None:
    logger.info("=" * 60)
    logger.info(title)
    logger.info("=" * 60)
    for key, value in items.items():
        logger.info(f"{key + ':':<22} {value}")
    logger.info("=" * 60)


def common_options(func: Callable) -> Callable:
    """Options shared by every subcommand."""
    decorators = [
        click.option("--config", "config_file", type=click.Path(path_type=Path), default=None,
                     help="Path to a flat YAML config file"),
        click.option("--seed", type=int, default=None, help="Random seed (default: 13)"),
        click.option("--threads", type=int, default=None, help="Worker threads (1 = bitwise deterministic)"),
        click.option("--out-dir", type=click.Path(path_type=Path), default=None,
                     help="Output directory (default: $FIELDED_SEARCH_OUT_DIR or ./output)"),
        click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
                     help="Override a config key; repeatable"),
        click.option("--verbose", "-v", is_flag=True, help="Enable verbose logging"),
    ]
    for decorator in reversed(decorators):
        func = decorator(func)
    return func


def build_run_config(
    config_file: Optional[Path],
    seed: Optional[int],
    threads: Optional[int],
    out_dir: Optional[Path],
    overrides: Tuple[str, ...],
) -> RunConfig:
    """Defaults, then config file, then --set items, then dedicated flags."""
    flags = parse_overrides(overrides)
    if seed is not None:
        flags["seed"] = str(seed)
    if threads is not None:
        flags["threads"] = str(threads)
    if out_dir is not None:
        flags["out_dir"] = str(out_dir)
    config = load_config(config_file, flags)
    if config.threads < 1:
        raise InputError(f"--threads must be >= 1, got {config.threads}")
    return config


def run_command(func: Callable) -> Callable:
    """Set up logging and configuration, then map failures to exit codes."""

    @functools.wraps(func)
    def wrapper(
        config_file: Optional[Path],
        seed: Optional[int],
        threads: Optional[int],
        out_dir: Optional[Path],
        overrides: Tuple[str, ...],
        verbose: bool,
        **kwargs: Any,
    ) -> None:
        setup_logging(verbose)
        try:
            config = build_run_config(config_file, seed, threads, out_dir, overrides)
            func(config, **kwargs)
        except KeyboardInterrupt:
            logger.warning("Interrupted by user")
            sys.exit(EXIT_INTERRUPTED)
        except (InputError, FileNotFoundError) as e:
            logger.error(str(e))
            sys.exit(EXIT_INPUT_ERROR)
        except Exception as e:
            logger.error(f"Unexpected error: {e}", exc_info=verbose)
            sys.exit(EXIT_INTERNAL_ERROR)

    return wrapper


def emit(lines: Any, path: Path) -> None:
    """Write result lines to a file and echo them on stdout."""
    lines = list(lines)
    write_scores(lines, path)
    for line in lines:
        click.echo(line)


@click.group()
@click.version_option(version=__version__)
def cli() -> None:
    """Fielded product search: lexical baselines and a fielded neural matcher."""
    pass


@cli.command()
@click.option("--clicks", type=click.Path(path_type=Path), default=None,
              help="Click log: query<TAB>doc_id<TAB>clicks")
@click.option("--catalog", type=click.Path(path_type=Path), default=None,
              help="Catalog JSONL for the click log")
@click.option("--psr", type=click.Path(path_type=Path), default=None,
              help="Directory with the PSR CSV files")
@click.option("--synthetic", type=click.Choice(["overfit", "field"]), default=None,
              help="Generate a synthetic task instead of reading data")
@click.option("--queries", type=int, default=None, help="Query count for --synthetic")
@common_options
@run_command
def ingest(
    config: RunConfig,
    clicks: Optional[Path],
    catalog: Optional[Path],
    psr: Optional[Path],
    synthetic: Optional[str],
    queries: Optional[int],
) -> None:
    """Build the catalog and train/validation/test splits."""
    sources = [s for s in (clicks, psr, synthetic) if s is not None]
    if len(sources) != 1:
        raise InputError("Give exactly one of --clicks, --psr or --synthetic")
    log_banner("fielded-search - Ingest", {
        "Source": clicks or psr or f"synthetic:{synthetic}",
        "Click threshold": config.data.click_threshold,
        "Seed": config.seed,
        "Output": config.out_dir,
    })
    pipeline = IngestPipeline(config)
    if clicks is not None:
        if catalog is None:
            raise InputError("--clicks needs --catalog")
        info = pipeline.from_clicks(clicks, catalog)
    elif psr is not None:
        info = pipeline.from_psr(psr)
    else:
        assert synthetic is not None
        info = pipeline.from_synthetic(synthetic, queries)
    click.echo(info["stats_table"], nl=False)
    logger.info(f"Catalog written: {info['paths']['catalog']} ({info['products']} products)")


@cli.command()
@click.option("--catalog", type=click.Path(path_type=Path), required=True, help="Catalog JSONL")
@click.option("--tune", "tune_on", type=click.Path(path_type=Path), default=None,
              help="Validation pairs for tuning BM25/BM25F parameters")
@common_options
@run_command
def index(config: RunConfig, catalog: Path, tune_on: Optional[Path]) -> None:
    """Build the fielded inverted index."""
    info = LexicalPipeline(config).index(catalog, tune_on)
    logger.info(f"Index written: {info['index']} ({info['documents']} documents, {info['terms']} terms)")
    for scorer in ("bm25", "bm25f"):
        if f"{scorer}_params" in info:
            logger.info(
                f"{scorer} params: {info[f'{scorer}_params']} "
                f"(validation NDCG: {info[f'{scorer}_validation_ndcg']:.4f})"
            )


@cli.command("score-lexical")
@click.option("--index", "index_path", type=click.Path(path_type=Path), required=True)
@click.option("--pairs", type=click.Path(path_type=Path), required=True, help="Pairs TSV to score")
@click.option("--scorer", default="bm25", help="bm25 or bm25f")
@click.option("--params", type=click.Path(path_type=Path), default=None, help="Tuned parameter YAML")
@common_options
@run_command
def score_lexical(config: RunConfig, index_path: Path, pairs: Path, scorer: str, params: Optional[Path]) -> None:
    """Score pairs with BM25 or BM25F."""
    bm25_params = load_bm25_params(params) if params is not None else None
    lines = LexicalPipeline(config).score(index_path, pairs, scorer, bm25_params)
    emit(lines, config.out_dir / f"scores_{scorer}.tsv")


@cli.command()
@click.option("--catalog", type=click.Path(path_type=Path), required=True)
@click.option("--train", "train_path", type=click.Path(path_type=Path), required=True)
@click.option("--validation", type=click.Path(path_type=Path), default=None)
@click.option("--flat", is_flag=True, help="Train the flat-document variant")
@click.option("--no-match-features", is_flag=True, help="Zero the lexical match segment")
@common_options
@run_command
def train(
    config: RunConfig,
    catalog: Path,
    train_path: Path,
    validation: Optional[Path],
    flat: bool,
    no_match_features: bool,
) -> None:
    """Train a matcher with binary cross-entropy."""
    log_banner("fielded-search - Train", {
        "Model": "flat" if flat else "fielded",
        "Match features": not no_match_features,
        "d_model / layers": f"{config.encoder.d_model} / {config.encoder.n_layers}",
        "Epochs / batch": f"{config.train.epochs} / {config.train.batch_size}",
        "Base lr": config.train.base_lr,
        "Seed": config.seed,
        "Output": config.out_dir,
    })
    disabled = frozenset({"match"}) if no_match_features else frozenset()
    info = NeuralPipeline(config).train(catalog, train_path, validation, not flat, disabled)
    log_banner("Training Complete", {
        "Steps": info["steps"],
        "Best epoch": info["best_epoch"],
        "Final train loss": f"{info['final_loss']:.4f}",
        "Checkpoint": info["checkpoint"],
    })


@cli.command()
@click.option("--model-dir", type=click.Path(path_type=Path), required=True,
              help=f"Directory with {CHECKPOINT_FILE} and {VOCAB_FILE}")
@click.option("--catalog", type=click.Path(path_type=Path), required=True)
@click.option("--pairs", type=click.Path(path_type=Path), required=True)
@click.option("--no-match-features", is_flag=True, help="Zero the lexical match segment")
@common_options
@run_command
def score(config: RunConfig, model_dir: Path, catalog: Path, pairs: Path, no_match_features: bool) -> None:
    """Score pairs with a trained matcher."""
    disabled = frozenset({"match"}) if no_match_features else frozenset()
    lines = NeuralPipeline(config).score(
        model_dir / CHECKPOINT_FILE, model_dir / VOCAB_FILE, catalog, pairs, disabled
    )
    emit(lines, config.out_dir / "scores_model.tsv")


@cli.command()
@click.option("--scores", type=click.Path(path_type=Path), required=True)
@click.option("--pairs", type=click.Path(path_type=Path), required=True, help="Labeled pairs TSV")
@click.option("--baseline", type=click.Path(path_type=Path), default=None, help="Baseline score file")
@click.option("--classes", type=click.Path(path_type=Path), default=None, help="query<TAB>classes file")
@click.option("--k", "ks", type=int, multiple=True, default=(1, 5), show_default=True, help="NDCG cutoffs")
@click.option("--name", default="model", help="Row name for --scores")
@click.option("--baseline-name", default="baseline", help="Row name for --baseline")
@common_options
@run_command
def evaluate(
    config: RunConfig,
    scores: Path,
    pairs: Path,
    baseline: Optional[Path],
    classes: Optional[Path],
    ks: Tuple[int, ...],
    name: str,
    baseline_name: str,
) -> None:
    """Compute NDCG, MAP and MRR for a score file."""
    info = EvaluationPipeline(config).evaluate(scores, pairs, baseline, classes, ks, (name, baseline_name))
    click.echo(info["table"], nl=False)


@cli.command()
@click.option("--catalog", type=click.Path(path_type=Path), required=True)
@click.option("--train", "train_path", type=click.Path(path_type=Path), required=True)
@click.option("--validation", type=click.Path(path_type=Path), required=True)
@click.option("--test", "test_path", type=click.Path(path_type=Path), required=True)
@click.option("--runs", type=int, default=1, show_default=True, help="Seeded repetitions")
@click.option("--dataset", default="", help="Dataset label for the table")
@common_options
@run_command
def ablate(
    config: RunConfig,
    catalog: Path,
    train_path: Path,
    validation: Path,
    test_path: Path,
    runs: int,
    dataset: str,
) -> None:
    """Train fielded and flat models and compare them."""
    log_banner("fielded-search - Ablation", {
        "Runs": runs,
        "Seeds": f"{config.seed}..{config.seed + runs - 1}",
        "Epochs": config.train.epochs,
        "Output": config.out_dir,
    })
    info = NeuralPipeline(config).ablate(catalog, train_path, validation, test_path, runs, dataset)
    click.echo(info["table"], nl=False)
    logger.info(f"Fielded model wins on MAP in {info['fielded_map_wins']} of {runs} runs")


@cli.command("dump-postings")
@click.option("--index", "index_path", type=click.Path(path_type=Path), required=True)
@click.option("--field", "field_name", default=None, help="Restrict to one field")
@click.option("--term", default=None, help="Restrict to one (stemmed) term")
@common_options
@run_command
def dump_postings_cmd(config: RunConfig, index_path: Path, field_name: Optional[str], term: Optional[str]) -> None:
    """Print postings as field<TAB>term<TAB>doc_id:tf ..."""
    wanted = FieldName.parse(field_name).value if field_name is not None else None
    for line in dump_postings(load_index(index_path)):
        field_value, line_term, _ = line.split("\t", 2)
        if wanted is not None and field_value != wanted:
            continue
        if term is not None and line_term != term:
            continue
        click.echo(line)


def main() -> None:
    """Main entry point for the CLI."""
    cli()


if __name__ == "__main__":
    main()
