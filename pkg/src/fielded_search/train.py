"""
Binary cross-entropy training with Adam, linear warmup and linear decay.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from fielded_search.config import TrainConfig
from fielded_search.encoder import Grads, Params, zeros_like
from fielded_search.evaluation import Scorer, evaluate_run, label_groups
from fielded_search.models import FieldedDocument, InputError, LabeledPair
from fielded_search.smm import Matcher, PairInputs

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-7
TRAIN_LOG = "train_log.tsv"
HISTORY_FILE = "history.jsonl"


class NonFiniteGradientError(FloatingPointError):
    """A gradient tensor contains NaN or infinity."""

    def __init__(self, tensor: str, count: int) -> None:
        super().__init__(f"Non-finite gradient in '{tensor}' ({count} entries)")
        self.tensor = tensor


# --- loss -----------------------------------------------------------------


def bce_loss(s: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Elementwise -(y ln s + (1 - y) ln(1 - s)) with s clamped to [1e-7, 1 - 1e-7]."""
    s = np.clip(np.asarray(s, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = np.asarray(y, dtype=np.float64)
    return -(y * np.log(s) + (1.0 - y) * np.log(1.0 - s))


def bce_logit_grad(s: np.ndarray, y: np.ndarray) -> np.ndarray:
    """
    Derivative of the unclamped BCE with respect to the logit z, where s = sigmoid(z).

    Equals s - y; it does not vanish when s rounds to exactly 0 or 1.
    """
    return np.asarray(s, dtype=np.float64) - np.asarray(y, dtype=np.float64)


# --- schedule -------------------------------------------------------------


def warmup_steps(total_steps: int, fraction: float) -> int:
    return max(1, math.ceil(round(fraction * total_steps, 9)))


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """
    Learning rate at a step.

    Linear warmup from 0 to base_lr over the first ceil(warmup_fraction *
    total) steps, then linear decay to 0 at total_steps (or constant when
    lr_decay is "none").

    Raises:
        InputError: If total_steps is 0 or step is out of range
    """
    if total_steps <= 0:
        raise InputError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise InputError(f"step {step} outside [0, {total_steps}]")
    warmup = warmup_steps(total_steps, cfg.warmup_fraction)
    if step <= warmup:
        return cfg.base_lr * step / warmup
    if cfg.lr_decay == "none":
        return cfg.base_lr
    return cfg.base_lr * (total_steps - step) / (total_steps - warmup)


# --- optimizer ------------------------------------------------------------


@dataclass
class OptimizerState:
    """Adam moment accumulators shaped like the parameters."""

    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def create(cls, params: Params) -> "OptimizerState":
        return cls(m=zeros_like(params), v=zeros_like(params))


def adam_step(
    params: Params,
    grads: Grads,
    state: OptimizerState,
    lr: float,
    cfg: TrainConfig,
) -> None:
    """
    One Adam update in place with bias correction and decoupled weight decay.

    p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)

    Raises:
        NonFiniteGradientError: Before any parameter changes, naming the tensor
    """
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise InputError(f"Gradient shape {g.shape} does not match '{name}' {params[name].shape}")
        bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
        if bad:
            raise NonFiniteGradientError(name, bad)
    state.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    correction1 = 1.0 - b1 ** state.step
    correction2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / correction1) / (np.sqrt(v / correction2) + cfg.eps)
        p -= (lr * (update + cfg.weight_decay * p)).astype(p.dtype)


# --- fitting --------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    validation_ndcg: Optional[float]
    lr: float

    def to_dict(self) -> Dict:
        return {
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "validation_ndcg": self.validation_ndcg,
            "lr": self.lr,
        }


@dataclass
class FitResult:
    """Training history and the epoch whose parameters were kept."""

    history: List[EpochRecord] = field(default_factory=list)
    losses: List[float] = field(default_factory=list)
    best_epoch: int = 0
    best_validation_ndcg: Optional[float] = None
    total_steps: int = 0


def prepare_examples(
    model: Matcher,
    catalog: Mapping[str, FieldedDocument],
    pairs: Sequence[LabeledPair],
) -> List[Tuple[PairInputs, float]]:
    """
    Tokenize labeled pairs once for training.

    Raises:
        InputError: If a pair names a document missing from the catalog
    """
    examples = []
    for pair in pairs:
        doc = catalog.get(pair.doc_id)
        if doc is None:
            raise InputError(f"Pair ({pair.query!r}, {pair.doc_id}) names an unknown document")
        examples.append((model.prepare(pair.query, doc), float(pair.label)))
    return examples


def model_scorer(model: Matcher, catalog: Mapping[str, FieldedDocument]) -> Scorer:
    """Adapt a matcher to the evaluation scorer interface."""

    def score(query: str, doc_ids: Sequence[str]) -> Sequence[float]:
        return list(model.score_pairs([(query, catalog[d]) for d in doc_ids]))

    return score


def mean_loss(model: Matcher, examples: Sequence[Tuple[PairInputs, float]], batch_size: int = 64) -> float:
    """Eval-mode mean BCE over prepared examples."""
    if not examples:
        return 0.0
    probs = model.score_inputs([x for x, _ in examples], batch_size)
    return float(bce_loss(probs, np.array([y for _, y in examples])).mean())


def fit(
    model: Matcher,
    catalog: Mapping[str, FieldedDocument],
    train_pairs: Sequence[LabeledPair],
    validation_pairs: Sequence[LabeledPair],
    cfg: TrainConfig,
    out_dir: Optional[Path] = None,
) -> FitResult:
    """
    Train a matcher in place.

    Each epoch shuffles the training pairs with a seeded stream and takes
    one Adam step per mini-batch. After each epoch the model is scored on
    the validation queries in eval mode; the parameters with the best
    validation NDCG@k are restored at the end.

    Args:
        model: Model whose parameters are updated
        catalog: Documents referenced by the pairs
        train_pairs: Training pairs (binary labels)
        validation_pairs: Validation pairs; may be empty
        cfg: Training configuration
        out_dir: Optional directory for train_log.tsv and history.jsonl

    Returns:
        FitResult with per-epoch history and per-step losses

    Raises:
        InputError: If the training set is empty
    """
    cfg.validate()
    if not train_pairs:
        raise InputError("Training set is empty")
    examples = prepare_examples(model, catalog, train_pairs)
    validation_groups = label_groups(validation_pairs)
    if not validation_pairs:
        logger.warning("Validation set is empty; the last epoch's parameters are kept")

    shuffle_seq, dropout_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    dropout_rng = np.random.default_rng(dropout_seq)
    state = OptimizerState.create(model.params)
    steps_per_epoch = math.ceil(len(examples) / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    result = FitResult(total_steps=total_steps)
    best_params: Optional[Params] = None

    log_file = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(out_dir / TRAIN_LOG, "w")
        log_file.write("step\tlr\tloss\n")
    logger.info(
        f"Training on {len(examples)} pairs: {cfg.epochs} epochs x {steps_per_epoch} steps, "
        f"batch {cfg.batch_size}, base lr {cfg.base_lr}"
    )
    try:
        step = 0
        for epoch in range(1, cfg.epochs + 1):
            order = shuffle_rng.permutation(len(examples))
            epoch_losses = []
            lr = 0.0
            for start in range(0, len(order), cfg.batch_size):
                batch = [examples[i] for i in order[start:start + cfg.batch_size]]
                step += 1
                lr = lr_at(step, total_steps, cfg)
                labels = np.array([y for _, y in batch])
                probs = model.forward([x for x, _ in batch], dropout_rng)
                loss = float(bce_loss(probs, labels).mean())
                grads = model.backward_logits(bce_logit_grad(probs, labels) / len(batch))
                adam_step(model.params, grads, state, lr, cfg)
                epoch_losses.append(loss)
                result.losses.append(loss)
                if log_file is not None:
                    log_file.write(f"{step}\t{lr:.6e}\t{loss:.6f}\n")

            ndcg = None
            if validation_groups:
                report = evaluate_run(model_scorer(model, catalog), validation_groups, (cfg.eval_k,), "validation")
                ndcg = report.means[f"NDCG@{cfg.eval_k}"]
            record = EpochRecord(epoch, float(np.mean(epoch_losses)), ndcg, lr)
            result.history.append(record)
            ndcg_text = f"{ndcg:.4f}" if ndcg is not None else "n/a"
            logger.info(f"Epoch {epoch}: train loss {record.train_loss:.4f}, validation NDCG@{cfg.eval_k} {ndcg_text}")

            if ndcg is not None and (result.best_validation_ndcg is None or ndcg > result.best_validation_ndcg):
                result.best_validation_ndcg = ndcg
                result.best_epoch = epoch
                best_params = {name: value.copy() for name, value in model.params.items()}
    finally:
        if log_file is not None:
            log_file.close()

    if best_params is not None:
        for name, value in best_params.items():
            model.params[name][...] = value
        logger.info(f"Kept parameters from epoch {result.best_epoch}")
    else:
        result.best_epoch = cfg.epochs

    if out_dir is not None:
        with open(out_dir / HISTORY_FILE, "w") as f:
            for record in result.history:
                f.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")
    return result
