"""
Disagreement-probability based resampling.

Biased-model training with GCE, disagreement probabilities, the sampling
table, resampled debiased training (plus the reweighted variant and plain
ERM used as baselines), and the oracle-weighted group objective.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from app.models.dataset import BiasedDataset, BiasedExample
from app.models.network import ClassifierModel, OptimizerState
from app.models.training import GapEntry, SamplingTable, TrainingLog, TrainSchedule
from app.services import seeding
from app.services.biased_data import augment_batch
from app.services.errors import (
    ConsistencyError,
    DegenerateTableError,
    InconclusiveError,
    ParameterError,
    ShapeError,
    TrainingError,
)
from app.services.nn_core import (
    backward,
    ce_loss_and_grad,
    copy_model,
    forward,
    loss_and_grad,
    mlp_for,
    predict,
    predict_logits,
    sgd_step,
    softmax_with_temperature,
)

logger = logging.getLogger(__name__)

DEGENERATE_DISAGREEMENT = 1e-9


# ============================================================
# Disagreement probabilities and the sampling table
# ============================================================


def disagreement_probs(
    model: ClassifierModel,
    features: np.ndarray,
    y: np.ndarray,
    tau: float = 1.0,
) -> np.ndarray:
    """1 - p_bias(y | x) for every row, with the softmax at temperature tau."""
    probs = softmax_with_temperature(predict_logits(model, features), tau)
    p_y = probs[np.arange(len(y)), y]
    return np.clip(1.0 - p_y, 0.0, 1.0)


def disagreement_prob(model: ClassifierModel, example: BiasedExample, tau: float = 1.0) -> float:
    """Probability that the biased model's prediction disagrees with the label."""
    probs = softmax_with_temperature(forward(model, example.features), tau)
    return float(min(1.0, max(0.0, 1.0 - probs[example.y])))


def estimate_marginal_disagreement(model: ClassifierModel, train: BiasedDataset, tau: float = 1.0) -> float:
    """Mean disagreement probability over all training examples."""
    if len(train) == 0:
        raise ParameterError("Cannot estimate disagreement on an empty dataset")
    return float(disagreement_probs(model, train.features, train.y, tau).mean())


def table_from_disagreement(disagreement: np.ndarray, tau: float = 1.0) -> SamplingTable:
    """
    Normalize per-example disagreement into sampling probabilities.

    Raises:
        DegenerateTableError: Every disagreement is below 1e-9
    """
    d = np.asarray(disagreement, dtype=np.float64)
    if d.size == 0:
        raise ParameterError("Cannot build a sampling table for an empty dataset")
    if (d < DEGENERATE_DISAGREEMENT).all():
        raise DegenerateTableError(
            "Biased model is confident and correct on every example; "
            "the sampling table would be degenerate"
        )
    table = SamplingTable(
        probs=d / d.sum(),
        per_example_disagreement=d,
        marginal=float(d.mean()),
        tau=tau,
    )
    table.validate()
    return table


def compute_sampling_table(model: ClassifierModel, train: BiasedDataset, tau: float = 1.0) -> SamplingTable:
    """Sampling probabilities proportional to the biased model's disagreement."""
    table = table_from_disagreement(disagreement_probs(model, train.features, train.y, tau), tau)
    logger.info(
        "Sampling table: n=%d marginal disagreement=%.4f max prob=%.3g",
        len(table), table.marginal, float(table.probs.max()),
    )
    return table


def build_alias_table(probs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """
    Vose alias table for O(1) categorical draws.

    Returns:
        (acceptance probability per column, alias index per column)
    """
    n = probs.shape[0]
    scaled = probs * n / probs.sum()
    accept = np.ones(n)
    alias = np.arange(n)

    small = [i for i in range(n) if scaled[i] < 1.0]
    large = [i for i in range(n) if scaled[i] >= 1.0]
    while small and large:
        s = small.pop()
        g = large.pop()
        accept[s] = scaled[s]
        alias[s] = g
        scaled[g] -= 1.0 - scaled[s]
        if scaled[g] < 1.0:
            small.append(g)
        else:
            large.append(g)
    # Leftovers are 1 up to rounding
    for i in small + large:
        accept[i] = 1.0
        alias[i] = i
    return accept, alias


class TableSampler:
    """Draws indices with replacement from a sampling table."""

    def __init__(self, table: SamplingTable, method: str = "cdf"):
        self.n = len(table)
        self.method = method
        if method == "cdf":
            self._cdf = np.cumsum(table.probs)
        elif method == "alias":
            self._accept, self._alias = build_alias_table(table.probs)
        else:
            raise ParameterError(f"Unknown sampler '{method}', expected 'cdf' or 'alias'")

    def draw(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.method == "cdf":
            u = rng.random(size) * self._cdf[-1]
            return np.minimum(np.searchsorted(self._cdf, u, side="right"), self.n - 1)
        columns = rng.integers(0, self.n, size=size)
        keep = rng.random(size) < self._accept[columns]
        return np.where(keep, columns, self._alias[columns])


@dataclass
class Minibatch:
    indices: np.ndarray
    features: np.ndarray
    y: np.ndarray


def sample_minibatch(
    table: SamplingTable,
    train: BiasedDataset,
    batch_size: int,
    rng: np.random.Generator,
    sampler: Optional[TableSampler] = None,
) -> Minibatch:
    """
    Draw batch_size examples with replacement according to the table.

    Args:
        table: Sampling table over train
        train: Dataset the table was built for
        batch_size: Number of draws
        rng: Random generator (advanced)
        sampler: Prebuilt sampler for the table (built on the fly if omitted)

    Raises:
        ConsistencyError: Table length differs from the dataset size
    """
    if len(table) != len(train):
        raise ConsistencyError(f"Sampling table has {len(table)} entries for {len(train)} examples")
    sampler = sampler or TableSampler(table)
    indices = sampler.draw(rng, batch_size)
    return Minibatch(indices=indices, features=train.features[indices], y=train.y[indices])


# ============================================================
# Oracle group objective
# ============================================================


def oracle_weights(train: BiasedDataset) -> np.ndarray:
    """
    r_i = (1/n) * p(b_c | x_i) / p(b_c) from the true conflict flags.

    Raises:
        InconclusiveError: No conflicting example exists
    """
    conflicting = train.conflicting.astype(np.float64)
    n = len(train)
    p_conflicting = conflicting.sum() / n if n else 0.0
    if p_conflicting == 0.0:
        raise InconclusiveError("No bias-conflicting example; oracle weights undefined")
    return conflicting / (n * p_conflicting)


def weighted_group_objective(model: ClassifierModel, train: BiasedDataset, weights: np.ndarray) -> float:
    """Sum_i r_i * CE(f(x_i), y_i)."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim != 1:
        raise ConsistencyError(f"Weights must be a vector, got shape {weights.shape}")
    if weights.shape[0] != len(train):
        raise ConsistencyError(f"{weights.shape[0]} weights for {len(train)} examples")
    losses, _ = ce_loss_and_grad(predict_logits(model, train.features), train.y)
    return float(np.dot(weights, losses))


# ============================================================
# Training loop
# ============================================================


def _fresh_model(train: BiasedDataset, schedule: TrainSchedule, seed: int) -> ClassifierModel:
    return mlp_for(train.feature_dim, train.num_classes, schedule.hidden_width, seed)


def _optimizer(model: ClassifierModel, schedule: TrainSchedule, phase: str) -> OptimizerState:
    learning_rate = schedule.learning_rate
    if phase != "biased" and schedule.debiased_learning_rate is not None:
        learning_rate = schedule.debiased_learning_rate
    return OptimizerState.for_model(
        model,
        learning_rate=learning_rate,
        momentum=schedule.momentum,
        weight_decay=schedule.weight_decay,
        lr_decay_factor=schedule.lr_decay_factor,
        lr_decay_period=schedule.lr_decay_period,
    )


def _group_gap(model: ClassifierModel, train: BiasedDataset) -> Optional[tuple[float, float]]:
    losses, _ = ce_loss_and_grad(predict_logits(model, train.features), train.y)
    conflicting = train.conflicting
    if conflicting.all() or not conflicting.any():
        return None
    return float(losses[~conflicting].mean()), float(losses[conflicting].mean())


def _train_loop(
    model: ClassifierModel,
    train: BiasedDataset,
    schedule: TrainSchedule,
    iterations: int,
    phase: str,
    draw_indices: Callable[[np.random.Generator, int], np.ndarray],
    batch_rng: np.random.Generator,
    augment_rng: np.random.Generator,
    loss_kind: str = "ce",
    weights: Optional[np.ndarray] = None,
    augment: bool = False,
    monitor_gap: bool = False,
    val: Optional[BiasedDataset] = None,
) -> tuple[ClassifierModel, TrainingLog]:
    """
    Minibatch momentum SGD shared by every training mode.

    The batch loss is the mean over the batch of (optionally weighted)
    per-example losses.

    Raises:
        TrainingError: Non-finite loss or gradient, with the step index
    """
    log = TrainingLog()
    if iterations == 0:
        return model, log

    if augment and train.image_shape is None:
        logger.warning("[%s] features are not images; augmentation disabled", phase)
        augment = False

    state = _optimizer(model, schedule, phase)
    steps_per_epoch = max(1, math.ceil(len(train) / schedule.batch_size))
    best_acc, best_model = -1.0, None

    for step in range(iterations):
        idx = draw_indices(batch_rng, schedule.batch_size)
        x = train.features[idx]
        if augment:
            x = augment_batch(
                x, train.image_shape, augment_rng,
                jitter=schedule.jitter_strength,
                max_rotation_deg=schedule.max_rotation_deg,
                resize_crop_scale=schedule.resize_crop_scale,
            )

        logits, cache = forward(model, x, return_activations=True)
        losses, dlogits = loss_and_grad(logits, train.y[idx], loss_kind, schedule.q)
        if weights is not None:
            w = weights[idx]
            losses = losses * w
            dlogits *= w[:, None]
        loss = float(losses.mean())
        if not math.isfinite(loss):
            raise TrainingError(f"Non-finite {phase} loss", step)

        grads = backward(model, cache, dlogits / len(idx))
        sgd_step(model, grads, state, step)

        if step % schedule.log_every == 0 or step == iterations - 1:
            log.record(step, phase, loss, state.lr_at(step))
            logger.debug("[%s] step %d loss %.5f", phase, step, loss)

        if (step + 1) % steps_per_epoch == 0 or step == iterations - 1:
            epoch = (step + 1) // steps_per_epoch
            if monitor_gap:
                gap = _group_gap(model, train)
                if gap is not None:
                    log.gaps.append(GapEntry(epoch=epoch, step=step, loss_aligned=gap[0], loss_conflicting=gap[1]))
                    if gap[0] >= gap[1]:
                        logger.info(
                            "[%s] epoch %d: aligned loss %.4f >= conflicting loss %.4f",
                            phase, epoch, gap[0], gap[1],
                        )
            if val is not None and len(val):
                acc = float((predict(model, val.features) == val.y).mean())
                log.val_accuracy.append((step, acc))
                if schedule.select_best_on_val and acc > best_acc:
                    best_acc, best_model = acc, copy_model(model)
                    log.best_step = step

    logger.info("[%s] finished %d iterations, last loss %.5f", phase, iterations, loss)
    if schedule.select_best_on_val and best_model is not None:
        logger.info("[%s] restoring best validation model from step %d (acc %.4f)", phase, log.best_step, best_acc)
        return best_model, log
    return model, log


def _uniform(n: int) -> Callable[[np.random.Generator, int], np.ndarray]:
    return lambda rng, size: rng.integers(0, n, size=size)


def _check_table(table: SamplingTable, train: BiasedDataset) -> None:
    if len(table) != len(train):
        raise ConsistencyError(f"Sampling table has {len(table)} entries for {len(train)} examples")
    table.validate()


def _debiased_start(
    train: BiasedDataset,
    biased_model: ClassifierModel,
    schedule: TrainSchedule,
    seed: int,
) -> ClassifierModel:
    if not schedule.init_from_biased:
        return _fresh_model(train, schedule, seeding.derive_seed(seed, seeding.STREAM_DEBIASED_INIT))
    expected = [train.feature_dim, schedule.hidden_width, train.num_classes]
    if biased_model.layer_sizes != expected:
        raise ShapeError(
            f"Biased model layers {biased_model.layer_sizes} do not match debiased architecture {expected}"
        )
    return copy_model(biased_model)


# ============================================================
# Training modes
# ============================================================


def train_biased(
    train: BiasedDataset,
    schedule: TrainSchedule,
    seed: int,
    val: Optional[BiasedDataset] = None,
) -> tuple[ClassifierModel, TrainingLog]:
    """
    Train the intentionally biased model with GCE (CE when use_gce is off)
    on uniformly sampled minibatches.
    """
    model = _fresh_model(train, schedule, seeding.derive_seed(seed, seeding.STREAM_BIASED_INIT))
    return _train_loop(
        model, train, schedule,
        iterations=schedule.biased_iters,
        phase="biased",
        draw_indices=_uniform(len(train)),
        batch_rng=seeding.rng_for(seed, seeding.STREAM_BIASED_BATCHES),
        augment_rng=seeding.rng_for(seed, seeding.STREAM_AUGMENT, 0),
        loss_kind="gce" if schedule.use_gce else "ce",
        augment=schedule.augment_baselines,
        val=val,
    )


def train_debiased(
    train: BiasedDataset,
    table: SamplingTable,
    biased_model: ClassifierModel,
    schedule: TrainSchedule,
    seed: int,
    val: Optional[BiasedDataset] = None,
) -> tuple[ClassifierModel, TrainingLog]:
    """
    Train the debiased model with CE on minibatches drawn from the sampling table.

    The model starts as a copy of the biased model when init_from_biased is set,
    which puts training in the regime where the conflicting group has the
    higher loss.
    """
    _check_table(table, train)
    model = _debiased_start(train, biased_model, schedule, seed)
    sampler = TableSampler(table, schedule.sampler)
    return _train_loop(
        model, train, schedule,
        iterations=schedule.debiased_iters,
        phase="debiased",
        draw_indices=sampler.draw,
        batch_rng=seeding.rng_for(seed, seeding.STREAM_DEBIASED_BATCHES),
        augment_rng=seeding.rng_for(seed, seeding.STREAM_AUGMENT, 1),
        loss_kind="ce",
        augment=schedule.augment,
        monitor_gap=schedule.monitor_group_gap,
        val=val,
    )


def train_reweighted(
    train: BiasedDataset,
    table: SamplingTable,
    biased_model: ClassifierModel,
    schedule: TrainSchedule,
    seed: int,
    val: Optional[BiasedDataset] = None,
) -> tuple[ClassifierModel, TrainingLog]:
    """
    Same as train_debiased, but batches are uniform and each example's CE
    loss is weighted by n * probs[i].
    """
    _check_table(table, train)
    model = _debiased_start(train, biased_model, schedule, seed)
    return _train_loop(
        model, train, schedule,
        iterations=schedule.debiased_iters,
        phase="reweighted",
        draw_indices=_uniform(len(train)),
        batch_rng=seeding.rng_for(seed, seeding.STREAM_DEBIASED_BATCHES),
        augment_rng=seeding.rng_for(seed, seeding.STREAM_AUGMENT, 1),
        loss_kind="ce",
        weights=table.dataset_weights(),
        augment=schedule.augment,
        monitor_gap=schedule.monitor_group_gap,
        val=val,
    )


def train_erm(
    train: BiasedDataset,
    schedule: TrainSchedule,
    seed: int,
    val: Optional[BiasedDataset] = None,
) -> tuple[ClassifierModel, TrainingLog]:
    """Plain CE with uniform sampling from a fresh initialization, for debiased_iters steps."""
    model = _fresh_model(train, schedule, seeding.derive_seed(seed, seeding.STREAM_DEBIASED_INIT))
    return _train_loop(
        model, train, schedule,
        iterations=schedule.debiased_iters,
        phase="erm",
        draw_indices=_uniform(len(train)),
        batch_rng=seeding.rng_for(seed, seeding.STREAM_DEBIASED_BATCHES),
        augment_rng=seeding.rng_for(seed, seeding.STREAM_AUGMENT, 1),
        loss_kind="ce",
        augment=schedule.augment_baselines,
        val=val,
    )


@dataclass
class DPRResult:
    biased: ClassifierModel
    debiased: ClassifierModel
    table: SamplingTable
    log: TrainingLog


def run_dpr(
    train: BiasedDataset,
    schedule: TrainSchedule,
    seed: int,
    val: Optional[BiasedDataset] = None,
    reweight: bool = False,
) -> DPRResult:
    """Biased training, sampling table, then resampled (or reweighted) debiased training."""
    biased, log = train_biased(train, schedule, seed, val)
    table = compute_sampling_table(biased, train, schedule.tau)
    trainer = train_reweighted if reweight else train_debiased
    debiased, debiased_log = trainer(train, table, biased, schedule, seed, val)
    log.extend(debiased_log)
    return DPRResult(biased=biased, debiased=debiased, table=table, log=log)
