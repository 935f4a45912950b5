"""
Tests for dpr_engine service.
"""

import math

import numpy as np
import pytest

from app.models.dataset import BiasedExample, DatasetKind, GenConfig
from app.models.network import ClassifierModel
from app.models.training import SamplingTable, TrainSchedule
from app.services import seeding
from app.services.biased_data import generate_colored
from app.services.dpr_engine import (
    TableSampler,
    build_alias_table,
    compute_sampling_table,
    disagreement_prob,
    disagreement_probs,
    estimate_marginal_disagreement,
    oracle_weights,
    run_dpr,
    sample_minibatch,
    table_from_disagreement,
    train_biased,
    train_debiased,
    train_erm,
    train_reweighted,
    weighted_group_objective,
)
from app.services.errors import (
    ConsistencyError,
    DegenerateTableError,
    InconclusiveError,
    ParameterError,
    ShapeError,
    TrainingError,
)
from app.services.nn_core import ce_loss_and_grad, init_model, mlp_for, models_equal, predict_logits, zeros_model
from tests.conftest import make_dataset


def schedule(**kwargs) -> TrainSchedule:
    defaults = dict(
        biased_iters=0,
        debiased_iters=0,
        batch_size=16,
        hidden_width=8,
        lr_decay_period=None,
        augment=False,
        learning_rate=0.05,
    )
    defaults.update(kwargs)
    return TrainSchedule(**defaults)


def small_colored(rho: float = 0.01, n: int = 2000, seed: int = 0):
    return generate_colored(GenConfig(kind=DatasetKind.COLORED, rho=rho, image_size=8), n, seed)


def kl_divergence(freq: np.ndarray, probs: np.ndarray) -> float:
    mask = freq > 0
    return float(np.sum(freq[mask] * np.log(freq[mask] / probs[mask])))


class TestDisagreement:
    """Tests for disagreement_prob and estimate_marginal_disagreement."""

    def test_uniform_model(self):
        """All-zero logits with K=10 give 0.9."""
        model = zeros_model([3, 10])
        example = BiasedExample(features=np.ones(3), y=4, bias_labels=(4,), aligned=(True,))
        assert disagreement_prob(model, example) == pytest.approx(0.9, abs=1e-15)

    def test_high_temperature_flattens(self):
        """tau = 1e6 brings any model close to 1 - 1/K."""
        model = init_model([5, 8, 10], seed=1)
        example = BiasedExample(features=np.linspace(0, 1, 5), y=2, bias_labels=(2,), aligned=(True,))
        assert disagreement_prob(model, example, tau=1e6) == pytest.approx(0.9, abs=1e-4)

    def test_scalar_evaluation(self):
        """Logits [2, 1, 0] with y=0 give 1 - e^2 / (e^2 + e + 1)."""
        model = ClassifierModel(layers=[(np.eye(3), np.zeros(3))])
        example = BiasedExample(features=np.array([2.0, 1.0, 0.0]), y=0, bias_labels=(0,), aligned=(True,))
        expected = 1.0 - math.exp(2) / (math.exp(2) + math.exp(1) + 1.0)
        assert disagreement_prob(model, example) == pytest.approx(expected, abs=1e-15)

    def test_marginal_uniform_model(self):
        """The untrained all-zero model gives a marginal of 0.9."""
        ds = make_dataset(np.arange(30) % 10, np.arange(30) % 10, num_classes=10)
        assert estimate_marginal_disagreement(zeros_model([1, 10]), ds) == pytest.approx(0.9, abs=1e-15)

    def test_marginal_matches_two_pass_mean(self):
        """The batched mean agrees with a per-example loop."""
        ds = small_colored(rho=0.3, n=300)
        model = mlp_for(ds.feature_dim, 10, 8, seed=5)
        streamed = math.fsum(disagreement_prob(model, ds[i]) for i in range(len(ds))) / len(ds)
        assert abs(estimate_marginal_disagreement(model, ds) - streamed) <= 1e-12

    def test_marginal_empty(self):
        """An empty dataset raises ParameterError."""
        ds = make_dataset([0], [0]).subset(np.array([], dtype=np.int64))
        with pytest.raises(ParameterError):
            estimate_marginal_disagreement(zeros_model([1, 2]), ds)


class TestSamplingTable:
    """Tests for table construction and validation."""

    def test_two_entries(self):
        """Disagreements (0.1, 0.9) give probs (0.1, 0.9)."""
        table = table_from_disagreement(np.array([0.1, 0.9]))
        assert np.allclose(table.probs, [0.1, 0.9], atol=1e-15)
        assert table.marginal == pytest.approx(0.5)

    def test_uniform(self):
        """Equal disagreements give 1/n each."""
        table = table_from_disagreement(np.full(8, 0.3))
        assert np.allclose(table.probs, 1 / 8)

    def test_marginal_of_two(self):
        """Disagreements {0.2, 0.8} have marginal 0.5."""
        assert table_from_disagreement(np.array([0.2, 0.8])).marginal == pytest.approx(0.5, abs=1e-15)

    def test_degenerate(self):
        """A perfectly confident correct model raises DegenerateTableError."""
        with pytest.raises(DegenerateTableError):
            table_from_disagreement(np.full(5, 1e-12))

    def test_validate_rejects_unnormalized(self):
        """Probabilities that do not sum to 1 fail validation."""
        table = SamplingTable(probs=np.array([0.5, 0.6]), per_example_disagreement=np.array([0.5, 0.6]), marginal=0.55)
        with pytest.raises(ConsistencyError, match="sum"):
            table.validate()

    def test_validate_rejects_non_proportional(self):
        """Probabilities must be proportional to disagreement."""
        table = SamplingTable(probs=np.array([0.5, 0.5]), per_example_disagreement=np.array([0.1, 0.9]), marginal=0.5)
        with pytest.raises(ConsistencyError, match="proportional"):
            table.validate()

    def test_sums_to_one_for_trained_tables(self):
        """A table from a random model is a distribution proportional to disagreement."""
        ds = small_colored(rho=0.2, n=500)
        table = compute_sampling_table(mlp_for(ds.feature_dim, 10, 8, seed=3), ds)
        assert abs(table.probs.sum() - 1.0) <= 1e-9
        assert np.allclose(table.probs * table.per_example_disagreement.sum(), table.per_example_disagreement)

    def test_large_temperature_is_uniform(self):
        """At tau = 1e6 the table is within 1e-3 of uniform."""
        ds = small_colored(rho=0.2, n=400)
        table = compute_sampling_table(init_model([ds.feature_dim, 8, 10], seed=2), ds, tau=1e6)
        assert np.max(np.abs(table.probs - 1 / len(ds))) < 1e-3

    def test_reweighting_weights_sum_to_n(self):
        """n * probs sums to n."""
        table = table_from_disagreement(np.random.default_rng(0).uniform(0.01, 1.0, size=200))
        assert abs(table.dataset_weights().sum() - 200) <= 1e-6


class TestSampleMinibatch:
    """Tests for sample_minibatch and the samplers."""

    def test_point_mass(self):
        """A point mass on index 7 draws 7 every time."""
        d = np.zeros(10)
        d[7] = 0.5
        table = table_from_disagreement(d)
        ds = make_dataset(np.zeros(10), np.zeros(10))
        for method in ("cdf", "alias"):
            batch = sample_minibatch(table, ds, 50, np.random.default_rng(0), TableSampler(table, method))
            assert batch.indices.tolist() == [7] * 50
            assert np.all(batch.features[:, 0] == 7.0)

    def test_uniform_frequencies(self):
        """Uniform probs give frequencies within 5 std of 1/n."""
        n, draws = 20, 100_000
        table = table_from_disagreement(np.full(n, 0.4))
        ds = make_dataset(np.zeros(n), np.zeros(n))
        batch = sample_minibatch(table, ds, draws, np.random.default_rng(1))
        freq = np.bincount(batch.indices, minlength=n) / draws
        std = math.sqrt((1 / n) * (1 - 1 / n) / draws)
        assert np.all(np.abs(freq - 1 / n) <= 5 * std)

    def test_two_entries(self):
        """probs (0.1, 0.9) draw index 1 with frequency 0.9 +- 0.005."""
        table = table_from_disagreement(np.array([0.1, 0.9]))
        for method in ("cdf", "alias"):
            sampler = TableSampler(table, method)
            indices = sampler.draw(np.random.default_rng(2), 100_000)
            assert abs(indices.mean() - 0.9) <= 0.005

    def test_kl_on_hundred_entry_table(self):
        """10^6 draws from a 100-entry table have KL below 1e-4."""
        probs_source = np.random.default_rng(3).uniform(0.05, 1.0, size=100)
        table = table_from_disagreement(probs_source)
        for method in ("cdf", "alias"):
            indices = TableSampler(table, method).draw(np.random.default_rng(4), 1_000_000)
            freq = np.bincount(indices, minlength=100) / 1_000_000
            assert kl_divergence(freq, table.probs) < 1e-4

    def test_alias_table_reconstructs_probs(self):
        """Column acceptance and aliases reproduce the distribution exactly."""
        probs = np.array([0.05, 0.15, 0.3, 0.5])
        accept, alias = build_alias_table(probs)
        rebuilt = accept / 4
        for i in range(4):
            rebuilt[alias[i]] += (1 - accept[i]) / 4
        assert np.allclose(rebuilt, probs, atol=1e-12)

    def test_length_mismatch(self):
        """A table for another dataset raises ConsistencyError."""
        table = table_from_disagreement(np.full(3, 0.5))
        ds = make_dataset(np.zeros(4), np.zeros(4))
        with pytest.raises(ConsistencyError):
            sample_minibatch(table, ds, 2, np.random.default_rng(0))

    def test_unknown_sampler(self):
        """Unknown sampling methods raise ParameterError."""
        with pytest.raises(ParameterError, match="sampler"):
            TableSampler(table_from_disagreement(np.full(3, 0.5)), "reservoir")


class TestOracleObjective:
    """Tests for oracle_weights and weighted_group_objective."""

    def test_four_examples(self):
        """Oracle weights on 2 aligned + 2 conflicting equal the conflicting mean loss."""
        ds = make_dataset([0, 1, 0, 1], [0, 1, 1, 0], features=np.array([[0.1, 0.2], [0.3, -0.5], [1.0, 0.0], [-0.2, 0.7]]))
        model = init_model([2, 2], seed=6)
        losses, _ = ce_loss_and_grad(predict_logits(model, ds.features), ds.y)

        value = weighted_group_objective(model, ds, oracle_weights(ds))

        assert abs(value - losses[2:].mean()) <= 1e-12

    def test_random_tiny_datasets(self):
        """On 20 random tiny datasets where the aligned loss is lower, the objective is the max group loss."""
        rng = np.random.default_rng(11)
        checked = 0
        attempt = 0
        while checked < 20:
            attempt += 1
            n = int(rng.integers(2, 9))
            y = rng.integers(0, 3, size=n)
            bias = np.where(rng.random(n) < 0.5, y, (y + 1) % 3)
            if bias[0] == y[0]:
                bias[0] = (y[0] + 1) % 3
            ds = make_dataset(y, bias, features=rng.normal(size=(n, 4)), num_classes=3)
            model = init_model([4, 5, 3], seed=attempt)
            losses, _ = ce_loss_and_grad(predict_logits(model, ds.features), ds.y)
            conflicting = ds.conflicting
            if conflicting.all():
                continue
            aligned_loss, conflicting_loss = losses[~conflicting].mean(), losses[conflicting].mean()
            if not aligned_loss < conflicting_loss:
                continue

            value = weighted_group_objective(model, ds, oracle_weights(ds))
            assert abs(value - max(aligned_loss, conflicting_loss)) <= 1e-12
            checked += 1

    def test_uniform_weights_give_average(self):
        """Weights 1/n give the average loss."""
        ds = make_dataset([0, 1, 1], [0, 0, 1], features=np.array([[0.5], [1.5], [-1.0]]))
        model = init_model([1, 2], seed=0)
        losses, _ = ce_loss_and_grad(predict_logits(model, ds.features), ds.y)
        assert weighted_group_objective(model, ds, np.full(3, 1 / 3)) == pytest.approx(losses.mean(), abs=1e-12)

    def test_all_conflicting_gives_average(self):
        """With every example conflicting the oracle objective is the average loss."""
        ds = make_dataset([0, 1, 0], [1, 0, 1], features=np.array([[0.5], [1.5], [-1.0]]))
        model = init_model([1, 2], seed=0)
        losses, _ = ce_loss_and_grad(predict_logits(model, ds.features), ds.y)
        assert weighted_group_objective(model, ds, oracle_weights(ds)) == pytest.approx(losses.mean(), abs=1e-12)

    def test_no_conflicting(self):
        """Oracle weights need at least one conflicting example."""
        with pytest.raises(InconclusiveError):
            oracle_weights(make_dataset([0, 1], [0, 1]))

    def test_length_mismatch(self):
        """Weights must match the dataset size."""
        ds = make_dataset([0, 1], [0, 1])
        with pytest.raises(ConsistencyError, match="2 examples"):
            weighted_group_objective(zeros_model([1, 2]), ds, np.ones(3))

    def test_scalar_weights(self):
        """A 0-d weight array raises ConsistencyError rather than IndexError."""
        ds = make_dataset([0, 1], [0, 1])
        with pytest.raises(ConsistencyError, match="vector"):
            weighted_group_objective(zeros_model([1, 2]), ds, np.float64(0.5))


class TestTraining:
    """Tests for the training modes."""

    def test_zero_biased_iterations_returns_init(self):
        """T_b = 0 returns the freshly initialized model."""
        ds = small_colored(n=200)
        model, log = train_biased(ds, schedule(), seed=3)
        expected = mlp_for(ds.feature_dim, 10, 8, seeding.derive_seed(3, seeding.STREAM_BIASED_INIT))
        assert models_equal(model, expected)
        assert log.entries == []

    def test_zero_debiased_iterations_copies_biased(self):
        """With init enabled and T_d = 0 the debiased model equals the biased one."""
        ds = small_colored(n=200)
        biased, _ = train_biased(ds, schedule(biased_iters=5), seed=1)
        table = compute_sampling_table(biased, ds)
        debiased, _ = train_debiased(ds, table, biased, schedule(), seed=1)
        assert models_equal(debiased, biased)
        assert debiased is not biased

    def test_init_shape_mismatch(self):
        """A biased model of another architecture cannot initialize the debiased one."""
        ds = small_colored(n=100)
        other = mlp_for(ds.feature_dim, 10, 4, seed=0)
        table = table_from_disagreement(np.full(len(ds), 0.5))
        with pytest.raises(ShapeError, match="do not match"):
            train_debiased(ds, table, other, schedule(debiased_iters=1), seed=0)

    def test_erm_is_deterministic(self):
        """Identical seeds and schedules give bitwise identical models."""
        ds = small_colored(n=300)
        a, _ = train_erm(ds, schedule(debiased_iters=20), seed=4)
        b, _ = train_erm(ds, schedule(debiased_iters=20), seed=4)
        assert models_equal(a, b)

    def test_training_log(self):
        """Log rows are written every log_every steps plus the last one."""
        ds = small_colored(n=300)
        _, log = train_erm(ds, schedule(debiased_iters=25, log_every=10), seed=0)
        frame = log.to_frame()
        assert list(frame.columns) == ["step", "phase", "loss", "lr"]
        assert frame["step"].tolist() == [0, 10, 20, 24]
        assert set(frame["phase"]) == {"erm"}

    def test_non_finite_loss(self):
        """NaN features abort training with the step index."""
        ds = make_dataset([0, 1, 0, 1], [0, 1, 0, 1], features=np.full((4, 3), np.nan))
        with pytest.raises(TrainingError, match="step 0"):
            train_biased(ds, schedule(biased_iters=3, batch_size=2), seed=0)

    def test_second_phase_learning_rate(self):
        """Biased training uses learning_rate; later phases use debiased_learning_rate, or learning_rate when unset."""
        ds = small_colored(n=200)
        _, biased_log = train_biased(ds, schedule(biased_iters=2, debiased_learning_rate=0.01), seed=0)
        _, erm_log = train_erm(ds, schedule(debiased_iters=2, debiased_learning_rate=0.01), seed=0)
        _, shared_log = train_erm(ds, schedule(debiased_iters=2, debiased_learning_rate=None), seed=0)

        assert set(biased_log.to_frame()["lr"]) == {0.05}
        assert set(erm_log.to_frame()["lr"]) == {0.01}
        assert set(shared_log.to_frame()["lr"]) == {0.05}

    def test_reweighted_uniform_table_matches_erm(self):
        """With a uniform table and no init, reweighted training is bitwise the same as ERM."""
        ds = small_colored(n=256)
        biased, _ = train_biased(ds, schedule(biased_iters=3), seed=2)
        uniform = table_from_disagreement(np.full(len(ds), 0.5))
        assert np.array_equal(uniform.dataset_weights(), np.ones(len(ds)))

        plan = schedule(debiased_iters=15, log_every=1, init_from_biased=False)
        reweighted, reweighted_log = train_reweighted(ds, uniform, biased, plan, seed=2)
        erm, erm_log = train_erm(ds, plan, seed=2)

        assert models_equal(reweighted, erm)
        assert reweighted_log.to_frame()["loss"].tolist() == erm_log.to_frame()["loss"].tolist()
        assert set(reweighted_log.to_frame()["phase"]) == {"reweighted"}

    def test_biased_model_favors_aligned(self):
        """After GCE training on rho=1% data, aligned examples are fit better than conflicting ones."""
        ds = small_colored(rho=0.01, n=2000)
        model, _ = train_biased(ds, schedule(biased_iters=400, batch_size=64, hidden_width=32, learning_rate=0.1), seed=0)
        predictions = predict_logits(model, ds.features).argmax(axis=1)
        conflicting = ds.conflicting
        aligned_acc = (predictions[~conflicting] == ds.y[~conflicting]).mean()
        conflicting_acc = (predictions[conflicting] == ds.y[conflicting]).mean()
        assert aligned_acc > conflicting_acc

        d = disagreement_probs(model, ds.features, ds.y)
        assert d[conflicting].mean() > d[~conflicting].mean()

    def test_run_dpr_records_group_gap(self):
        """The debiased phase logs the per-epoch group-loss gap."""
        ds = small_colored(rho=0.05, n=400)
        result = run_dpr(ds, schedule(biased_iters=30, debiased_iters=30, batch_size=32), seed=0)
        phases = set(result.log.to_frame()["phase"])
        assert phases == {"biased", "debiased"}
        assert len(result.log.gaps) >= 1
        assert abs(result.table.probs.sum() - 1.0) <= 1e-9

    def test_select_best_on_validation(self):
        """Best-on-validation selection records the chosen step."""
        ds = small_colored(rho=0.05, n=400)
        val = small_colored(rho=0.05, n=100, seed=1)
        _, log = train_erm(ds, schedule(debiased_iters=40, batch_size=32, select_best_on_val=True), seed=0, val=val)
        assert log.val_accuracy
        assert log.best_step in [step for step, _ in log.val_accuracy]
