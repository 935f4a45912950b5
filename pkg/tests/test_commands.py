"""
End-to-end tests for the CLI subcommands on tiny configs.
"""

from pathlib import Path

import pandas as pd
import pytest

from app.main import EXIT_CONFIG_ERROR, EXIT_FAILED_CELL, EXIT_OK, build_parser, main, overrides_from_args
from app.services.checkpoint import save_checkpoint
from app.services.dataset_store import load_dataset
from app.services.nn_core import zeros_model
from app.services.reporting import BOUND_COLUMNS, METRICS_COLUMNS

TINY = """
[data]
image_size = 8
n_train = 200
n_test = 100
rho = 0.05

[train]
biased_iters = 10
debiased_iters = 10
batch_size = 16
hidden_width = 8
lr_decay_period = none
augment = false

[bounds]
population_per_group = 100
hoeffding_sizes = 10
hoeffding_trials = 1000

[run]
seeds = 0
"""

# 8 x 8 RGB images, 10 classes
FEATURE_DIM = 192


@pytest.fixture
def tiny_config(tmp_path) -> str:
    path = tmp_path / "tiny.ini"
    path.write_text(TINY, encoding="utf-8")
    return str(path)


def only(out: Path, pattern: str) -> Path:
    matches = sorted(out.rglob(pattern))
    assert len(matches) == 1, f"expected one {pattern} under {out}, found {matches}"
    return matches[0]


class TestArguments:
    """Tests for overrides_from_args."""

    def test_grid_for_ablate(self):
        """--q is a sweep grid under ablate."""
        args = build_parser().parse_args(["ablate", "--q", "0.3,0.5", "--sampling"])
        overrides = overrides_from_args(args)
        assert overrides["sweep"] == {"q": ["0.3", "0.5"], "sampling": True}

    def test_single_value_elsewhere(self):
        """--tau is a schedule value under run."""
        args = build_parser().parse_args(["run", "--tau", "1.1", "--no-gce", "--seeds", "1,2"])
        overrides = overrides_from_args(args)
        assert overrides["train"] == {"use_gce": False, "tau": "1.1"}
        assert overrides["run"] == {"seeds": ["1", "2"]}

    def test_idx_flags_switch_kind(self):
        """IDX paths select the colorized-idx kind."""
        args = build_parser().parse_args(["run", "--idx-images", "a.idx", "--idx-labels", "b.idx"])
        assert overrides_from_args(args)["data"]["kind"] == "colorized-idx"


class TestRun:
    """Tests for the run subcommand."""

    def test_writes_metrics(self, tiny_config, tmp_path):
        """One cell gives biased and debiased rows for all/aligned/conflicting."""
        out = tmp_path / "out"
        assert main(["run", "--config", tiny_config, "--out", str(out)]) == EXIT_OK

        metrics = pd.read_csv(only(out, "metrics.csv"))
        assert list(metrics.columns) == METRICS_COLUMNS
        assert len(metrics) == 6
        assert set(metrics["phase"]) == {"biased", "debiased"}
        assert set(metrics["status"]) == {"ok"}
        assert only(out, "summary.csv").exists()
        assert only(out, "training_log.csv").exists()
        assert len(list(out.rglob("*.dprm"))) == 2

    def test_rerun_is_byte_identical(self, tiny_config, tmp_path):
        """The same config and seeds reproduce metrics and summary byte for byte."""
        first, second = tmp_path / "a", tmp_path / "b"
        assert main(["run", "--config", tiny_config, "--out", str(first), "--mode", "erm"]) == EXIT_OK
        assert main(["run", "--config", tiny_config, "--out", str(second), "--mode", "erm"]) == EXIT_OK

        for name in ("metrics.csv", "summary.csv", "training_log.csv"):
            assert only(first, name).read_bytes() == only(second, name).read_bytes()

    def test_resampled_rerun_is_byte_identical(self, tiny_config, tmp_path):
        """Reruns in dpr mode draw the same table-sampled batches and reproduce every CSV."""
        first, second = tmp_path / "a", tmp_path / "b"
        for out in (first, second):
            assert main(["run", "--config", tiny_config, "--out", str(out), "--mode", "dpr"]) == EXIT_OK

        for name in ("metrics.csv", "summary.csv", "training_log.csv", "group_gap.csv"):
            assert only(first, name).read_bytes() == only(second, name).read_bytes()
        checkpoints = [sorted(out.rglob("*.dprm")) for out in (first, second)]
        assert len(checkpoints[0]) == 2
        assert [p.read_bytes() for p in checkpoints[0]] == [p.read_bytes() for p in checkpoints[1]]

    def test_failed_cell(self, tiny_config, tmp_path, monkeypatch):
        """A cell that raises becomes a failed row and exit code 1."""
        def explode(*args, **kwargs):
            raise RuntimeError("Non-finite debiased loss (step 3)")

        monkeypatch.setattr("app.services.experiment.run_dpr", explode)
        out = tmp_path / "out"
        assert main(["run", "--config", tiny_config, "--out", str(out)]) == EXIT_FAILED_CELL

        metrics = pd.read_csv(only(out, "metrics.csv"))
        assert metrics["status"].tolist() == ["failed"]
        assert "step 3" in metrics["error"][0]

    def test_missing_config(self, tmp_path):
        """A missing config file exits with code 2."""
        assert main(["run", "--config", str(tmp_path / "absent.ini")]) == EXIT_CONFIG_ERROR

    def test_invalid_flag_value(self, tiny_config, tmp_path):
        """Several --q values outside ablate exit with code 2."""
        assert main(["run", "--config", tiny_config, "--out", str(tmp_path), "--q", "0.3,0.5"]) == EXIT_CONFIG_ERROR


class TestAblate:
    """Tests for the ablate subcommand."""

    def test_sampling_axis(self, tiny_config, tmp_path):
        """The sampling axis compares resampling and reweighting."""
        out = tmp_path / "out"
        assert main(["ablate", "--config", tiny_config, "--out", str(out), "--sampling"]) == EXIT_OK

        metrics = pd.read_csv(only(out, "sampling_metrics.csv"))
        assert set(metrics["variant"]) == {"resample", "reweight"}
        assert set(metrics["phase"]) == {"biased", "debiased", "reweighted"}

    def test_q_grid(self, tiny_config, tmp_path):
        """Each q value is one variant."""
        out = tmp_path / "out"
        assert main(["ablate", "--config", tiny_config, "--out", str(out), "--q", "0.3,0.9"]) == EXIT_OK
        metrics = pd.read_csv(only(out, "q_metrics.csv"))
        assert set(metrics["variant"]) == {"q=0.3", "q=0.9"}

    def test_no_axis(self, tiny_config, tmp_path):
        """ablate without any axis exits with code 2."""
        assert main(["ablate", "--config", tiny_config, "--out", str(tmp_path)]) == EXIT_CONFIG_ERROR


class TestVerifyBounds:
    """Tests for the verify-bounds subcommand."""

    def test_uniform_checkpoint_holds(self, tiny_config, tmp_path):
        """A zero checkpoint gives |C| x |delta| x 2 rows, all holding."""
        checkpoint = save_checkpoint(zeros_model([FEATURE_DIM, 10]), str(tmp_path / "zero.dprm"))
        out = tmp_path / "out"

        code = main(["verify-bounds", "--config", tiny_config, "--out", str(out), "--checkpoint", str(checkpoint)])

        assert code == EXIT_OK
        bounds = pd.read_csv(only(out, "bounds.csv"))
        assert list(bounds.columns) == BOUND_COLUMNS
        assert len(bounds) == 1 * 2 * 2
        assert bounds["holds"].all()
        assert sorted(bounds["theorem"].unique().tolist()) == [1, 2]

        hoeffding = pd.read_csv(only(out, "hoeffding.csv"))
        assert len(hoeffding) == 3 * 2
        assert (hoeffding["violation_rate"] <= hoeffding["delta"]).all()

    def test_architecture_mismatch(self, tiny_config, tmp_path):
        """A checkpoint for other inputs exits with code 1."""
        checkpoint = save_checkpoint(zeros_model([5, 10]), str(tmp_path / "small.dprm"))
        code = main(["verify-bounds", "--config", tiny_config, "--out", str(tmp_path), "--checkpoint", str(checkpoint)])
        assert code == EXIT_FAILED_CELL


class TestGenerateAndDiagnose:
    """Tests for the generate and diagnose subcommands."""

    def test_generate(self, tiny_config, tmp_path):
        """Train/val/test files are written and reload with the configured sizes."""
        out = tmp_path / "out"
        assert main(["generate", "--config", tiny_config, "--out", str(out)]) == EXIT_OK

        train = load_dataset(str(only(out, "train_rho0.05_seed0.dprd")))
        val = load_dataset(str(only(out, "val_rho0.05_seed0.dprd")))
        test = load_dataset(str(only(out, "test_rho0.05_seed0.dprd")))
        assert (len(train), len(val), len(test)) == (180, 20, 100)
        assert test.rho == 0.9

    def test_diagnose(self, tiny_config, tmp_path):
        """Histogram and group-loss rows for the biased and random models."""
        out = tmp_path / "out"
        assert main(["diagnose", "--config", tiny_config, "--out", str(out)]) == EXIT_OK

        assumption = pd.read_csv(only(out, "assumption.csv"))
        assert assumption["model"].tolist() == ["biased", "random"]
        histogram = pd.read_csv(only(out, "disagreement_histogram.csv"))
        assert len(histogram) == 2 * 10
        assert histogram.loc[histogram["model"] == "biased", "aligned_count"].sum() + histogram.loc[
            histogram["model"] == "biased", "conflicting_count"
        ].sum() == 180
