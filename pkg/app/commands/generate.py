"""
generate subcommand - write biased train and unbiased test sets as DPRD files.
"""

import logging
from pathlib import Path

from app.config import ExperimentConfig
from app.services.biased_data import empirical_conflict_ratio
from app.services.dataset_store import save_dataset
from app.services.experiment import build_datasets

logger = logging.getLogger(__name__)


def dataset_paths(out_dir: Path, rho: float, seed: int) -> dict[str, Path]:
    stem = f"rho{rho:g}_seed{seed}"
    return {
        "train": out_dir / f"train_{stem}.dprd",
        "val": out_dir / f"val_{stem}.dprd",
        "test": out_dir / f"test_{stem}.dprd",
    }


def cmd_generate(config: ExperimentConfig, out_dir: Path) -> list[Path]:
    """
    Generate every (rho, seed) dataset of the config.

    Args:
        config: Experiment config (data section and seeds are used)
        out_dir: Destination directory

    Returns:
        Paths of the written files
    """
    written = []
    for rho in config.data.rho:
        for seed in config.run.seeds:
            train, val, test = build_datasets(config.data, rho, seed)
            paths = dataset_paths(Path(out_dir), rho, seed)
            for name, dataset in (("train", train), ("val", val), ("test", test)):
                written.append(save_dataset(dataset, str(paths[name])))

            ratio = empirical_conflict_ratio(train)
            print(f"rho={rho:g} seed={seed}: n_train={len(train)} empirical conflict ratio={ratio:.5f}")
            logger.info("Wrote datasets for rho=%g seed=%d to %s", rho, seed, out_dir)
    return written
