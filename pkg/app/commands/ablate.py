"""
ablate subcommand - component toggles, q and tau sweeps, resampling vs reweighting.
"""

import logging

from app.config import ExperimentConfig
from app.commands.run import write_results
from app.services.errors import ConfigError
from app.services.experiment import CellResult, CellSpec, run_cells

logger = logging.getLogger(__name__)

# (init_from_biased, use_gce, augment) rows of the component ablation
COMPONENT_ROWS = [
    (False, False, False),
    (False, True, True),
    (True, False, False),
    (True, True, False),
    (True, True, True),
]


def _flag(value: bool) -> str:
    return "1" if value else "0"


def axis_specs(config: ExperimentConfig, axis: str) -> list[CellSpec]:
    """Cartesian product of one axis with rho and seeds."""
    specs = []
    for rho in config.data.rho:
        base = config.schedule_for(rho)
        if axis == "components":
            variants = [
                (f"init={_flag(i)},gce={_flag(g)},aug={_flag(a)}", "dpr",
                 base.model_copy(update={"init_from_biased": i, "use_gce": g, "augment": a}))
                for i, g, a in COMPONENT_ROWS
            ]
        elif axis == "q":
            variants = [(f"q={q:g}", "dpr", base.model_copy(update={"q": q})) for q in config.sweep.q]
        elif axis == "tau":
            variants = [(f"tau={t:g}", "dpr", base.model_copy(update={"tau": t})) for t in config.sweep.tau]
        elif axis == "sampling":
            variants = [("resample", "dpr", base), ("reweight", "reweighted", base)]
        else:
            raise ConfigError(f"Unknown ablation axis '{axis}'")

        for variant, mode, schedule in variants:
            for seed in config.run.seeds:
                specs.append(CellSpec(axis=axis, variant=variant, mode=mode, rho=rho, seed=seed, schedule=schedule))
    return specs


def cmd_ablate(config: ExperimentConfig) -> dict[str, list[CellResult]]:
    """
    Run every enabled ablation axis; each axis gets its own CSV set.

    Raises:
        ConfigError: No sweep axis is enabled
    """
    axes = config.sweep.axes()
    if not axes:
        raise ConfigError("ablate needs at least one sweep axis (components, sampling, q or tau)")

    run_id = config.run_id()
    out_dir = config.output_dir() / run_id / "ablate"
    results = {}
    for axis in axes:
        specs = axis_specs(config, axis)
        logger.info("Ablation axis '%s': %d cells", axis, len(specs))
        results[axis] = run_cells(config, specs, run_id, workers=config.worker_count())
        write_results(results[axis], out_dir, prefix=f"{axis}_")
    return results
