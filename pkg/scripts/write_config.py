"""
Write the default experiment config.
Every field is listed; fields left at their defaults are commented out.

Usage:
    python -m scripts.write_config [out_path]
"""

import sys
from pathlib import Path

# Add parent directory to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent))

from app.config import ExperimentConfig, dump_experiment_config


def write_default_config(out_path: str) -> Path:
    path = Path(out_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_experiment_config(ExperimentConfig()), encoding="utf-8")
    return path


if __name__ == "__main__":
    target = sys.argv[1] if len(sys.argv) > 1 else "configs/default.ini"
    written = write_default_config(target)
    print(f"Default config written to {written}")
