"""
IDX fixture script.
Renders grayscale digit glyphs with random shifts and noise and writes them as
an IDX image/label pair, for exercising the colorized-idx path without
downloading a real digit corpus.

Usage:
    python -m scripts.make_idx_fixture [out_dir] [count] [size]
"""

import sys
from pathlib import Path

import numpy as np

# Add parent directory to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent))

from app.services.biased_data import glyph_templates
from app.services.idx_reader import write_idx_images, write_idx_labels

NUM_CLASSES = 10


def make_fixture(out_dir: str, count: int = 2000, size: int = 28, seed: int = 0) -> tuple[Path, Path]:
    """
    Write <out_dir>/images-idx3-ubyte and <out_dir>/labels-idx1-ubyte.

    Returns:
        (image path, label path)
    """
    rng = np.random.default_rng(seed)
    templates = glyph_templates(NUM_CLASSES, size)
    labels = np.arange(count) % NUM_CLASSES
    rng.shuffle(labels)

    images = templates[labels]
    shifts = rng.integers(-2, 3, size=(count, 2))
    for i, (dy, dx) in enumerate(shifts):
        images[i] = np.roll(images[i], (dy, dx), axis=(0, 1))
    images = np.clip(images * 230 + rng.normal(0, 12, size=images.shape), 0, 255).astype(np.uint8)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    image_path = out / "images-idx3-ubyte"
    label_path = out / "labels-idx1-ubyte"
    write_idx_images(str(image_path), images)
    write_idx_labels(str(label_path), labels.astype(np.uint8))
    return image_path, label_path


if __name__ == "__main__":
    target = sys.argv[1] if len(sys.argv) > 1 else "data/idx_fixture"
    count = int(sys.argv[2]) if len(sys.argv) > 2 else 2000
    size = int(sys.argv[3]) if len(sys.argv) > 3 else 28
    images, labels = make_fixture(target, count, size)
    print(f"Wrote {count} images to {images}")
    print(f"Wrote labels to {labels}")
