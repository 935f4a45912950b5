"""
Biased dataset generation.
Colored glyphs (target = shape, bias = color), a multi-bias variant with M
independent spurious attributes, colorization of grayscale IDX images,
augmentation and split utilities.
"""

import logging
from typing import Optional

import numpy as np

from app.models.dataset import BiasedDataset, BiasedExample, DatasetKind, GenConfig
from app.services.errors import ParameterError, UnsupportedShapeError
from app.services.seeding import derive_seed

logger = logging.getLogger(__name__)

UNBIASED_TEST_RHO = 0.9

# Seven-segment layout: a=top, b=upper right, c=lower right, d=bottom,
# e=lower left, f=upper left, g=middle
SEGMENTS_BY_CLASS = [
    "abcdef", "bc", "abdeg", "abcdg", "bcfg",
    "acdfg", "acdefg", "abc", "abcdefg", "abcdfg",
]


# ============================================================
# Glyph templates
# ============================================================


def _segment_mask(size: int, segment: str) -> np.ndarray:
    t = max(1, size // 7)
    top = size // 7
    mid = size // 2 - t // 2
    bottom = size - size // 7 - t
    left = size // 4
    right = size - size // 4 - t

    mask = np.zeros((size, size), dtype=bool)
    if segment == "a":
        mask[top:top + t, left:right + t] = True
    elif segment == "g":
        mask[mid:mid + t, left:right + t] = True
    elif segment == "d":
        mask[bottom:bottom + t, left:right + t] = True
    elif segment == "f":
        mask[top:mid + t, left:left + t] = True
    elif segment == "b":
        mask[top:mid + t, right:right + t] = True
    elif segment == "e":
        mask[mid:bottom + t, left:left + t] = True
    elif segment == "c":
        mask[mid:bottom + t, right:right + t] = True
    return mask


def glyph_templates(num_classes: int, size: int) -> np.ndarray:
    """
    Fixed per-class binary masks.

    Classes 0-9 are seven-segment digits; further classes get fixed random
    blobs inside the same margins.

    Returns:
        K x size x size float64 array with values in {0, 1}
    """
    templates = np.zeros((num_classes, size, size), dtype=bool)
    margin = max(2, size // 7)
    for k in range(num_classes):
        if k < len(SEGMENTS_BY_CLASS):
            for segment in SEGMENTS_BY_CLASS[k]:
                templates[k] |= _segment_mask(size, segment)
        else:
            rng = np.random.default_rng(derive_seed(7919, k))
            inner = rng.random((size - 2 * margin, size - 2 * margin)) < 0.35
            templates[k, margin:size - margin, margin:size - margin] = inner
    return templates.astype(np.float64)


def _jittered_glyphs(y: np.ndarray, templates: np.ndarray, shifts: np.ndarray) -> np.ndarray:
    """Per-example glyphs shifted by (dy, dx); margins keep ink away from the border."""
    images = templates[y]
    for dy in np.unique(shifts[:, 0]):
        for dx in np.unique(shifts[:, 1]):
            sel = (shifts[:, 0] == dy) & (shifts[:, 1] == dx)
            if sel.any() and (dy or dx):
                images[sel] = np.roll(images[sel], (int(dy), int(dx)), axis=(1, 2))
    return images


# ============================================================
# Shared sampling logic
# ============================================================


def _balanced_labels(rng: np.random.Generator, n: int, num_classes: int) -> np.ndarray:
    return rng.permutation(np.arange(n, dtype=np.int64) % num_classes)


def _draw_bias(
    rng: np.random.Generator,
    y: np.ndarray,
    num_classes: int,
    rho: float,
    num_attrs: int,
) -> tuple[np.ndarray, np.ndarray]:
    """
    Draw bias attribute values.

    Each attribute independently conflicts with probability rho; a conflicting
    value is uniform over the K-1 values other than y.

    Returns:
        (bias_labels n x M, aligned n x M)
    """
    n = y.shape[0]
    conflicting = rng.random((n, num_attrs)) < rho
    offsets = rng.integers(1, num_classes, size=(n, num_attrs))
    bias_labels = np.where(conflicting, (y[:, None] + offsets) % num_classes, y[:, None])
    return bias_labels.astype(np.int64), ~conflicting


def _check_conflict_ratio(aligned: np.ndarray, rho: float) -> None:
    n = aligned.shape[0]
    observed = float((~aligned[:, 0]).mean())
    std = np.sqrt(rho * (1.0 - rho) / n)
    if abs(observed - rho) > 3.0 * std + 1e-12:
        logger.warning(
            "Conflict fraction %.5f is more than 3 binomial std from rho=%.5f (n=%d)",
            observed, rho, n,
        )


def _check_generation_args(config: GenConfig, n: int) -> None:
    if n <= 0:
        raise ParameterError(f"Dataset size must be positive, got {n}")
    if config.num_classes < 2:
        raise ParameterError(f"Need at least 2 classes, got {config.num_classes}")


def _colorize(
    gray: np.ndarray,
    color_index: np.ndarray,
    prototypes: np.ndarray,
    sigma: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Multiply n x H x W intensities by per-example colors drawn from N(C, sigma^2 I)."""
    colors = prototypes[color_index] + sigma * rng.standard_normal((gray.shape[0], 3))
    colors = np.clip(colors, 0.0, 1.0)
    images = gray[..., None] * colors[:, None, None, :]
    return np.clip(images, 0.0, 1.0).reshape(gray.shape[0], -1)


# ============================================================
# Generators
# ============================================================


def generate_colored(config: GenConfig, n: int, seed: int) -> BiasedDataset:
    """
    Colored-glyph dataset: the label is the glyph shape, the bias is the color.

    Args:
        config: Generator config (kind must be colored)
        n: Number of examples
        seed: Generation seed

    Returns:
        BiasedDataset with one bias attribute
    """
    if config.kind != DatasetKind.COLORED:
        raise ParameterError(f"generate_colored needs kind=colored, got {config.kind.value}")
    _check_generation_args(config, n)

    rng = np.random.default_rng(seed)
    k, size = config.num_classes, config.image_size
    y = _balanced_labels(rng, n, k)
    bias_labels, aligned = _draw_bias(rng, y, k, config.rho, 1)
    j = config.glyph_jitter
    shifts = rng.integers(-j, j + 1, size=(n, 2))
    glyphs = _jittered_glyphs(y, glyph_templates(k, size), shifts)
    features = _colorize(glyphs, bias_labels[:, 0], config.prototypes(), config.sigma, rng)

    _check_conflict_ratio(aligned, config.rho)
    return BiasedDataset(
        features=features,
        y=y,
        bias_labels=bias_labels,
        aligned=aligned,
        num_classes=k,
        rho=config.rho,
        seed=seed,
        image_shape=(size, size, 3),
        kind=DatasetKind.COLORED,
    )


def attribute_scales(num_attrs: int) -> np.ndarray:
    """Attribute-specific intensity of each bias block, in (0.5, 1]."""
    return 0.5 + 0.5 * (num_attrs - np.arange(num_attrs)) / num_attrs


def generate_multibias(config: GenConfig, n: int, seed: int) -> BiasedDataset:
    """
    Multi-bias dataset with M independent spurious attributes.

    Features are [grayscale glyph | M one-hot blocks of length K], each block
    scaled by its attribute intensity and perturbed by N(0, sigma^2).
    """
    if config.kind != DatasetKind.MULTIBIAS:
        raise ParameterError(f"generate_multibias needs kind=multibias, got {config.kind.value}")
    _check_generation_args(config, n)
    if config.num_bias_attrs < 2:
        raise ParameterError(f"Multi-bias data needs M >= 2, got {config.num_bias_attrs}")

    rng = np.random.default_rng(seed)
    k, m, size = config.num_classes, config.num_bias_attrs, config.image_size
    y = _balanced_labels(rng, n, k)
    bias_labels, aligned = _draw_bias(rng, y, k, config.rho, m)
    j = config.glyph_jitter
    shifts = rng.integers(-j, j + 1, size=(n, 2))
    glyphs = _jittered_glyphs(y, glyph_templates(k, size), shifts).reshape(n, -1)

    blocks = np.zeros((n, m, k))
    blocks[np.arange(n)[:, None], np.arange(m)[None, :], bias_labels] = 1.0
    blocks *= attribute_scales(m)[None, :, None]
    blocks += config.sigma * rng.standard_normal(blocks.shape)
    blocks = np.clip(blocks, 0.0, 1.0)

    _check_conflict_ratio(aligned, config.rho)
    return BiasedDataset(
        features=np.concatenate([glyphs, blocks.reshape(n, -1)], axis=1),
        y=y,
        bias_labels=bias_labels,
        aligned=aligned,
        num_classes=k,
        rho=config.rho,
        seed=seed,
        image_shape=None,
        kind=DatasetKind.MULTIBIAS,
    )


def colorize_images(
    gray: np.ndarray,
    labels: np.ndarray,
    config: GenConfig,
    seed: int,
) -> BiasedDataset:
    """
    Colorize grayscale images (n x H x W, values in [0, 1]) with the colored-dataset logic.
    """
    n = gray.shape[0]
    _check_generation_args(config, n)
    labels = np.asarray(labels, dtype=np.int64)
    if ((labels < 0) | (labels >= config.num_classes)).any():
        raise ParameterError(f"IDX labels must lie in [0, {config.num_classes})")

    rng = np.random.default_rng(seed)
    bias_labels, aligned = _draw_bias(rng, labels, config.num_classes, config.rho, 1)
    features = _colorize(gray, bias_labels[:, 0], config.prototypes(), config.sigma, rng)

    _check_conflict_ratio(aligned, config.rho)
    return BiasedDataset(
        features=features,
        y=labels,
        bias_labels=bias_labels,
        aligned=aligned,
        num_classes=config.num_classes,
        rho=config.rho,
        seed=seed,
        image_shape=(gray.shape[1], gray.shape[2], 3),
        kind=DatasetKind.COLORIZED_IDX,
    )


def colorize_idx(image_file: str, label_file: str, config: GenConfig, seed: int) -> BiasedDataset:
    """
    Read an IDX image/label pair and colorize it.

    Raises:
        FormatError: Bad magic, truncated file or count mismatch
    """
    from app.services.idx_reader import read_idx_pair

    gray, labels = read_idx_pair(image_file, label_file)
    return colorize_images(gray, labels, config, seed)


def generate(
    config: GenConfig,
    n: int,
    seed: int,
    source: Optional[tuple[np.ndarray, np.ndarray]] = None,
) -> BiasedDataset:
    """
    Dispatch on config.kind.

    For colorized-idx, source holds (grayscale images, labels); n images are
    drawn from it without replacement (all of them when n >= len(source)).
    """
    if config.kind == DatasetKind.COLORED:
        return generate_colored(config, n, seed)
    if config.kind == DatasetKind.MULTIBIAS:
        return generate_multibias(config, n, seed)
    if source is None:
        raise ParameterError("colorized-idx generation needs grayscale source images")
    gray, labels = source
    if n < gray.shape[0]:
        pick = np.sort(np.random.default_rng(derive_seed(seed, 0)).choice(gray.shape[0], n, replace=False))
        gray, labels = gray[pick], labels[pick]
    return colorize_images(gray, labels, config, seed)


def make_unbiased_test(
    config: GenConfig,
    n: int,
    seed: int,
    source: Optional[tuple[np.ndarray, np.ndarray]] = None,
) -> BiasedDataset:
    """Same generator with rho = 0.9 (for every attribute)."""
    return generate(config.with_rho(UNBIASED_TEST_RHO), n, seed, source)


def build_population(
    config: GenConfig,
    n_per_group: int,
    seed: int,
    source: Optional[tuple[np.ndarray, np.ndarray]] = None,
) -> BiasedDataset:
    """
    Large aligned-only + conflicting-only population standing in for the
    group distributions.
    """
    aligned = generate(config.with_rho(0.0), n_per_group, derive_seed(seed, 0), source)
    conflicting = generate(config.with_rho(1.0), n_per_group, derive_seed(seed, 1), source)
    population = concat([aligned, conflicting])
    population.rho = 0.5
    return population


# ============================================================
# Dataset utilities
# ============================================================


def concat(datasets: list[BiasedDataset]) -> BiasedDataset:
    """Concatenate datasets sharing K, M and feature layout (metadata from the first)."""
    if not datasets:
        raise ParameterError("Nothing to concatenate")
    first = datasets[0]
    return BiasedDataset(
        features=np.concatenate([d.features for d in datasets], axis=0),
        y=np.concatenate([d.y for d in datasets]),
        bias_labels=np.concatenate([d.bias_labels for d in datasets], axis=0),
        aligned=np.concatenate([d.aligned for d in datasets], axis=0),
        num_classes=first.num_classes,
        rho=first.rho,
        seed=first.seed,
        image_shape=first.image_shape,
        kind=first.kind,
    )


def split(dataset: BiasedDataset, val_fraction: float, seed: int) -> tuple[BiasedDataset, BiasedDataset]:
    """
    Seeded shuffle split into (train, val).

    Args:
        dataset: Dataset to split
        val_fraction: Fraction in [0, 1) assigned to validation
        seed: Shuffle seed

    Returns:
        (train, val); both keep K, M and rho metadata
    """
    if not 0.0 <= val_fraction < 1.0:
        raise ParameterError(f"val_fraction must be in [0, 1), got {val_fraction}")
    order = np.random.default_rng(seed).permutation(len(dataset))
    n_val = int(round(len(dataset) * val_fraction))
    return dataset.subset(order[n_val:]), dataset.subset(order[:n_val])


def empirical_conflict_ratio(dataset: BiasedDataset) -> float:
    """Fraction of examples whose first bias attribute is misaligned."""
    if len(dataset) == 0:
        raise ParameterError("Empty dataset")
    return float((~dataset.aligned[:, 0]).mean())


def recompute_aligned(dataset: BiasedDataset) -> np.ndarray:
    """Alignment flags rebuilt from (y, bias labels)."""
    return dataset.bias_labels == dataset.y[:, None]


# ============================================================
# Augmentation
# ============================================================


def augment_batch(
    features: np.ndarray,
    image_shape: Optional[tuple[int, int, int]],
    rng: np.random.Generator,
    jitter: float = 0.4,
    max_rotation_deg: float = 15.0,
    resize_crop_scale: Optional[float] = None,
) -> np.ndarray:
    """
    Random resize-crop (optional), rotation and per-channel color jitter.

    Rotation and cropping use nearest-neighbor resampling with zero fill.

    Args:
        features: B x d flattened channel-last images
        image_shape: (H, W, C)
        rng: Random generator (advanced)
        jitter: Channel factors are uniform in [1 - jitter, 1 + jitter]
        max_rotation_deg: Angles are uniform in [-max, +max]
        resize_crop_scale: Minimum crop side fraction; None disables cropping

    Returns:
        B x d augmented features in [0, 1]
    """
    if image_shape is None:
        raise UnsupportedShapeError("Augmentation needs image-shaped features")
    b = features.shape[0]
    h, w, c = image_shape
    images = features.reshape(b, h, w, c)

    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    batch_idx = np.arange(b)[:, None, None]

    if resize_crop_scale is not None and resize_crop_scale < 1.0:
        scale = rng.uniform(resize_crop_scale, 1.0, size=b)
        crop_h = np.maximum(1, np.round(scale * h)).astype(np.int64)
        crop_w = np.maximum(1, np.round(scale * w)).astype(np.int64)
        top = (rng.random(b) * (h - crop_h + 1)).astype(np.int64)
        left = (rng.random(b) * (w - crop_w + 1)).astype(np.int64)
        src_i = top[:, None, None] + (ii[None] * crop_h[:, None, None]) // h
        src_j = left[:, None, None] + (jj[None] * crop_w[:, None, None]) // w
        images = images[batch_idx, src_i, src_j]

    if max_rotation_deg > 0:
        theta = np.deg2rad(rng.uniform(-max_rotation_deg, max_rotation_deg, size=b))
        cos_t, sin_t = np.cos(theta)[:, None, None], np.sin(theta)[:, None, None]
        ci, cj = (h - 1) / 2.0, (w - 1) / 2.0
        di, dj = ii[None] - ci, jj[None] - cj
        src_i = np.rint(cos_t * di + sin_t * dj + ci).astype(np.int64)
        src_j = np.rint(-sin_t * di + cos_t * dj + cj).astype(np.int64)
        inside = (src_i >= 0) & (src_i < h) & (src_j >= 0) & (src_j < w)
        rotated = images[batch_idx, np.clip(src_i, 0, h - 1), np.clip(src_j, 0, w - 1)]
        images = np.where(inside[..., None], rotated, 0.0)

    if jitter > 0:
        factors = rng.uniform(1.0 - jitter, 1.0 + jitter, size=(b, 1, 1, c))
        images = np.clip(images * factors, 0.0, 1.0)

    return images.reshape(b, -1)


def augment(
    example: BiasedExample,
    seed: int,
    image_shape: Optional[tuple[int, int, int]] = None,
    jitter: float = 0.4,
    max_rotation_deg: float = 15.0,
    resize_crop_scale: Optional[float] = None,
) -> BiasedExample:
    """Seed-deterministic augmentation of one example; labels and flags unchanged."""
    rng = np.random.default_rng(seed)
    features = augment_batch(
        example.features[None, :], image_shape, rng,
        jitter=jitter,
        max_rotation_deg=max_rotation_deg,
        resize_crop_scale=resize_crop_scale,
    )[0]
    return BiasedExample(
        features=features,
        y=example.y,
        bias_labels=example.bias_labels,
        aligned=example.aligned,
    )
