"""Procedural check datasets.

Two small image families used by the test suite and by anyone who wants
to exercise the pipeline without clinical data. Both paint soilage-like
ochre marks on a mucosa-like pink field, with label 3 the cleanest class,
and both are pure functions of their seed.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .data import DatasetManifest, ImageSample, save_manifest, subject_disjoint_split
from .errors import ConfigError
from .utils import derive_seed

BACKGROUND_RGB = (0.75, 0.45, 0.42)
SOILAGE_RGB = (0.72, 0.55, 0.18)

# Fraction of the frame covered by soilage, per label. Gaps between
# neighbouring bands stay well above the per-subject tint variation so
# classes remain separable on held-out subjects.
BLOB_AREA_BANDS = {
    0: (0.46, 0.58),
    1: (0.27, 0.35),
    2: (0.12, 0.18),
    3: (0.00, 0.02),
}

# Dot counts per label for the small-marks family. Dot radius keeps even
# the dirtiest class under five percent of the frame, so the signal lives
# below the resolution of a whole-image downsample but inside one anchor.
# The dot colour contrasts with the field in every channel; each dot has
# to register clearly in a crop embedding for counting to transfer.
DOT_COUNTS = {0: 10, 1: 6, 2: 3, 3: 1}
DOT_RADIUS = 2.5
DOT_RGB = (0.10, 0.08, 0.05)

SPLIT_RATIOS = (0.6, 0.2, 0.2)


def _disk_mask(size: int, cy: float, cx: float, radius: float) -> np.ndarray:
    yy = np.arange(size, dtype=np.float64)[:, None]
    xx = np.arange(size, dtype=np.float64)[None, :]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= radius * radius


def _paint(image: np.ndarray, mask: np.ndarray, color: np.ndarray) -> None:
    image[mask] = color


def _save_png(image: np.ndarray, path: Path) -> None:
    as_bytes = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(as_bytes, mode="RGB").save(path)


def _check_layout(n_images: int, n_subjects: int) -> int:
    if n_subjects < 1:
        raise ConfigError(f"need at least one subject, got {n_subjects}")
    if n_images % n_subjects != 0:
        raise ConfigError(f"{n_images} images do not divide over {n_subjects} subjects")
    per_subject = n_images // n_subjects
    if per_subject % 4 != 0:
        raise ConfigError(
            f"{per_subject} images per subject cannot balance 4 classes"
        )
    return per_subject


def make_blob_dataset(
    out_dir: str | Path,
    n_images: int = 400,
    image_size: int = 64,
    n_subjects: int = 20,
    seed: int = 0,
) -> DatasetManifest:
    """Write a blob-coverage dataset and its manifest; return the manifest.

    Each image is a noisy pink field with ochre blobs whose total area
    falls in the label's band, so the classes are separated by how much
    of the frame is soiled. Subjects differ by a constant colour tint.
    """
    per_subject = _check_layout(n_images, n_subjects)
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)

    background = np.asarray(BACKGROUND_RGB, dtype=np.float64)
    soilage = np.asarray(SOILAGE_RGB, dtype=np.float64)
    max_radius = max(2.0, image_size / 8.0)

    samples: list[ImageSample] = []
    index = 0
    for si in range(n_subjects):
        subject_id = f"s{si:03d}"
        tint_rng = np.random.default_rng(derive_seed(seed, "blob-tint", subject_id))
        tint = tint_rng.uniform(-0.005, 0.005, size=3)
        labels = [lab for lab in (0, 1, 2, 3) for _ in range(per_subject // 4)]
        for label in labels:
            image_id = f"img{index:05d}"
            index += 1
            rng = np.random.default_rng(derive_seed(seed, "blob-image", image_id))
            lo, hi = BLOB_AREA_BANDS[label]
            target = rng.uniform(lo, hi)
            image = np.tile(background + tint, (image_size, image_size, 1))
            covered = np.zeros((image_size, image_size), dtype=bool)
            while covered.mean() < target:
                deficit_px = (target - covered.mean()) * image_size * image_size
                radius = float(np.clip(np.sqrt(deficit_px / np.pi), 2.0, max_radius))
                cy = rng.uniform(0, image_size)
                cx = rng.uniform(0, image_size)
                disk = _disk_mask(image_size, cy, cx, radius)
                shade = soilage + rng.uniform(-0.03, 0.03, size=3)
                _paint(image, disk, shade)
                covered |= disk
            image += rng.normal(0.0, 0.025, size=image.shape)
            rel_path = f"images/{image_id}.png"
            _save_png(image, out_dir / rel_path)
            samples.append(ImageSample(
                image_id=image_id,
                image_path=rel_path,
                subject_id=subject_id,
                label=label,
                rater_scores=(label, label, label),
            ))

    manifest = DatasetManifest(samples=samples, root=out_dir, provenance="synthetic-blob")
    manifest = subject_disjoint_split(manifest, SPLIT_RATIOS, seed=derive_seed(seed, "blob-split"))
    save_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest


def make_dot_dataset(
    out_dir: str | Path,
    n_images: int = 240,
    image_size: int = 64,
    n_subjects: int = 20,
    seed: int = 0,
    noise_sigma: float = 0.03,
) -> DatasetManifest:
    """Write a dataset whose classes differ only in tiny-dot counts.

    Dots are small enough that downsampling the whole frame to a coarse
    grid smears them into the noise floor, while a crop around any dot
    keeps it visible. Pixel noise plus per-subject tints and per-image
    brightness drift suppress global colour shortcuts.
    """
    per_subject = _check_layout(n_images, n_subjects)
    if image_size < 8 * DOT_RADIUS:
        raise ConfigError(f"image_size {image_size} is too small for radius-{DOT_RADIUS} dots")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)

    background = np.asarray(BACKGROUND_RGB, dtype=np.float64)
    soilage = np.asarray(DOT_RGB, dtype=np.float64)
    margin = DOT_RADIUS + 1
    # Dots must not merge, or the count signal blurs; a 2-pixel gap is
    # enough and stays feasible for the densest class.
    min_sep = 2 * DOT_RADIUS + 2

    samples: list[ImageSample] = []
    index = 0
    for si in range(n_subjects):
        subject_id = f"s{si:03d}"
        tint_rng = np.random.default_rng(derive_seed(seed, "dot-tint", subject_id))
        tint = tint_rng.uniform(-0.008, 0.008, size=3)
        labels = [lab for lab in (0, 1, 2, 3) for _ in range(per_subject // 4)]
        for label in labels:
            image_id = f"img{index:05d}"
            index += 1
            rng = np.random.default_rng(derive_seed(seed, "dot-image", image_id))
            brightness = rng.uniform(-0.008, 0.008)
            image = np.tile(background + tint + brightness, (image_size, image_size, 1))
            centers: list[tuple[float, float]] = []
            while len(centers) < DOT_COUNTS[label]:
                cy = rng.uniform(margin, image_size - margin)
                cx = rng.uniform(margin, image_size - margin)
                if all((cy - py) ** 2 + (cx - px) ** 2 >= min_sep**2 for py, px in centers):
                    centers.append((cy, cx))
            for cy, cx in centers:
                _paint(image, _disk_mask(image_size, cy, cx, DOT_RADIUS), soilage)
            image += rng.normal(0.0, noise_sigma, size=image.shape)
            rel_path = f"images/{image_id}.png"
            _save_png(image, out_dir / rel_path)
            samples.append(ImageSample(
                image_id=image_id,
                image_path=rel_path,
                subject_id=subject_id,
                label=label,
                rater_scores=(label, label, label),
            ))

    manifest = DatasetManifest(samples=samples, root=out_dir, provenance="synthetic-dot")
    manifest = subject_disjoint_split(manifest, SPLIT_RATIOS, seed=derive_seed(seed, "dot-split"))
    save_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest
