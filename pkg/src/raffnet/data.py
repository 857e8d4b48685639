"""Dataset ingestion and curation for BBPS-annotated image collections.

The on-disk format is JSON Lines: one object per line with keys
``image_id``, ``image_path`` (relative to the manifest's directory),
``subject_id``, and either ``label`` (curated) or ``rater_scores`` (raw
triple-annotated data). Split assignments live under ``split``; unknown
keys are preserved on rewrite.

Curation mirrors the acquisition protocol the datasets come from: frames
are expected to be pre-extracted from video at a fixed interval (0.5 s is
the convention upstream; video decoding is out of scope here), then
blurred frames are dropped by a sharpness score and only images whose
three rater scores agree unanimously are kept.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DataError

VALID_LABELS = (0, 1, 2, 3)
VALID_SPLITS = ("train", "val", "test", "unassigned")

# Luma weights and the 3x3 Laplacian used by the sharpness score.
LUMA_WEIGHTS = (0.299, 0.587, 0.114)
LAPLACIAN_KERNEL = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])

# Keys written explicitly, in this order; anything else is passed through.
_KNOWN_KEYS = ("image_id", "image_path", "subject_id", "label", "rater_scores", "split")


@dataclass
class AnnotationRecord:
    """One raw annotation: an image plus its three independent rater scores."""

    image_id: str
    image_path: str
    subject_id: str
    rater_scores: tuple[int, int, int]
    extra: dict = field(default_factory=dict)

    def validate(self, where: str = "") -> None:
        loc = f" ({where})" if where else ""
        if len(self.rater_scores) != 3:
            raise DataError(
                f"record {self.image_id!r} has {len(self.rater_scores)} rater scores, expected 3{loc}"
            )
        for s in self.rater_scores:
            if not isinstance(s, int) or s not in VALID_LABELS:
                raise DataError(
                    f"record {self.image_id!r} has rater score {s!r} outside {{0,1,2,3}}{loc}"
                )


@dataclass
class ImageSample:
    """One curated image with its consensus label and split assignment."""

    image_id: str
    image_path: str
    subject_id: str
    label: int
    split: str = "unassigned"
    rater_scores: tuple[int, int, int] | None = None
    extra: dict = field(default_factory=dict)

    def validate(self, where: str = "") -> None:
        loc = f" ({where})" if where else ""
        if not isinstance(self.label, int) or self.label not in VALID_LABELS:
            raise DataError(f"sample {self.image_id!r} has label {self.label!r} outside {{0,1,2,3}}{loc}")
        if self.split not in VALID_SPLITS:
            raise DataError(f"sample {self.image_id!r} has unknown split {self.split!r}{loc}")


@dataclass
class DatasetManifest:
    """An ordered collection of samples plus the directory paths resolve against."""

    samples: list[ImageSample]
    root: Path | None = None
    provenance: str = ""

    @property
    def per_class_counts(self) -> tuple[int, int, int, int]:
        counts = [0, 0, 0, 0]
        for s in self.samples:
            counts[s.label] += 1
        return tuple(counts)

    def subjects(self) -> list[str]:
        seen: dict[str, None] = {}
        for s in self.samples:
            seen.setdefault(s.subject_id, None)
        return list(seen)

    def split_samples(self, split: str) -> list[ImageSample]:
        if split not in VALID_SPLITS:
            raise DataError(f"unknown split {split!r}")
        return [s for s in self.samples if s.split == split]

    def resolve_path(self, sample: ImageSample) -> Path:
        p = Path(sample.image_path)
        if p.is_absolute() or self.root is None:
            return p
        return self.root / p


def _iter_jsonl(path: Path) -> Iterator[tuple[int, dict]]:
    if not path.exists():
        raise DataError(f"manifest file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped:
                continue
            try:
                obj = json.loads(stripped)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed JSON line: {exc.msg}") from exc
            if not isinstance(obj, dict):
                raise DataError(f"{path}:{lineno}: expected a JSON object")
            yield lineno, obj


def _require_str(obj: dict, key: str, path: Path, lineno: int) -> str:
    value = obj.get(key)
    if not isinstance(value, str) or not value:
        raise DataError(f"{path}:{lineno}: missing or invalid {key!r}")
    return value


def load_annotations(path: str | Path) -> list[AnnotationRecord]:
    """Load raw triple-annotated records from a JSON Lines file."""
    path = Path(path)
    records: list[AnnotationRecord] = []
    seen: set[str] = set()
    for lineno, obj in _iter_jsonl(path):
        image_id = _require_str(obj, "image_id", path, lineno)
        if image_id in seen:
            raise DataError(f"{path}:{lineno}: duplicate image_id {image_id!r}")
        seen.add(image_id)
        scores = obj.get("rater_scores")
        if not isinstance(scores, list) or len(scores) != 3:
            raise DataError(f"{path}:{lineno}: rater_scores must be a list of 3 integers")
        rec = AnnotationRecord(
            image_id=image_id,
            image_path=_require_str(obj, "image_path", path, lineno),
            subject_id=_require_str(obj, "subject_id", path, lineno),
            rater_scores=tuple(scores),
            extra={k: v for k, v in obj.items() if k not in _KNOWN_KEYS},
        )
        rec.validate(where=f"{path}:{lineno}")
        records.append(rec)
    return records


def load_manifest(path: str | Path, verify_images: bool = True) -> DatasetManifest:
    """Load a curated manifest; every line must carry a valid label.

    Validation is streaming, so errors name the offending line. With
    ``verify_images`` the referenced files are checked for existence
    (decodability is verified when an image is actually loaded).
    """
    path = Path(path)
    root = path.parent
    samples: list[ImageSample] = []
    seen: set[str] = set()
    for lineno, obj in _iter_jsonl(path):
        image_id = _require_str(obj, "image_id", path, lineno)
        if image_id in seen:
            raise DataError(f"{path}:{lineno}: duplicate image_id {image_id!r}")
        seen.add(image_id)
        label = obj.get("label")
        if isinstance(label, bool) or not isinstance(label, int):
            raise DataError(
                f"{path}:{lineno}: missing integer label (raw annotation files must be curated first)"
            )
        if label not in VALID_LABELS:
            raise DataError(f"{path}:{lineno}: label {label} outside {{0,1,2,3}}")
        scores = obj.get("rater_scores")
        if scores is not None:
            if not isinstance(scores, list) or len(scores) != 3:
                raise DataError(f"{path}:{lineno}: rater_scores must be a list of 3 integers")
            scores = tuple(scores)
        split = obj.get("split", "unassigned")
        sample = ImageSample(
            image_id=image_id,
            image_path=_require_str(obj, "image_path", path, lineno),
            subject_id=_require_str(obj, "subject_id", path, lineno),
            label=label,
            split=split,
            rater_scores=scores,
            extra={k: v for k, v in obj.items() if k not in _KNOWN_KEYS},
        )
        sample.validate(where=f"{path}:{lineno}")
        samples.append(sample)
    manifest = DatasetManifest(samples=samples, root=root)
    if verify_images:
        for s in samples:
            p = manifest.resolve_path(s)
            if not p.exists():
                raise DataError(f"image file for {s.image_id!r} not found: {p}")
    return manifest


def _sample_to_obj(sample: ImageSample) -> dict:
    obj: dict = {
        "image_id": sample.image_id,
        "image_path": sample.image_path,
        "subject_id": sample.subject_id,
        "label": sample.label,
    }
    if sample.rater_scores is not None:
        obj["rater_scores"] = list(sample.rater_scores)
    if sample.split != "unassigned":
        obj["split"] = sample.split
    for k in sorted(sample.extra):
        obj[k] = sample.extra[k]
    return obj


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    """Write a manifest as JSON Lines. Serialization is canonical, so
    write / load / write round-trips are byte-identical."""
    path = Path(path)
    lines = []
    for sample in manifest.samples:
        lines.append(json.dumps(_sample_to_obj(sample), separators=(",", ":"), ensure_ascii=False))
    path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def load_image(path: str | Path) -> np.ndarray:
    """Decode an image file to a float32 H x W x 3 array in [0, 1]."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"image file not found: {path}")
    try:
        with Image.open(path) as img:
            rgb = img.convert("RGB")
            arr = np.asarray(rgb, dtype=np.float32) / 255.0
    except (UnidentifiedImageError, OSError) as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc
    return arr


def consensus_filter(
    records: Sequence[AnnotationRecord],
) -> tuple[list[ImageSample], list[AnnotationRecord]]:
    """Keep records whose three rater scores agree; the shared score becomes
    the label. Returns (retained, dropped); together they partition the
    input and both preserve input order."""
    retained: list[ImageSample] = []
    dropped: list[AnnotationRecord] = []
    for rec in records:
        rec.validate()
        a, b, c = rec.rater_scores
        if a == b == c:
            retained.append(
                ImageSample(
                    image_id=rec.image_id,
                    image_path=rec.image_path,
                    subject_id=rec.subject_id,
                    label=a,
                    rater_scores=rec.rater_scores,
                    extra=dict(rec.extra),
                )
            )
        else:
            dropped.append(rec)
    return retained, dropped


def blur_score(image: np.ndarray) -> float:
    """Sharpness proxy: variance of the 3x3 Laplacian response on luma.

    Computed on the valid interior (no padding), so the input must be at
    least 3 pixels on each side. Higher means sharper; a constant image
    scores exactly 0. Adding a constant to all pixels leaves the score
    unchanged.
    """
    if image.ndim != 3 or image.shape[2] != 3:
        raise DataError(f"blur_score expects an H x W x 3 raster, got shape {image.shape}")
    if min(image.shape[0], image.shape[1]) < 3:
        raise DataError("blur_score needs images at least 3 x 3")
    luma = (
        LUMA_WEIGHTS[0] * image[:, :, 0]
        + LUMA_WEIGHTS[1] * image[:, :, 1]
        + LUMA_WEIGHTS[2] * image[:, :, 2]
    ).astype(np.float64)
    # Valid 3x3 cross-shaped Laplacian, written out directly.
    center = luma[1:-1, 1:-1]
    resp = luma[:-2, 1:-1] + luma[2:, 1:-1] + luma[1:-1, :-2] + luma[1:-1, 2:] - 4.0 * center
    return float(np.var(resp))


def filter_blurred(
    samples: Sequence[ImageSample],
    threshold: float,
    root: Path | None = None,
    scores: Sequence[float] | None = None,
) -> list[ImageSample]:
    """Retain samples whose blur score is >= threshold (ties retained).

    Pass precomputed ``scores`` to avoid decoding images twice.
    """
    if threshold < 0:
        raise DataError(f"blur threshold must be non-negative, got {threshold}")
    if scores is None:
        scores = [blur_score(load_image(_resolve(s, root))) for s in samples]
    if len(scores) != len(samples):
        raise DataError("scores and samples length mismatch")
    return [s for s, sc in zip(samples, scores) if sc >= threshold]


def _resolve(sample: ImageSample, root: Path | None) -> Path:
    p = Path(sample.image_path)
    if p.is_absolute() or root is None:
        return p
    return root / p


def blur_scores_for(samples: Sequence[ImageSample], root: Path | None = None) -> list[float]:
    return [blur_score(load_image(_resolve(s, root))) for s in samples]


def subject_disjoint_split(
    manifest: DatasetManifest,
    ratios: tuple[float, float, float],
    seed: int,
) -> DatasetManifest:
    """Assign train/val/test splits at subject granularity.

    All images of a subject land in one split, so near-duplicate frames
    from the same procedure cannot leak across splits. Subject counts per
    split are floor(ratio * n_subjects); remainder subjects go to train.
    The assignment is a pure function of (seed, sorted subject ids).
    """
    if not manifest.samples:
        raise DataError("cannot split an empty manifest")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError(f"split ratios must sum to 1, got {ratios}")
    if any(r < 0 for r in ratios):
        raise DataError(f"split ratios must be non-negative, got {ratios}")
    subjects = sorted({s.subject_id for s in manifest.samples})
    n = len(subjects)
    nonzero_buckets = sum(1 for r in ratios if r > 0)
    if n < nonzero_buckets:
        raise DataError(f"only {n} subjects for {nonzero_buckets} non-empty splits")

    n_train = int(np.floor(ratios[0] * n))
    n_val = int(np.floor(ratios[1] * n))
    n_test = int(np.floor(ratios[2] * n))
    n_train += n - (n_train + n_val + n_test)

    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    assignment: dict[str, str] = {}
    for rank, idx in enumerate(order):
        if rank < n_train:
            split = "train"
        elif rank < n_train + n_val:
            split = "val"
        else:
            split = "test"
        assignment[subjects[idx]] = split

    new_samples = [replace(s, split=assignment[s.subject_id]) for s in manifest.samples]
    return DatasetManifest(samples=new_samples, root=manifest.root, provenance=manifest.provenance)


def split_subject_counts(manifest: DatasetManifest) -> dict[str, int]:
    """Number of distinct subjects per split."""
    by_split: dict[str, set[str]] = {}
    for s in manifest.samples:
        by_split.setdefault(s.split, set()).add(s.subject_id)
    return {k: len(v) for k, v in sorted(by_split.items())}
