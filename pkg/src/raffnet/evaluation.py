"""Per-class accuracy reports, dataset statistics, and table rendering.

Accuracy is reported the way the scoring literature tabulates it: one
recall-style percentage per BBPS class (diagonal over true-class row
sum) plus their arithmetic mean ("AVG"). Because a macro average over
an imbalanced split can differ from plain sample accuracy, reports
carry both macro_avg and micro_avg, labeled.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

import numpy as np
import torch
from scipy.spatial.distance import cdist, pdist

from .data import DatasetManifest, load_image
from .errors import DataError
from .fusion import N_CLASSES, predict_batch

CLASS_COLUMNS = ("BBPS0", "BBPS1", "BBPS2", "BBPS3")


def round2(value: float) -> float:
    """Round to 2 decimals with half-up tie behavior (table convention)."""
    return float(Decimal(repr(float(value))).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def macro_avg(per_class) -> float:
    """Arithmetic mean of per-class accuracies, 2 decimals, half-up."""
    values = [float(v) for v in per_class]
    if not values:
        raise DataError("macro average of an empty list")
    for v in values:
        if not 0.0 <= v <= 100.0:
            raise DataError(f"per-class accuracy {v} outside [0, 100]")
    mean = sum(Decimal(repr(v)) for v in values) / len(values)
    return float(mean.quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


@dataclass
class EvalReport:
    confusion: list[list[int]]
    per_class_acc: list[float]
    macro_avg: float
    micro_avg: float
    n: int

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "confusion": [list(map(int, row)) for row in self.confusion],
            "per_class_acc": [float(v) for v in self.per_class_acc],
            "macro_avg": self.macro_avg,
            "micro_avg": self.micro_avg,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "EvalReport":
        try:
            return cls(
                confusion=[list(map(int, row)) for row in obj["confusion"]],
                per_class_acc=[float(v) for v in obj["per_class_acc"]],
                macro_avg=float(obj["macro_avg"]),
                micro_avg=float(obj["micro_avg"]),
                n=int(obj["n"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed evaluation report: {exc}") from exc

    @classmethod
    def from_confusion(cls, confusion: np.ndarray) -> "EvalReport":
        confusion = np.asarray(confusion, dtype=np.int64)
        if confusion.shape != (N_CLASSES, N_CLASSES):
            raise DataError(f"confusion matrix must be 4x4, got {confusion.shape}")
        n = int(confusion.sum())
        row_sums = confusion.sum(axis=1)
        per_class = [
            100.0 * confusion[c, c] / row_sums[c] if row_sums[c] > 0 else 0.0
            for c in range(N_CLASSES)
        ]
        present = [per_class[c] for c in range(N_CLASSES) if row_sums[c] > 0]
        if not present:
            raise DataError("confusion matrix is empty")
        micro = round2(100.0 * float(np.trace(confusion)) / n)
        return cls(
            confusion=confusion.tolist(),
            per_class_acc=[float(v) for v in per_class],
            macro_avg=macro_avg(present),
            micro_avg=micro,
            n=n,
        )


@dataclass
class DatasetStats:
    intra_dist: float
    inter_dist: float
    per_class_counts: tuple[int, int, int, int]
    n_subjects: int


def evaluate(model, manifest: DatasetManifest, split: str = "test",
             batch_size: int = 32, images: dict | None = None,
             fecal_features: dict | None = None) -> EvalReport:
    """Run frozen inference over one split and tally the confusion matrix.

    Model parameters are read-only for the whole pass; the images dict is
    an optional raster cache keyed by image_id. fecal_features optionally
    caches per-image frozen fecal tower features (valid only while that
    tower stays frozen; ignored otherwise).
    """
    samples = manifest.split_samples(split)
    if not samples:
        raise DataError(f"split {split!r} is empty")
    if batch_size < 1:
        raise DataError(f"batch_size must be >= 1, got {batch_size}")
    if images is None:
        images = {}
    use_feats = (fecal_features is not None and model.config.fecal_enabled
                 and model.fecal.frozen_backbone)
    was_training = model.training
    model.eval()
    confusion = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start : start + batch_size]
            rasters = []
            for s in chunk:
                raster = images.get(s.image_id)
                if raster is None:
                    raster = load_image(manifest.resolve_path(s))
                    images[s.image_id] = raster
                rasters.append(raster)
            feats = None
            if use_feats:
                stack = []
                for s, raster in zip(chunk, rasters):
                    f = fecal_features.get(s.image_id)
                    if f is None:
                        f = model.fecal_tower_features(raster)
                        fecal_features[s.image_id] = f
                    stack.append(f)
                dtype = next(model.parameters()).dtype
                feats = torch.from_numpy(np.ascontiguousarray(np.stack(stack))).to(dtype)
            logits = model.infer_logits(rasters, fecal_feats=feats)
            preds = predict_batch(logits)
            for s, p in zip(chunk, preds):
                confusion[s.label, p] += 1
    if was_training:
        model.train()
    return EvalReport.from_confusion(confusion)


def intra_inter_distance(features: np.ndarray, labels, inter_mode: str = "centroid"):
    """Class-compactness statistics over a feature matrix.

    intra: mean over classes of the mean pairwise Euclidean distance
    inside the class (classes with one member contribute nothing).
    inter: mean pairwise distance between class centroids, or with
    ``inter_mode="between"`` the mean over all cross-class point pairs.
    """
    feats = np.asarray(features, dtype=np.float64)
    labs = np.asarray(labels)
    if feats.ndim != 2 or feats.shape[0] < 2:
        raise DataError(f"need an N x D feature matrix with N >= 2, got {feats.shape}")
    if labs.shape[0] != feats.shape[0]:
        raise DataError("features and labels length mismatch")
    classes = sorted(set(int(v) for v in labs))
    intra_terms = []
    for c in classes:
        members = feats[labs == c]
        if members.shape[0] >= 2:
            intra_terms.append(float(pdist(members).mean()))
    if not intra_terms:
        raise DataError("every class has a single member; intra distance undefined")
    intra = float(np.mean(intra_terms))
    if len(classes) < 2:
        raise DataError("need at least two classes for inter distance")
    if inter_mode == "centroid":
        centroids = np.stack([feats[labs == c].mean(axis=0) for c in classes])
        inter = float(pdist(centroids).mean())
    elif inter_mode == "between":
        cross = []
        for i, a in enumerate(classes):
            for b in classes[i + 1 :]:
                cross.append(cdist(feats[labs == a], feats[labs == b]).ravel())
        inter = float(np.concatenate(cross).mean())
    else:
        raise DataError(f"unknown inter_mode {inter_mode!r}")
    return intra, inter


def embed_2d(features: np.ndarray) -> np.ndarray:
    """Project features to their top-2 principal components.

    Deterministic: each axis's sign is fixed by making the loading with
    the largest magnitude positive; axis 0 carries at least as much
    variance as axis 1.
    """
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] < 3:
        raise DataError(f"need an N x D matrix with N >= 3, got {feats.shape}")
    centered = feats - feats.mean(axis=0)
    u, s, vt = np.linalg.svd(centered, full_matrices=False)
    if s[0] <= 1e-12:
        raise DataError("features have rank 0; nothing to project")
    k = min(2, vt.shape[0])
    comps = vt[:k]
    if k < 2:
        comps = np.vstack([comps, np.zeros_like(comps[0])])
    fixed = []
    for row in comps:
        j = int(np.argmax(np.abs(row)))
        fixed.append(-row if row[j] < 0 else row)
    comps = np.stack(fixed)
    return centered @ comps.T


def dataset_stats(manifest: DatasetManifest, backend, inter_mode: str = "centroid"):
    """Embed every image with a backend and compute DatasetStats plus the
    raw (features, labels, ids) used, for 2-D export."""
    from .anchors import CropResizer
    from .model import FULL_IMAGE_BOX

    if not manifest.samples:
        raise DataError("manifest is empty")
    resizers: dict[tuple[int, int], CropResizer] = {}
    feats, labels, ids = [], [], []
    for s in manifest.samples:
        raster = load_image(manifest.resolve_path(s))
        shape = raster.shape[:2]
        rs = resizers.get(shape)
        if rs is None:
            rs = CropResizer(shape, [FULL_IMAGE_BOX], backend.native_input)
            resizers[shape] = rs
        feats.append(backend.encode_image(rs.apply(raster)[0]))
        labels.append(s.label)
        ids.append(s.image_id)
    features = np.stack(feats)
    labels_arr = np.asarray(labels)
    intra, inter = intra_inter_distance(features, labels_arr, inter_mode=inter_mode)
    stats = DatasetStats(
        intra_dist=intra,
        inter_dist=inter,
        per_class_counts=manifest.per_class_counts,
        n_subjects=len(set(s.subject_id for s in manifest.samples)),
    )
    return stats, features, labels_arr, ids


def render_report(reports: list[tuple[str, EvalReport]], fmt: str = "markdown") -> str:
    """Render one row per report: model name, BBPS0..BBPS3, AVG."""
    if not reports:
        raise DataError("no reports to render")
    rows = []
    for name, rep in reports:
        cells = [round2(v) for v in rep.per_class_acc] + [rep.macro_avg]
        rows.append((name, cells))
    best = max(range(len(rows)), key=lambda i: rows[i][1][4])
    if fmt == "markdown":
        lines = ["| Model | " + " | ".join(CLASS_COLUMNS) + " | AVG |",
                 "|" + "---|" * 6]
        for i, (name, cells) in enumerate(rows):
            text = [f"{v:.2f}" for v in cells]
            if i == best:
                text[4] = f"**{text[4]}**"
            lines.append("| " + " | ".join([name] + text) + " |")
        return "\n".join(lines) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["model", *(c.lower() for c in CLASS_COLUMNS), "avg"])
        for name, cells in rows:
            writer.writerow([name] + [f"{v:.2f}" for v in cells])
        return buf.getvalue()
    if fmt == "json":
        payload = [
            {"model": name, "per_class_acc": cells[:4], "avg": cells[4], "best": i == best}
            for i, (name, cells) in enumerate(rows)
        ]
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"
    raise DataError(f"unknown report format {fmt!r}")


def save_report(report: EvalReport, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n",
                          encoding="utf-8")


def load_report(path: str | Path) -> EvalReport:
    path = Path(path)
    if not path.exists():
        raise DataError(f"report file not found: {path}")
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: malformed report JSON: {exc.msg}") from exc
    return EvalReport.from_dict(obj)
