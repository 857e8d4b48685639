"""Anchor grid generation and fixed-size patch extraction.

Anchors are rectangular region proposals laid out on regular grids in
normalized image coordinates, one box per grid cell, stretched to a set
of aspect ratios (1:1, 2:1, 1:2, 3:1, 1:3 in the default layout). Boxes
that would cross the image border are shrunk uniformly so the aspect
ratio survives. The default layout places 180 boxes: squares on 8x8 and
4x4 grids plus each rectangular ratio on a 5x5 grid.

``crop_resize`` cuts a box out of an image and resamples it bilinearly
to a fixed size (half-pixel-center convention, edges clamped).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ConfigError

ASPECT_RATIOS = ("1:1", "2:1", "1:2", "3:1", "1:3")
PRESET_COUNTS = (22, 37, 52, 85, 180, 353, 564)
DEFAULT_PRESET = 180


@dataclass(frozen=True)
class AnchorBox:
    """Axis-aligned box in normalized coordinates: center plus extents."""

    cx: float
    cy: float
    w: float
    h: float

    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    def validate(self) -> None:
        x0, y0, x1, y1 = self.corners()
        if not (self.w > 0 and self.h > 0):
            raise ConfigError(f"anchor box has non-positive extent: w={self.w}, h={self.h}")
        if x0 < 0 or y0 < 0 or x1 > 1 or y1 > 1:
            raise ConfigError(f"anchor box leaves the unit square: {(x0, y0, x1, y1)}")


@dataclass(frozen=True)
class AnchorEntry:
    """One grid in an anchor layout: rows x cols cells at a w:h ratio."""

    rows: int
    cols: int
    ratio_w: float = 1.0
    ratio_h: float = 1.0
    coverage: float = 1.0

    @property
    def ratio(self) -> float:
        return self.ratio_w / self.ratio_h

    @property
    def ratio_text(self) -> str:
        def fmt(v: float) -> str:
            return str(int(v)) if float(v).is_integer() else repr(v)

        return f"{fmt(self.ratio_w)}:{fmt(self.ratio_h)}"

    def validate(self) -> None:
        if self.rows < 1 or self.cols < 1:
            raise ConfigError(f"grid dims must be >= 1, got {self.rows}x{self.cols}")
        if self.ratio_w <= 0 or self.ratio_h <= 0:
            raise ConfigError(f"aspect ratio terms must be positive, got {self.ratio_text}")
        if not 0 < self.coverage <= 1:
            raise ConfigError(f"coverage must lie in (0, 1], got {self.coverage}")


@dataclass(frozen=True)
class AnchorConfig:
    entries: tuple[AnchorEntry, ...]
    name: str = ""

    @property
    def total(self) -> int:
        return sum(e.rows * e.cols for e in self.entries)

    def validate(self) -> None:
        if not self.entries:
            raise ConfigError("anchor config has no entries")
        for e in self.entries:
            e.validate()

    def to_dict(self) -> dict:
        return {
            "entries": [
                {"rows": e.rows, "cols": e.cols, "ratio": e.ratio_text, "coverage": e.coverage}
                for e in self.entries
            ]
        }


def _parse_ratio(text: str) -> tuple[float, float]:
    parts = text.split(":")
    if len(parts) != 2:
        raise ConfigError(f"aspect ratio must look like '2:1', got {text!r}")
    try:
        rw, rh = float(parts[0]), float(parts[1])
    except ValueError as exc:
        raise ConfigError(f"aspect ratio must look like '2:1', got {text!r}") from exc
    return rw, rh


def anchor_config_from_dict(obj: dict, name: str = "") -> AnchorConfig:
    if not isinstance(obj, dict) or "entries" not in obj:
        raise ConfigError("anchor config must be an object with an 'entries' array")
    entries = []
    for i, raw in enumerate(obj["entries"]):
        if not isinstance(raw, dict):
            raise ConfigError(f"anchor entry {i} must be an object")
        try:
            rows = int(raw["rows"])
            cols = int(raw["cols"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"anchor entry {i} needs integer 'rows' and 'cols'") from exc
        rw, rh = _parse_ratio(str(raw.get("ratio", "1:1")))
        coverage = float(raw.get("coverage", 1.0))
        entries.append(AnchorEntry(rows=rows, cols=cols, ratio_w=rw, ratio_h=rh, coverage=coverage))
    config = AnchorConfig(entries=tuple(entries), name=name)
    config.validate()
    return config


def load_anchor_config(path: str | Path) -> AnchorConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"anchor config file not found: {path}")
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed anchor config JSON: {exc.msg}") from exc
    return anchor_config_from_dict(obj, name=path.stem)


def preset_anchor_config(key: int | str = DEFAULT_PRESET) -> AnchorConfig:
    """Load one of the packaged layouts, keyed by total anchor count."""
    if isinstance(key, str):
        if key in ("default", ""):
            key = DEFAULT_PRESET
        else:
            try:
                key = int(key)
            except ValueError as exc:
                raise ConfigError(f"unknown anchor preset {key!r}") from exc
    if key not in PRESET_COUNTS:
        raise ConfigError(f"no anchor preset with {key} boxes; available: {PRESET_COUNTS}")
    ref = resources.files("raffnet").joinpath(f"configs/anchors/n{key}.json")
    obj = json.loads(ref.read_text(encoding="utf-8"))
    return anchor_config_from_dict(obj, name=f"n{key}")


def default_anchor_config() -> AnchorConfig:
    return preset_anchor_config(DEFAULT_PRESET)


def generate_anchors(config: AnchorConfig) -> list[AnchorBox]:
    """Lay out one box per grid cell, entry by entry, row-major in each grid.

    The base box fills ``coverage`` of the cell, then is stretched to the
    entry's aspect ratio at constant area. A box poking outside [0,1]^2 is
    shrunk uniformly about its center until it fits, which keeps the ratio
    intact. Pure function of the config.
    """
    config.validate()
    boxes: list[AnchorBox] = []
    for entry in config.entries:
        w0 = entry.coverage / entry.cols
        h0 = entry.coverage / entry.rows
        area = w0 * h0
        half_w = math.sqrt(area * entry.ratio) / 2.0
        half_h = math.sqrt(area / entry.ratio) / 2.0
        for i in range(entry.rows):
            for j in range(entry.cols):
                cx = (j + 0.5) / entry.cols
                cy = (i + 0.5) / entry.rows
                scale = min(1.0, cx / half_w, (1.0 - cx) / half_w, cy / half_h, (1.0 - cy) / half_h)
                # The extra min() guards the <= bound against rounding when
                # the scale binds exactly at a border.
                hw = min(half_w * scale, cx, 1.0 - cx)
                hh = min(half_h * scale, cy, 1.0 - cy)
                if hw <= 0.0 or hh <= 0.0:
                    raise ConfigError(
                        f"entry {entry} produced a degenerate box at cell ({i},{j})"
                    )
                box = AnchorBox(cx=cx, cy=cy, w=2.0 * hw, h=2.0 * hh)
                box.validate()
                boxes.append(box)
    return boxes


def _axis_samples(start_px: float, length_px: float, in_size: int, out_size: int):
    """Gather indices and interpolation weights for one resampled axis.

    Output sample centers sit at half-pixel offsets of the target grid
    mapped into the source crop; source coordinates are clamped at the
    edges (index clamping makes out-of-range taps replicate the border).
    """
    j = np.arange(out_size, dtype=np.float64)
    src = start_px + (j + 0.5) * (length_px / out_size) - 0.5
    lo = np.floor(src)
    frac = src - lo
    lo = lo.astype(np.int64)
    lo_c = np.clip(lo, 0, in_size - 1)
    hi_c = np.clip(lo + 1, 0, in_size - 1)
    return lo_c, hi_c, frac


def crop_resize(image: np.ndarray, box: AnchorBox, out_size: tuple[int, int]) -> np.ndarray:
    """Bilinearly resample the sub-rectangle under ``box`` to ``out_size``.

    Interpolation runs in float64 and the result is cast back to the
    input dtype. A full-image box at the input size reproduces the image
    exactly.
    """
    out_h, out_w = int(out_size[0]), int(out_size[1])
    if out_h < 1 or out_w < 1:
        raise ConfigError(f"output size must be >= 1x1, got {out_size}")
    box.validate()
    h, w = image.shape[0], image.shape[1]
    x0, y0, x1, y1 = box.corners()
    ylo, yhi, fy = _axis_samples(y0 * h, (y1 - y0) * h, h, out_h)
    xlo, xhi, fx = _axis_samples(x0 * w, (x1 - x0) * w, w, out_w)
    img = image.astype(np.float64, copy=False)
    rows = img[ylo] * (1.0 - fy)[:, None, None] + img[yhi] * fy[:, None, None]
    out = rows[:, xlo] * (1.0 - fx)[None, :, None] + rows[:, xhi] * fx[None, :, None]
    return out.astype(image.dtype, copy=False)


class CropResizer:
    """Precomputed crop_resize over a fixed box list and input shape.

    Gather indices and weights depend only on (input shape, boxes,
    out_size), so they are built once and reused across images. apply()
    evaluates the same expression as crop_resize box by box, which makes
    the stacked result bitwise identical to sequential single-box calls.
    """

    def __init__(self, in_shape: tuple[int, int], boxes: list[AnchorBox], out_size: tuple[int, int]):
        h, w = int(in_shape[0]), int(in_shape[1])
        out_h, out_w = int(out_size[0]), int(out_size[1])
        if out_h < 1 or out_w < 1:
            raise ConfigError(f"output size must be >= 1x1, got {out_size}")
        ylo, yhi, fy, xlo, xhi, fx = [], [], [], [], [], []
        for box in boxes:
            box.validate()
            x0, y0, x1, y1 = box.corners()
            a, b, c = _axis_samples(y0 * h, (y1 - y0) * h, h, out_h)
            d, e, f = _axis_samples(x0 * w, (x1 - x0) * w, w, out_w)
            ylo.append(a), yhi.append(b), fy.append(c)
            xlo.append(d), xhi.append(e), fx.append(f)
        self.in_shape = (h, w)
        self.out_size = (out_h, out_w)
        self.n_boxes = len(boxes)
        self._ylo = np.stack(ylo) if boxes else np.zeros((0, out_h), dtype=np.int64)
        self._yhi = np.stack(yhi) if boxes else np.zeros((0, out_h), dtype=np.int64)
        self._fy = np.stack(fy) if boxes else np.zeros((0, out_h))
        self._xlo = np.stack(xlo) if boxes else np.zeros((0, out_w), dtype=np.int64)
        self._xhi = np.stack(xhi) if boxes else np.zeros((0, out_w), dtype=np.int64)
        self._fx = np.stack(fx) if boxes else np.zeros((0, out_w))

    def apply(self, image: np.ndarray) -> np.ndarray:
        """All crops of one image, shape (n_boxes, out_h, out_w, channels)."""
        if image.shape[:2] != self.in_shape:
            raise ConfigError(
                f"image shape {image.shape[:2]} does not match precomputed {self.in_shape}"
            )
        img = image.astype(np.float64, copy=False)
        rows = (
            img[self._ylo] * (1.0 - self._fy)[:, :, None, None]
            + img[self._yhi] * self._fy[:, :, None, None]
        )
        xlo = self._xlo[:, None, :, None]
        xhi = self._xhi[:, None, :, None]
        out = (
            np.take_along_axis(rows, xlo, axis=2) * (1.0 - self._fx)[:, None, :, None]
            + np.take_along_axis(rows, xhi, axis=2) * self._fx[:, None, :, None]
        )
        return out.astype(image.dtype, copy=False)
