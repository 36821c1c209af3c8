"""Synthetic shape datasets for foreground segmentation and single-object detection.

Each pair holds an RGB input with one procedurally drawn shape and a binary
white-on-black label image. Segmentation labels are the exact rasterization
of the shape; detection labels are its filled axis-aligned bounding box.

Rasterization convention: pixel ``(i, j)`` is foreground iff its center
``(j + 0.5, i + 0.5)`` lies strictly inside the shape (even-odd rule for
polygons).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image as PILImage

from .seeding import np_rng

SHAPE_CLASSES = (
    "circle",
    "square",
    "triangle",
    "star",
    "cross",
    "ring",
    "crescent",
    "ellipse",
    "diamond",
    "bar",
)
TASK_KINDS = ("segmentation", "detection")
FOREGROUND = 255
BACKGROUND = 0


@dataclass(frozen=True)
class Shape:
    kind: str
    params: dict


@dataclass(frozen=True)
class TaskPair:
    id: str
    input: np.ndarray  # (H, W, 3) float32 in [0, 1]
    label: np.ndarray
    class_id: int
    domain_id: int
    shape: Shape | None = field(default=None, compare=False)


@dataclass(frozen=True)
class Dataset:
    pairs: tuple[TaskPair, ...]
    task_kind: str
    class_roster: dict[int, str]

    def __post_init__(self):
        if self.task_kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.task_kind!r}")
        ids = [p.id for p in self.pairs]
        if len(set(ids)) != len(ids):
            raise ValueError("pair ids must be unique")

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def by_id(self, pair_id: str) -> TaskPair:
        for p in self.pairs:
            if p.id == pair_id:
                return p
        raise KeyError(pair_id)

    @property
    def class_ids(self) -> list[int]:
        return sorted({p.class_id for p in self.pairs})

    def subset(self, keep) -> "Dataset":
        return Dataset(tuple(p for p in self.pairs if keep(p)), self.task_kind, self.class_roster)


@dataclass(frozen=True)
class DatasetSpec:
    classes: Sequence[str] = SHAPE_CLASSES
    per_class_count: int = 16
    image_size: int = 64
    domain_id: int = 0
    seed: int = 0
    task_kind: str = "segmentation"

    def validate(self) -> None:
        if len(self.classes) == 0:
            raise ValueError("dataset spec needs at least one class")
        unknown = [c for c in self.classes if c not in SHAPE_CLASSES]
        if unknown:
            raise ValueError(f"unknown shape classes: {unknown}")
        if self.per_class_count < 1:
            raise ValueError("per_class_count must be >= 1")
        if self.image_size < 16:
            raise ValueError("image_size must be >= 16")
        if self.domain_id not in (0, 1):
            raise ValueError("domain_id must be 0 (flat) or 1 (noise texture)")
        if self.task_kind not in TASK_KINDS:
            raise ValueError(f"task_kind must be one of {TASK_KINDS}")


# ---------------------------------------------------------------------------
# shape sampling and rasterization


def _regular_polygon(cx, cy, radius, n, rot, inner=None):
    pts = []
    step = math.pi / n if inner is not None else 2 * math.pi / n
    count = 2 * n if inner is not None else n
    for k in range(count):
        r = radius if (inner is None or k % 2 == 0) else inner
        a = rot + k * step
        pts.append((cx + r * math.cos(a), cy + r * math.sin(a)))
    return pts


def sample_shape(kind: str, size: int, rng: np.random.Generator) -> Shape:
    """Draw random parameters for one shape of class ``kind`` inside a size x size image."""
    r = float(rng.uniform(0.12, 0.36)) * size
    margin = r + 1.0
    cx = float(rng.uniform(margin, size - margin))
    cy = float(rng.uniform(margin, size - margin))
    rot = float(rng.uniform(0, 2 * math.pi))
    if kind == "circle":
        return Shape(kind, {"cx": cx, "cy": cy, "r": r})
    if kind == "square":
        return Shape(kind, {"cx": cx, "cy": cy, "h": r * 0.8})
    if kind == "triangle":
        return Shape(kind, {"points": _regular_polygon(cx, cy, r, 3, rot)})
    if kind == "star":
        return Shape(kind, {"points": _regular_polygon(cx, cy, r, 5, rot, inner=0.45 * r)})
    if kind == "cross":
        return Shape(kind, {"cx": cx, "cy": cy, "arm": r, "half": max(0.3 * r, 1.5)})
    if kind == "ring":
        return Shape(kind, {"cx": cx, "cy": cy, "r_out": r, "r_in": 0.55 * r})
    if kind == "crescent":
        off = 0.55 * r
        return Shape(kind, {"cx": cx, "cy": cy, "r": r,
                            "bx": cx + off * math.cos(rot), "by": cy + off * math.sin(rot)})
    if kind == "ellipse":
        return Shape(kind, {"cx": cx, "cy": cy, "a": r, "b": r * float(rng.uniform(0.35, 0.7)),
                            "angle": rot})
    if kind == "diamond":
        a, b = r, r * 0.65
        return Shape(kind, {"points": [(cx + a, cy), (cx, cy + b), (cx - a, cy), (cx, cy - b)]})
    if kind == "bar":
        vertical = bool(rng.integers(0, 2))
        return Shape(kind, {"cx": cx, "cy": cy, "long": r, "short": max(0.25 * r, 1.5),
                            "vertical": vertical})
    raise ValueError(f"unknown shape class {kind!r}")


def _inside_polygon(px, py, points):
    inside = np.zeros(px.shape, dtype=bool)
    n = len(points)
    for k in range(n):
        x0, y0 = points[k]
        x1, y1 = points[(k + 1) % n]
        if y0 == y1:
            continue
        crosses = (y0 > py) != (y1 > py)
        x_int = x0 + (py - y0) * (x1 - x0) / (y1 - y0)
        inside ^= crosses & (px < x_int)
    return inside


def rasterize(shape: Shape, size: int) -> np.ndarray:
    """Boolean (size, size) mask of pixel centers strictly inside ``shape``."""
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    p = shape.params
    k = shape.kind
    if k in ("triangle", "star", "diamond"):
        return _inside_polygon(xs, ys, p["points"])
    if k == "circle":
        return (xs - p["cx"]) ** 2 + (ys - p["cy"]) ** 2 < p["r"] ** 2
    if k == "square":
        return (np.abs(xs - p["cx"]) < p["h"]) & (np.abs(ys - p["cy"]) < p["h"])
    if k == "cross":
        dx, dy = np.abs(xs - p["cx"]), np.abs(ys - p["cy"])
        return ((dx < p["arm"]) & (dy < p["half"])) | ((dx < p["half"]) & (dy < p["arm"]))
    if k == "ring":
        d2 = (xs - p["cx"]) ** 2 + (ys - p["cy"]) ** 2
        return (d2 < p["r_out"] ** 2) & ~(d2 < p["r_in"] ** 2)
    if k == "crescent":
        a = (xs - p["cx"]) ** 2 + (ys - p["cy"]) ** 2 < p["r"] ** 2
        b = (xs - p["bx"]) ** 2 + (ys - p["by"]) ** 2 < p["r"] ** 2
        return a & ~b
    if k == "ellipse":
        c, s = math.cos(p["angle"]), math.sin(p["angle"])
        dx, dy = xs - p["cx"], ys - p["cy"]
        u = c * dx + s * dy
        v = -s * dx + c * dy
        return (u / p["a"]) ** 2 + (v / p["b"]) ** 2 < 1.0
    if k == "bar":
        hx, hy = (p["short"], p["long"]) if p["vertical"] else (p["long"], p["short"])
        return (np.abs(xs - p["cx"]) < hx) & (np.abs(ys - p["cy"]) < hy)
    raise ValueError(f"unknown shape class {k!r}")


def bounding_box_mask(mask: np.ndarray) -> np.ndarray:
    """Filled axis-aligned bounding box of the True pixels (empty stays empty)."""
    out = np.zeros_like(mask, dtype=bool)
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size:
        out[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1] = True
    return out


# ---------------------------------------------------------------------------
# colours and backgrounds


def _luma(rgb) -> float:
    r, g, b = (float(c) for c in rgb)
    return 0.299 * r + 0.587 * g + 0.114 * b


def _background(size, domain_id, fg_rgb, rng):
    base = rng.integers(0, 256, size=3).astype(np.float64)
    # keep the mean background at least ~70 luma levels away from the shape colour
    tries = 0
    while abs(_luma(base) - _luma(fg_rgb)) < 70 and tries < 64:
        base = rng.integers(0, 256, size=3).astype(np.float64)
        tries += 1
    if abs(_luma(base) - _luma(fg_rgb)) < 70:
        base = np.full(3, 0.0 if _luma(fg_rgb) > 127 else 255.0)
    img = np.broadcast_to(base, (size, size, 3)).copy()
    if domain_id == 1:
        noise = rng.uniform(-70, 70, size=(size, size, 3))
        img = img + noise
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def _to_float(img_u8: np.ndarray) -> np.ndarray:
    out = img_u8.astype(np.float32) / np.float32(255.0)
    out.setflags(write=False)
    return out


def render_pair(shape: Shape, fg_rgb, size, domain_id, task_kind, bg_rng):
    mask = rasterize(shape, size)
    canvas = _background(size, domain_id, fg_rgb, bg_rng)
    canvas[mask] = np.asarray(fg_rgb, dtype=np.uint8)
    label_mask = mask if task_kind == "segmentation" else bounding_box_mask(mask)
    label = np.where(label_mask[..., None], FOREGROUND, BACKGROUND).astype(np.uint8)
    label = np.repeat(label, 3, axis=2)
    return canvas, label


def generate_dataset(spec: DatasetSpec) -> Dataset:
    """Build ``len(spec.classes) * spec.per_class_count`` pairs, deterministically.

    Shape geometry and foreground colour come from a stream keyed on
    (seed, class name, index) only, so datasets that differ in ``domain_id``
    share identical shapes and labels and differ only in their backgrounds.
    """
    spec.validate()
    pairs = []
    n = 0
    for class_id, name in enumerate(spec.classes):
        for i in range(spec.per_class_count):
            shape_rng = np_rng(spec.seed, "shape", name, i)
            shape = sample_shape(name, spec.image_size, shape_rng)
            fg = shape_rng.integers(0, 256, size=3)
            bg_rng = np_rng(spec.seed, "background", spec.domain_id, name, i)
            img, label = render_pair(shape, fg, spec.image_size, spec.domain_id,
                                     spec.task_kind, bg_rng)
            pairs.append(TaskPair(f"{n:05d}", _to_float(img), _to_float(label), class_id,
                                  spec.domain_id, shape))
            n += 1
    roster = {i: name for i, name in enumerate(spec.classes)}
    return Dataset(tuple(pairs), spec.task_kind, roster)


def split_folds(d: Dataset, fold_count: int) -> list[tuple[Dataset, Dataset]]:
    """Held-out class folds: fold i tests the i-th contiguous class group, trains on the rest."""
    classes = sorted(d.class_roster)
    if fold_count < 1 or len(classes) % fold_count:
        raise ValueError(f"{len(classes)} classes cannot be split into {fold_count} folds")
    k = len(classes) // fold_count
    folds = []
    for i in range(fold_count):
        test_classes = set(classes[i * k:(i + 1) * k])
        train = d.subset(lambda p: p.class_id not in test_classes)
        test = d.subset(lambda p: p.class_id in test_classes)
        folds.append((train, test))
    return folds


def foreground_fraction(label: np.ndarray) -> float:
    fg = label.mean(axis=2) > 0.5
    return float(fg.sum()) / fg.size


def apply_area_filter(d: Dataset, max_fraction: float) -> Dataset:
    """Keep detection pairs whose box covers less than ``max_fraction`` of the image."""
    if not 0 < max_fraction <= 1:
        raise ValueError("max_fraction must lie in (0, 1]")
    if d.task_kind != "detection":
        raise ValueError("area filter applies to detection datasets only")
    if max_fraction >= 1:
        return d
    return d.subset(lambda p: foreground_fraction(p.label) < max_fraction)


def subsample_per_class(d: Dataset, count: int | None, seed: int) -> Dataset:
    """Seeded draw of ``count`` pairs per class; ``None`` or a large count keeps everything."""
    keep = set()
    for c in d.class_ids:
        ids = [p.id for p in d.pairs if p.class_id == c]
        if count is None or count >= len(ids):
            keep.update(ids)
        else:
            rng = np_rng(seed, "subsample", c, count)
            keep.update(ids[j] for j in rng.choice(len(ids), size=count, replace=False))
    return d.subset(lambda p: p.id in keep)


# ---------------------------------------------------------------------------
# persistence


def _png_bytes_u8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def save_image(img: np.ndarray, path: Path) -> None:
    PILImage.fromarray(_png_bytes_u8(img), mode="RGB").save(path, format="PNG")


def load_image(path: Path) -> np.ndarray:
    with PILImage.open(path) as im:
        return _to_float(np.asarray(im.convert("RGB"), dtype=np.uint8))


def save_dataset(d: Dataset, directory: Path, extra: dict | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for p in d.pairs:
        inp, lab = f"{p.id}_input.png", f"{p.id}_label.png"
        save_image(p.input, directory / inp)
        save_image(p.label, directory / lab)
        entries.append({"id": p.id, "class_id": p.class_id, "domain_id": p.domain_id,
                        "input": inp, "label": lab})
    domains = sorted({p.domain_id for p in d.pairs})
    manifest = {
        "task_kind": d.task_kind,
        "domain_id": domains[0] if len(domains) == 1 else domains,
        "class_roster": {str(k): v for k, v in sorted(d.class_roster.items())},
        "pairs": entries,
    }
    if extra:
        manifest["spec"] = extra
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_dataset(directory: Path) -> Dataset:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    pairs = []
    for e in manifest["pairs"]:
        pairs.append(TaskPair(e["id"], load_image(directory / e["input"]),
                              load_image(directory / e["label"]), int(e["class_id"]),
                              int(e["domain_id"])))
    roster = {int(k): v for k, v in manifest["class_roster"].items()}
    return Dataset(tuple(pairs), manifest["task_kind"], roster)
