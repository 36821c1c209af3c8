"""Nearest-neighbour selection of the in-context pair.

The pair whose input image has the largest dot product with the query in an
l2-normalised feature space is chosen. Ties go to the smallest pair id, and
degenerate (all-zero) entries lose ties to regular ones.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .data import Dataset

GRID = 16
LUMA = np.array([0.299, 0.587, 0.114])
_MAGIC = b"VICIDX1\n"


class EmptySupportError(LookupError):
    """Every index entry was excluded."""


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray  # float32, unit norm unless degenerate
    degenerate: bool = False


def _normalise(v: np.ndarray) -> FeatureVector:
    v = np.asarray(v, dtype=np.float64).ravel()
    n = float(np.sqrt(np.dot(v, v)))
    if n == 0.0:
        return FeatureVector(np.zeros(v.shape, dtype=np.float32), True)
    return FeatureVector((v / n).astype(np.float32))


def downsample_gray(img: np.ndarray, grid: int = GRID) -> np.ndarray:
    """Bilinear resize to grid x grid (half-pixel centres, no antialiasing), then luma."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] == 0 or img.shape[1] == 0:
        raise ValueError("expected a non-empty (H, W, 3) image")
    t = torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1)))[None]
    small = F.interpolate(t, size=(grid, grid), mode="bilinear", align_corners=False)
    small = small[0].numpy().transpose(1, 2, 0)
    return small @ LUMA


class PixelExtractor:
    """Training-free default: downsampled grayscale pixels."""

    tag = f"pixel-gray-{GRID}"

    def __call__(self, img: np.ndarray) -> FeatureVector:
        return _normalise(downsample_gray(img))


def extract_features(img: np.ndarray) -> FeatureVector:
    return PixelExtractor()(img)


@dataclass(frozen=True)
class RetrievalIndex:
    ids: tuple[str, ...]
    vectors: np.ndarray  # (n, dim) float32
    degenerate: np.ndarray  # (n,) bool
    extractor_tag: str

    def __len__(self) -> int:
        return len(self.ids)

    def similarities(self, q: FeatureVector) -> np.ndarray:
        # elementwise product + row sum: identical rows give bit-identical scores,
        # which BLAS gemv does not guarantee and exact ties depend on
        return np.sum(self.vectors.astype(np.float64) * q.values.astype(np.float64), axis=1)


def build_index(d: Dataset, extractor: Callable[[np.ndarray], FeatureVector] | None = None) -> RetrievalIndex:
    if len(d) == 0:
        raise ValueError("cannot index an empty dataset")
    extractor = extractor or PixelExtractor()
    feats = [extractor(p.input) for p in d.pairs]
    vectors = np.stack([f.values for f in feats]).astype(np.float32)
    vectors.setflags(write=False)
    degenerate = np.array([f.degenerate for f in feats])
    degenerate.setflags(write=False)
    tag = getattr(extractor, "tag", type(extractor).__name__)
    return RetrievalIndex(tuple(p.id for p in d.pairs), vectors, degenerate, tag)


def _best(idx: RetrievalIndex, sims: np.ndarray, exclude) -> str:
    best = None
    best_key = None
    for i, pid in enumerate(idx.ids):
        if pid == exclude:
            continue
        key = (-sims[i], bool(idx.degenerate[i]), pid)
        if best_key is None or key < best_key:
            best, best_key = pid, key
    if best is None:
        raise EmptySupportError("empty support set: every index entry is excluded")
    return best


def retrieve(idx: RetrievalIndex, query: np.ndarray, exclude: str | None = None,
             extractor: Callable[[np.ndarray], FeatureVector] | None = None) -> str:
    """Id of the most similar non-excluded entry."""
    extractor = extractor or PixelExtractor()
    return _best(idx, idx.similarities(extractor(query)), exclude)


def retrieve_many(idx: RetrievalIndex, queries: Sequence[np.ndarray],
                  excludes: Sequence[str | None] | None = None,
                  extractor: Callable[[np.ndarray], FeatureVector] | None = None) -> list[str]:
    extractor = extractor or PixelExtractor()
    excludes = excludes if excludes is not None else [None] * len(queries)
    out = []
    for img, ex in zip(queries, excludes):
        row = idx.similarities(extractor(img))
        # fast path: unique maximum that is not excluded and not degenerate
        order = np.argsort(-row, kind="stable")
        top = order[0]
        if idx.ids[top] != ex and (len(row) == 1 or row[order[1]] < row[top]) and not idx.degenerate[top]:
            out.append(idx.ids[top])
        else:
            out.append(_best(idx, row, ex))
    return out


class TokenizerExtractor:
    """Alternative extractor: mean-pooled encoder features of a frozen backbone tokenizer.

    The image is placed in every canvas cell so the encoder sees its usual input size.
    """

    def __init__(self, bundle):
        self.bundle = bundle
        self.tag = f"tokenizer-{bundle.fingerprint[:12]}"

    def __call__(self, img: np.ndarray) -> FeatureVector:
        from .canvas import compose_gt_canvas, to_tensor

        t = to_tensor(img)
        cv = compose_gt_canvas(t, t, t, t, self.bundle.cell_size)
        with torch.no_grad():
            z = self.bundle.encode(cv)[0]
        return _normalise(z.mean(dim=(1, 2)).double().numpy())


def save_index(idx: RetrievalIndex, path: Path) -> None:
    header = json.dumps({"extractor_tag": idx.extractor_tag, "dim": int(idx.vectors.shape[1]),
                         "count": len(idx), "ids": list(idx.ids),
                         "degenerate": [bool(x) for x in idx.degenerate]}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(idx.vectors.astype("<f4").tobytes(order="C"))


def load_index(path: Path) -> RetrievalIndex:
    raw = Path(path).read_bytes()
    if not raw.startswith(_MAGIC):
        raise ValueError(f"{path}: not a retrieval index file")
    (hlen,) = struct.unpack_from("<I", raw, len(_MAGIC))
    start = len(_MAGIC) + 4
    header = json.loads(raw[start:start + hlen])
    body = raw[start + hlen:]
    n, dim = header["count"], header["dim"]
    if len(body) != 4 * n * dim:
        raise ValueError(f"{path}: truncated vector payload")
    vectors = np.frombuffer(body, dtype="<f4").reshape(n, dim).astype(np.float32)
    vectors.setflags(write=False)
    degenerate = np.array(header["degenerate"], dtype=bool)
    return RetrievalIndex(tuple(header["ids"]), vectors, degenerate, header["extractor_tag"])
