"""Query -> retrieved pair -> (enhanced) canvas -> tokens -> decoded label."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .backbone import BackboneBundle
from .canvas import compose_canvas, compose_gt_canvas, extract_cell, resize, to_tensor
from .data import Dataset, TaskPair
from .prompt import PromptParams, apply_placement
from .retrieval import RetrievalIndex, retrieve_many


@dataclass
class PreparedQueries:
    """Tensors for a set of queries and their retrieved in-context pairs, at prompt resolution."""

    query_ids: list[str]
    retrieved_ids: list[str]
    class_ids: list[int]
    x: torch.Tensor
    y: torch.Tensor
    xq: torch.Tensor
    yq: torch.Tensor

    def __len__(self) -> int:
        return len(self.query_ids)

    def take(self, rows) -> "PreparedQueries":
        rows = list(rows)
        t = torch.as_tensor(rows, dtype=torch.long)
        return PreparedQueries([self.query_ids[i] for i in rows], [self.retrieved_ids[i] for i in rows],
                               [self.class_ids[i] for i in rows], self.x[t], self.y[t], self.xq[t], self.yq[t])

    def to(self, dtype) -> "PreparedQueries":
        return PreparedQueries(self.query_ids, self.retrieved_ids, self.class_ids,
                               *(t.to(dtype) for t in (self.x, self.y, self.xq, self.yq)))


def _stack(imgs, resolution):
    return resize(to_tensor(np.stack(imgs)), resolution)


def prepare_queries(queries: Sequence[TaskPair], idx: RetrievalIndex, pool: Dataset, resolution: int,
                    leave_one_out: bool = False) -> PreparedQueries:
    """Retrieve an in-context pair for every query; ``leave_one_out`` excludes the query's own id."""
    excludes = [q.id for q in queries] if leave_one_out else None
    rids = retrieve_many(idx, [q.input for q in queries], excludes)
    lookup = {p.id: p for p in pool.pairs}
    ctx = [lookup[r] for r in rids]
    return PreparedQueries(
        [q.id for q in queries], rids, [q.class_id for q in queries],
        _stack([p.input for p in ctx], resolution), _stack([p.label for p in ctx], resolution),
        _stack([q.input for q in queries], resolution), _stack([q.label for q in queries], resolution),
    )


def masked_canvas(x, y, xq, cell: int, prompt: PromptParams | None = None, placement="I&L"):
    if prompt is not None:
        x, y, xq = apply_placement(x, y, xq, prompt, placement)
    return compose_canvas(x, y, xq, cell)


def gt_tokens(prep: PreparedQueries, bundle: BackboneBundle, batch: int = 128) -> torch.Tensor:
    """Tokenizer argmax on the un-enhanced ground-truth canvases."""
    out = []
    for s in range(0, len(prep), batch):
        sl = slice(s, s + batch)
        cv = compose_gt_canvas(prep.x[sl], prep.y[sl], prep.xq[sl], prep.yq[sl], bundle.cell_size)
        out.append(bundle.tokenize(cv))
    return torch.cat(out)


@dataclass
class Predictions:
    tokens: torch.Tensor  # (n, rows, cols)
    labels: torch.Tensor  # (n, 3, C, C) decoded bottom-right cells


def predict(prep: PreparedQueries, bundle: BackboneBundle, prompt: PromptParams | None = None,
            placement="I&L", batch: int = 64) -> Predictions:
    toks, labs = [], []
    with torch.no_grad():
        for s in range(0, len(prep), batch):
            sl = slice(s, s + batch)
            cv = masked_canvas(prep.x[sl], prep.y[sl], prep.xq[sl], bundle.cell_size, prompt, placement)
            z = bundle.predict_tokens(cv)
            toks.append(z)
            labs.append(extract_cell(bundle.decode(z), "BR"))
    return Predictions(torch.cat(toks), torch.cat(labs))


def binarize(img, threshold: float = 0.5):
    """Foreground where the channel mean exceeds ``threshold``.

    Accepts a (..., 3, H, W) tensor or an (H, W, 3) array.
    """
    if isinstance(img, torch.Tensor):
        return img.mean(dim=-3) > threshold
    return np.asarray(img).mean(axis=-1) > threshold


def target_masks(prep: PreparedQueries, cell: int) -> torch.Tensor:
    return binarize(resize(prep.yq, cell))


def class_miou(pred: torch.Tensor, gt: torch.Tensor, class_ids: Sequence[int]) -> dict[int, float]:
    """Class-accumulated foreground IoU: sum of intersections over sum of unions per class."""
    out = {}
    cls = torch.as_tensor(list(class_ids))
    for c in sorted(set(int(k) for k in class_ids)):
        sel = cls == c
        p, g = pred[sel], gt[sel]
        inter = int((p & g).sum())
        union = int((p | g).sum())
        out[c] = 1.0 if union == 0 else inter / union
    return out


def fold_score(prep: PreparedQueries, bundle: BackboneBundle, prompt=None, placement="I&L") -> float:
    pr = predict(prep, bundle, prompt, placement)
    per = class_miou(binarize(pr.labels), target_masks(prep, bundle.cell_size), prep.class_ids)
    return float(np.mean(list(per.values())))
