"""Prediction records, mIoU scoring and the experiment matrix.

Every experiment returns an :class:`ExperimentReport`: a flat table of rows,
an optional long-format per-class table, the resolved configuration and the
fingerprints of the backbone and of every trained prompt. Reports carry no
timestamps so identical configs and seeds give byte-identical files.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
from PIL import Image

from .backbone import BackboneBundle
from .canvas import resize, to_tensor
from .data import Dataset, TaskPair, subsample_per_class
from .pipeline import binarize, gt_tokens, predict, prepare_queries
from .prompt import PLACEMENTS, PromptParams, param_count
from .retrieval import RetrievalIndex, build_index
from .trainer import TrainConfig, TrainHistory, train_prompt

log = logging.getLogger(__name__)

BASELINE = "baseline"
PROMPTED = "prompt"
DATASET_SIZES = (16, 32, 64, 128, 256, None)  # None = every image of the class
BINARIZE_THRESHOLD = 0.5
SCORING = {"miou": "class-accumulated intersection / union", "binarize": "channel mean > 0.5"}


@dataclass
class PredictionRecord:
    query_id: str
    retrieved_id: str
    class_id: int
    label: np.ndarray  # (C, C, 3) decoded bottom-right cell
    mask: np.ndarray  # (C, C) bool
    iou: float


def _iou(p: np.ndarray, g: np.ndarray) -> float:
    union = int((p | g).sum())
    return 1.0 if union == 0 else int((p & g).sum()) / union


def predict_records(queries: Sequence[TaskPair], idx: RetrievalIndex, pool: Dataset, bundle: BackboneBundle,
                    prompt: PromptParams | None = None, placement: str = "I&L",
                    resolution: int | None = None) -> list[PredictionRecord]:
    """Batched prediction; ``prompt=None`` is the plain retrieval baseline."""
    if len(pool) == 0:
        raise ValueError("retrieval pool is empty")
    if not queries:
        return []
    res = prompt.resolution if prompt is not None else (resolution or queries[0].input.shape[0])
    prep = prepare_queries(list(queries), idx, pool, res)
    out = predict(prep, bundle, prompt, placement)
    labels = out.labels.permute(0, 2, 3, 1).numpy()
    masks = binarize(out.labels).numpy()
    gts = binarize(resize(prep.yq, bundle.cell_size)).numpy()
    return [PredictionRecord(q.id, r, q.class_id, labels[k], masks[k], _iou(masks[k], gts[k]))
            for k, (q, r) in enumerate(zip(queries, prep.retrieved_ids))]


def predict_label(query: TaskPair, idx: RetrievalIndex, pool: Dataset, bundle: BackboneBundle,
                  prompt: PromptParams | None = None, placement: str = "I&L",
                  resolution: int | None = None) -> PredictionRecord:
    return predict_records([query], idx, pool, bundle, prompt, placement, resolution)[0]


def miou(preds: Mapping[int, Sequence[np.ndarray]], gts: Mapping[int, Sequence[np.ndarray]]):
    """Per-class IoU (intersections and unions summed over the class's images) and their mean."""
    if set(preds) != set(gts):
        raise ValueError("prediction and ground-truth classes differ")
    per = {}
    for c in sorted(preds):
        if len(preds[c]) != len(gts[c]):
            raise ValueError(f"class {c}: {len(preds[c])} predictions vs {len(gts[c])} ground truths")
        inter = union = 0
        for p, g in zip(preds[c], gts[c]):
            p, g = np.asarray(p, bool), np.asarray(g, bool)
            if p.shape != g.shape:
                raise ValueError(f"mask shapes {p.shape} and {g.shape} differ")
            inter += int((p & g).sum())
            union += int((p | g).sum())
        per[c] = 1.0 if union == 0 else inter / union
    return per, float(np.mean(list(per.values()))) if per else float("nan")


def ground_truth_masks(queries: Sequence[TaskPair], cell: int) -> dict[str, np.ndarray]:
    y = resize(to_tensor(np.stack([q.label for q in queries])), cell)
    return {q.id: m for q, m in zip(queries, binarize(y).numpy())}


def score_records(records: Sequence[PredictionRecord], gts: Mapping[str, np.ndarray]):
    preds: dict[int, list] = {}
    truth: dict[int, list] = {}
    for r in records:
        preds.setdefault(r.class_id, []).append(r.mask)
        truth.setdefault(r.class_id, []).append(gts[r.query_id])
    return miou(preds, truth)


def token_agreement_grids(pred: torch.Tensor, gt: torch.Tensor, mask: torch.Tensor) -> float:
    """Fraction of masked positions where two token grids agree."""
    if pred.shape != gt.shape:
        raise ValueError("token grids differ in shape")
    sel = mask.bool().expand_as(pred)
    total = int(sel.sum())
    if total == 0:
        raise ValueError("mask selects no positions")
    return int((pred == gt)[sel].sum()) / total


def token_agreement(queries: Sequence[TaskPair], prompt: PromptParams | None, bundle: BackboneBundle,
                    idx: RetrievalIndex, pool: Dataset, placement: str = "I&L",
                    resolution: int | None = None) -> float:
    res = prompt.resolution if prompt is not None else (resolution or queries[0].input.shape[0])
    prep = prepare_queries(list(queries), idx, pool, res)
    out = predict(prep, bundle, prompt, placement)
    return token_agreement_grids(out.tokens, gt_tokens(prep, bundle), bundle.mask.grid)


def prompt_fingerprint(prompt: PromptParams) -> str:
    h = hashlib.sha256()
    h.update(json.dumps([prompt.resolution, prompt.pad, prompt.delta]).encode())
    h.update(prompt.theta.detach().to(torch.float32).contiguous().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# reports


@dataclass
class ExperimentReport:
    kind: str
    config: dict
    rows: list[dict]
    per_class: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)
    matrix: list[list[float]] | None = None
    # arm -> records; kept in memory for re-aggregation and rendering, persisted separately
    records: dict[str, list[PredictionRecord]] = field(default_factory=dict, repr=False)
    histories: dict[str, TrainHistory] = field(default_factory=dict, repr=False)

    @property
    def columns(self) -> list[str]:
        cols: list[str] = []
        for r in self.rows:
            cols.extend(k for k in r if k not in cols)
        return cols

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "config": self.config, "columns": self.columns, "rows": self.rows,
             "per_class": self.per_class, "summary": self.summary, "provenance": self.provenance,
             "scoring": SCORING}
        if self.matrix is not None:
            d["matrix"] = self.matrix
        return d

    def to_json(self, path: Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def to_csv(self, path: Path) -> None:
        Path(path).write_text(_csv_text(self.rows, self.columns))
        if self.per_class:
            cols = list(self.per_class[0])
            Path(path).with_name(Path(path).stem + "_per_class.csv").write_text(_csv_text(self.per_class, cols))

    def check_bounds(self) -> None:
        for r in self.rows + self.per_class:
            for k, v in r.items():
                if k in SCORE_COLUMNS and v is not None and not 0.0 <= v <= 1.0:
                    raise ValueError(f"score {k}={v} outside [0, 1]")


SCORE_COLUMNS = {"mIoU", "iou", "baseline_mIoU", "prompt_mIoU", "in_domain", "shifted", "agreement"}


def _csv_text(rows, cols) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r.get(k)) for k in cols})
    return buf.getvalue()


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.8f}"
    return v


def load_report(path: Path) -> dict:
    return json.loads(Path(path).read_text())


def save_records(records: Sequence[PredictionRecord], directory: Path) -> None:
    """``records.json`` (ids, class, IoU) plus ``labels.npy`` (N, C, C, 3 float32)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = [{"query_id": r.query_id, "retrieved_id": r.retrieved_id, "class_id": r.class_id, "iou": r.iou}
            for r in records]
    (directory / "records.json").write_text(json.dumps(meta, indent=1) + "\n")
    labels = np.stack([r.label for r in records]).astype(np.float32) if records else np.zeros((0, 1, 1, 3), np.float32)
    np.save(directory / "labels.npy", labels)


def load_records(directory: Path) -> list[PredictionRecord]:
    directory = Path(directory)
    meta_path, lab_path = directory / "records.json", directory / "labels.npy"
    for p in (meta_path, lab_path):
        if not p.exists():
            raise FileNotFoundError(f"missing prediction record file {p}")
    meta = json.loads(meta_path.read_text())
    labels = np.load(lab_path)
    if len(labels) != len(meta):
        raise ValueError(f"{len(meta)} records but {len(labels)} label images")
    return [PredictionRecord(m["query_id"], m["retrieved_id"], m["class_id"], lab,
                             binarize(lab, BINARIZE_THRESHOLD), m["iou"])
            for m, lab in zip(meta, labels)]


# ---------------------------------------------------------------------------
# experiments


def _base_config(cfg: TrainConfig, **extra) -> dict:
    return {"train": asdict(cfg), **extra}


def _evaluate_arm(name, test: Dataset, idx, pool, bundle, prompt, placement, cfg, gts, report, fold):
    recs = predict_records(test.pairs, idx, pool, bundle, prompt, placement, cfg.resolution)
    per, mean = score_records(recs, gts)
    report.records[f"{name}/fold{fold}"] = recs
    for c, v in per.items():
        report.per_class.append({"fold": fold, "arm": name, "class_id": c, "iou": v})
    return mean


def _fold_arms(fold_index, fold, bundle, cfg, arms, report, pool=None):
    """Baseline plus one trained prompt per ``(arm name, placement)`` on a single fold.

    Returns ({arm: mIoU}, {arm: prompt}).
    """
    train, test = fold
    pool = pool if pool is not None else train
    idx = build_index(pool)
    gts = ground_truth_masks(test.pairs, bundle.cell_size)
    scores = {BASELINE: _evaluate_arm(BASELINE, test, idx, pool, bundle, None, "I&L", cfg, gts,
                                      report, fold_index)}
    prompts = {}
    for name, pl in arms:
        prompt, hist = train_prompt(train, bundle, replace(cfg, placement=pl))
        key = f"{name}/fold{fold_index}"
        report.provenance.setdefault("prompts", {})[key] = prompt_fingerprint(prompt)
        report.provenance.setdefault("best_epoch", {})[key] = hist.best_epoch
        report.histories[key] = hist
        scores[name] = _evaluate_arm(name, test, idx, pool, bundle, prompt, pl, cfg, gts, report, fold_index)
        prompts[name] = prompt
    return scores, prompts


def run_fold_experiment(folds: Sequence[tuple[Dataset, Dataset]], bundle: BackboneBundle,
                        cfg: TrainConfig) -> ExperimentReport:
    """One prompt per fold; baseline and prompted mIoU side by side, plus the fold mean."""
    rep = ExperimentReport("fold", _base_config(cfg), [], provenance={"backbone": bundle.fingerprint})
    base, prom = [], []
    for i, fold in enumerate(folds):
        s, _ = _fold_arms(i, fold, bundle, cfg, [(PROMPTED, cfg.placement)], rep)
        b, p = s[BASELINE], s[PROMPTED]
        rep.rows.append({"fold": i, "baseline_mIoU": b, "prompt_mIoU": p, "gain": p - b})
        base.append(b)
        prom.append(p)
    rep.summary = {"baseline_mIoU": float(np.mean(base)), "prompt_mIoU": float(np.mean(prom)),
                   "gain": float(np.mean(prom) - np.mean(base)), "placement": cfg.placement}
    rep.check_bounds()
    return rep


def ablate_placement(fold: tuple[Dataset, Dataset], bundle: BackboneBundle, cfg: TrainConfig,
                     placements: Sequence[str] = tuple(PLACEMENTS)) -> ExperimentReport:
    rep = ExperimentReport("placement", _base_config(cfg), [], provenance={"backbone": bundle.fingerprint})
    scores, _ = _fold_arms(0, fold, bundle, cfg, [(pl, pl) for pl in placements], rep)
    for arm, v in scores.items():
        rep.rows.append({"placement": arm, "mIoU": v})
    rep.check_bounds()
    return rep


def sweep_padding(fold: tuple[Dataset, Dataset], pads: Sequence[int], bundle: BackboneBundle,
                  cfg: TrainConfig) -> ExperimentReport:
    rep = ExperimentReport("padding", _base_config(cfg, pads=list(pads)), [],
                           provenance={"backbone": bundle.fingerprint})
    train, test = fold
    idx = build_index(train)
    gts = ground_truth_masks(test.pairs, bundle.cell_size)
    for pad in pads:
        pcfg = replace(cfg, pad=pad)
        prompt, _ = train_prompt(train, bundle, pcfg)
        rep.provenance.setdefault("prompts", {})[f"pad{pad}"] = prompt_fingerprint(prompt)
        v = _evaluate_arm(f"pad{pad}", test, idx, train, bundle, prompt, cfg.placement, cfg, gts, rep, 0)
        rep.rows.append({"pad": pad, "params": param_count(cfg.resolution, pad), "mIoU": v})
    rep.check_bounds()
    return rep


def sweep_dataset_size(fold: tuple[Dataset, Dataset], bundle: BackboneBundle, cfg: TrainConfig,
                       sizes: Sequence[int | None] = DATASET_SIZES) -> ExperimentReport:
    """Per-class training-set size sweep; the subsample is also the retrieval pool."""
    rep = ExperimentReport("dataset_size", _base_config(cfg, sizes=[s if s else "all" for s in sizes]), [],
                           provenance={"backbone": bundle.fingerprint})
    train, test = fold
    gts = ground_truth_masks(test.pairs, bundle.cell_size)
    for s in sizes:
        name = "all" if s is None else str(s)
        sub = subsample_per_class(train, s, cfg.seed)
        idx = build_index(sub)
        b = _evaluate_arm(f"baseline/{name}", test, idx, sub, bundle, None, cfg.placement, cfg, gts, rep, 0)
        prompt, _ = train_prompt(sub, bundle, cfg)
        rep.provenance.setdefault("prompts", {})[name] = prompt_fingerprint(prompt)
        p = _evaluate_arm(f"prompt/{name}", test, idx, sub, bundle, prompt, cfg.placement, cfg, gts, rep, 0)
        per_class = len(sub) // max(1, len(sub.class_ids))
        rep.rows.append({"size": name, "images_per_class": per_class, "baseline_mIoU": b, "prompt_mIoU": p})
    rep.check_bounds()
    return rep


def cross_class_matrix(train: Dataset, test: Dataset, bundle: BackboneBundle, cfg: TrainConfig,
                       classes: Sequence[int] | None = None) -> ExperimentReport:
    """Prompt trained on class a, evaluated on class b with pairs retrieved from class b's training pool.

    Rows index the training class, columns the evaluation class; the diagonal is intra-class.
    """
    classes = list(classes) if classes is not None else train.class_ids
    rep = ExperimentReport("cross_class", _base_config(cfg, classes=classes), [],
                           provenance={"backbone": bundle.fingerprint})
    pools = {c: train.subset(lambda p, c=c: p.class_id == c) for c in classes}
    queries = {c: test.subset(lambda p, c=c: p.class_id == c) for c in classes}
    idxs = {c: build_index(pools[c]) for c in classes}
    gts = {c: ground_truth_masks(queries[c].pairs, bundle.cell_size) for c in classes}
    matrix = []
    for a in classes:
        prompt, _ = train_prompt(pools[a], bundle, cfg)
        rep.provenance.setdefault("prompts", {})[str(a)] = prompt_fingerprint(prompt)
        row = []
        for b in classes:
            recs = predict_records(queries[b].pairs, idxs[b], pools[b], bundle, prompt, cfg.placement)
            _, v = score_records(recs, gts[b])
            row.append(v)
            rep.rows.append({"train_class": a, "eval_class": b, "mIoU": v})
        matrix.append(row)
    rep.matrix = matrix
    arr = np.array(matrix)
    rep.summary = {"mean_all_pairs": float(arr.mean()), "mean_intra": float(np.diag(arr).mean())}
    rep.check_bounds()
    return rep


def domain_shift(train_domain: Dataset, shifted_pool: Dataset, query_domain: Dataset, bundle: BackboneBundle,
                 cfg: TrainConfig, placements: Sequence[str] = tuple(PLACEMENTS)) -> ExperimentReport:
    """Prompts trained in-domain; evaluated with in-context pairs from the home pool (A->A) and from
    ``shifted_pool`` (B->A). ``drop`` = in-domain minus shifted."""
    rep = ExperimentReport("domain_shift", _base_config(cfg), [], provenance={"backbone": bundle.fingerprint})
    home, prompts = _fold_arms(0, (train_domain, query_domain), bundle, cfg, [(pl, pl) for pl in placements], rep)
    idx_b = build_index(shifted_pool)
    gts = ground_truth_masks(query_domain.pairs, bundle.cell_size)
    for arm in [BASELINE, *placements]:
        prompt = prompts.get(arm)
        shifted = _evaluate_arm(f"{arm}/shifted", query_domain, idx_b, shifted_pool, bundle, prompt,
                                arm if prompt is not None else "I&L", cfg, gts, rep, 0)
        rep.rows.append({"arm": arm, "in_domain": home[arm], "shifted": shifted, "drop": home[arm] - shifted})
    rep.check_bounds()
    return rep


# ---------------------------------------------------------------------------
# comparison grids


def _to_u8(img: np.ndarray, cell: int) -> np.ndarray:
    img = np.asarray(img, dtype=np.float32)
    if img.shape[0] != cell:
        img = resize(to_tensor(img), cell)[0].permute(1, 2, 0).numpy()
    return (np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def assemble_grid(panels: Sequence[Sequence[np.ndarray]], cell: int, gap: int = 2) -> np.ndarray:
    """Tile ``panels[row][col]`` (H, W, 3 float images) into one uint8 image with white gutters."""
    rows = len(panels)
    cols = len(panels[0]) if rows else 0
    if rows == 0 or cols == 0 or any(len(r) != cols for r in panels):
        raise ValueError("panels must form a non-empty rectangle")
    h = rows * cell + (rows - 1) * gap
    w = cols * cell + (cols - 1) * gap
    out = np.full((h, w, 3), 255, dtype=np.uint8)
    for i, row in enumerate(panels):
        for j, img in enumerate(row):
            y, x = i * (cell + gap), j * (cell + gap)
            out[y:y + cell, x:x + cell] = _to_u8(img, cell)
    return out


GRID_ROWS = ("context input", "context label", "query", "baseline", "prompt", "ground truth")


def comparison_panels(baseline: Sequence[PredictionRecord], prompted: Sequence[PredictionRecord],
                      queries: Dataset, pool: Dataset, columns: int) -> list[list[np.ndarray]]:
    """Rows in :data:`GRID_ROWS` order, one column per query."""
    if columns < 1:
        raise ValueError("columns must be >= 1")
    by_q = {r.query_id: r for r in prompted}
    picked = []
    for b in baseline:
        if len(picked) == columns:
            break
        if b.query_id not in by_q:
            raise KeyError(f"no prompted record for query {b.query_id}")
        picked.append((b, by_q[b.query_id]))
    if len(picked) < columns:
        raise ValueError(f"only {len(picked)} records available for {columns} columns")
    grid = [[] for _ in GRID_ROWS]
    for b, p in picked:
        q, ctx = queries.by_id(b.query_id), pool.by_id(p.retrieved_id)
        for row, img in zip(grid, (ctx.input, ctx.label, q.input, b.label, p.label, q.label)):
            row.append(img)
    return grid


def render_comparison(baseline, prompted, queries: Dataset, pool: Dataset, columns: int, path: Path,
                      cell: int = 32) -> np.ndarray:
    img = assemble_grid(comparison_panels(baseline, prompted, queries, pool, columns), cell)
    Image.fromarray(img).save(path, format="PNG")
    return img
