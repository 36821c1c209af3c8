"""Prompt training: only the border perturbation is optimised.

For every query the in-context pair is retrieved from the training pool with
the query itself excluded. The loss is the token cross-entropy over the masked
quadrant between the predictor's logits on the enhanced, masked canvas and the
tokenizer's argmax tokens on the plain ground-truth canvas.

Update equations (Adam, applied to the support entries only; off-support
gradients are identically zero because the forward pass uses theta * mask)::

    m_t = b1 * m_{t-1} + (1 - b1) * g
    v_t = b2 * v_{t-1} + (1 - b2) * g**2
    theta_t = theta_{t-1} - lr_t * (m_t / (1 - b1**t)) / (sqrt(v_t / (1 - b2**t)) + eps)

``lr_t`` follows cosine annealing with warm restarts, advanced fractionally
after every batch.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import BackboneBundle
from .canvas import QuadrantMask
from .data import Dataset, TaskPair
from .pipeline import fold_score, gt_tokens, masked_canvas, prepare_queries
from .prompt import CANONICAL_PLACEMENT, PromptParams, default_pad, init_prompt, parse_placement
from .retrieval import RetrievalIndex, build_index
from .seeding import np_rng

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    def __init__(self, msg, history=None):
        super().__init__(msg)
        self.history = history


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 0.1
    restart_period: int = 10
    period_mult: int = 2
    min_lr: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    placement: str = CANONICAL_PLACEMENT
    delta: float = 1.0
    resolution: int = 64
    pad: int | None = None
    init: str = "zeros"
    init_sigma: float = 0.02
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        self.betas = tuple(self.betas)
        parse_placement(self.placement)

    @property
    def effective_pad(self) -> int:
        return self.pad if self.pad is not None else default_pad(self.resolution)

    @classmethod
    def reference(cls, **overrides) -> "TrainConfig":
        """Reference-scale settings (224 px, 30 px pad, lr 40, 100 epochs) for full-size backbones."""
        base = dict(epochs=100, batch_size=32, learning_rate=40.0, resolution=224, pad=30)
        base.update(overrides)
        return cls(**base)


@dataclass
class TrainHistory:
    loss: list[float] = field(default_factory=list)
    val_miou: list[float | None] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    retrievals: list[list[tuple[str, str]]] = field(default_factory=list)
    support_ok: list[bool] = field(default_factory=list)
    fingerprints: list[str] = field(default_factory=list)
    initial_val_miou: float | None = None
    best_epoch: int = 0
    wall_clock: float = 0.0
    config: dict = field(default_factory=dict)

    def to_csv(self, path: Path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["epoch", "loss", "val_mIoU"])
            for i, (l, v) in enumerate(zip(self.loss, self.val_miou), start=1):
                w.writerow([i, f"{l:.8f}", "" if v is None else f"{v:.8f}"])


def compute_loss(logits: torch.Tensor, gt: torch.Tensor, mask: QuadrantMask) -> torch.Tensor:
    """Mean over masked positions (and batch) of -log softmax(logits)[gt]."""
    if logits.shape[:-1] != gt.shape:
        raise ValueError(f"logits {tuple(logits.shape)} and targets {tuple(gt.shape)} disagree")
    sel = mask.grid.to(logits.device)
    if not bool(sel.any()):
        raise ValueError("mask selects no positions")
    lg = logits[..., sel, :]  # (B, M, V)
    tg = gt[..., sel]
    return -F.log_softmax(lg, dim=-1).gather(-1, tg.long().unsqueeze(-1)).mean()


def _pipeline_loss(theta, prompt, prep, targets, bundle, placement):
    view = PromptParams(prompt.resolution, prompt.pad, theta, prompt.delta, _mask=prompt.mask)
    cv = masked_canvas(prep.x, prep.y, prep.xq, bundle.cell_size, view, placement)
    return compute_loss(bundle.predict_logits(cv), targets, bundle.mask)


def make_optimizer(prompt: PromptParams, cfg: TrainConfig):
    prompt.theta.requires_grad_(True)
    opt = torch.optim.Adam([prompt.theta], lr=cfg.learning_rate, betas=cfg.betas, eps=cfg.adam_eps)
    sched = torch.optim.lr_scheduler.CosineAnnealingWarmRestarts(
        opt, T_0=cfg.restart_period, T_mult=cfg.period_mult, eta_min=cfg.min_lr)
    return opt, sched


def _step(prompt, prep, targets, bundle, cfg, opt) -> float:
    opt.zero_grad()
    loss = _pipeline_loss(prompt.theta, prompt, prep, targets, bundle, cfg.placement)
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss.item()}")
    loss.backward()
    opt.step()
    with torch.no_grad():
        prompt.theta.mul_(prompt.mask.to(prompt.theta.dtype))
    return float(loss.detach())


def train_step(queries: Sequence[TaskPair], prompt: PromptParams, bundle: BackboneBundle,
               idx: RetrievalIndex, pool: Dataset, cfg: TrainConfig, opt=None):
    """One update on a batch of queries; returns (prompt, batch loss). Mutates ``prompt`` in place."""
    prep = prepare_queries(queries, idx, pool, prompt.resolution, leave_one_out=True)
    targets = gt_tokens(prep, bundle)
    if opt is None:
        opt, _ = make_optimizer(prompt, cfg)
    loss = _step(prompt, prep, targets, bundle, cfg, opt)
    return prompt, loss


def split_validation(train_set: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset | None]:
    """Seeded per-class hold-out of ``fraction`` of the training pairs (at least one per class)."""
    if fraction <= 0:
        return train_set, None
    held = set()
    for c in train_set.class_ids:
        ids = [p.id for p in train_set.pairs if p.class_id == c]
        k = int(round(fraction * len(ids)))
        if k == 0 or k >= len(ids):
            continue
        rng = np_rng(seed, "validation", c)
        held.update(ids[j] for j in rng.choice(len(ids), size=k, replace=False))
    if not held:
        return train_set, None
    return train_set.subset(lambda p: p.id not in held), train_set.subset(lambda p: p.id in held)


def train_prompt(train_set: Dataset, bundle: BackboneBundle, cfg: TrainConfig,
                 idx: RetrievalIndex | None = None, validation: Dataset | None | str = "auto",
                 on_epoch: Callable[[int, PromptParams, TrainHistory], None] | None = None):
    """Full training loop; returns (best prompt, history).

    ``validation="auto"`` holds out ``cfg.val_fraction`` of ``train_set`` for
    checkpoint selection; pass ``None`` to keep the last epoch instead.
    """
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    t0 = time.perf_counter()
    if validation == "auto":
        pool, validation = split_validation(train_set, cfg.val_fraction, cfg.seed)
    else:
        pool = train_set
    idx = idx if idx is not None and len(idx) == len(pool) else build_index(pool)
    prompt = init_prompt(cfg.resolution, cfg.effective_pad, cfg.init, cfg.seed, cfg.init_sigma, cfg.delta)
    prompt.backbone_fingerprint = bundle.fingerprint
    hist = TrainHistory(config=asdict(cfg))
    if cfg.epochs == 0:
        hist.wall_clock = time.perf_counter() - t0
        return prompt, hist
    if len(pool) < 2:
        raise ValueError("leave-one-out retrieval needs at least two training pairs")

    prep = prepare_queries(pool.pairs, idx, pool, cfg.resolution, leave_one_out=True)
    targets = gt_tokens(prep, bundle)
    val_prep = None
    if validation is not None and len(validation):
        val_prep = prepare_queries(validation.pairs, idx, pool, cfg.resolution)
        hist.initial_val_miou = fold_score(val_prep, bundle, prompt, cfg.placement)
    best = prompt.snapshot()
    best_score = hist.initial_val_miou

    opt, sched = make_optimizer(prompt, cfg)
    n = len(prep)
    n_batches = math.ceil(n / cfg.batch_size)
    for epoch in range(cfg.epochs):
        order = np_rng(cfg.seed, "shuffle", epoch).permutation(n)
        losses, weights, seen = [], [], []
        for b in range(n_batches):
            rows = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            batch = prep.take(rows)
            seen.extend(zip(batch.query_ids, batch.retrieved_ids))
            loss = _step(prompt, batch, targets[torch.as_tensor(rows)], bundle, cfg, opt)
            if not math.isfinite(loss):
                raise TrainingError("non-finite loss", hist)
            losses.append(loss)
            weights.append(len(rows))
            sched.step(epoch + (b + 1) / n_batches)
        hist.loss.append(float(np.average(losses, weights=weights)))
        hist.lr.append(opt.param_groups[0]["lr"])
        hist.retrievals.append(seen)
        hist.support_ok.append(prompt.support_ok())
        hist.fingerprints.append(bundle.compute_fingerprint())
        score = None
        if val_prep is not None:
            score = fold_score(val_prep, bundle, prompt, cfg.placement)
            if score > best_score:
                best_score, best, hist.best_epoch = score, prompt.snapshot(), epoch + 1
        hist.val_miou.append(score)
        log.info("epoch %d loss %.4f val %s", epoch + 1, hist.loss[-1], score)
        if on_epoch is not None:
            on_epoch(epoch, prompt, hist)
    prompt.theta.requires_grad_(False)
    final = best if val_prep is not None else prompt.snapshot()
    hist.wall_clock = time.perf_counter() - t0
    return final, hist


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckResult:
    max_rel_error: float
    off_mask_max_abs: float
    entries: list[tuple[int, int, int]]
    analytic: list[float]
    numeric: list[float]


def relative_error(a: float, n: float) -> float:
    denom = max(abs(a), abs(n))
    return 0.0 if denom == 0 else abs(a - n) / denom


def finite_difference_check(fn: Callable[[torch.Tensor], torch.Tensor], theta: torch.Tensor,
                            entries: Sequence[tuple[int, ...]], eps: float = 1e-6):
    """Compare autograd gradient of scalar ``fn`` with central differences at ``entries``."""
    th = theta.detach().clone().requires_grad_(True)
    (grad,) = torch.autograd.grad(fn(th), th)
    analytic, numeric = [], []
    with torch.no_grad():
        for e in entries:
            plus = th.detach().clone()
            minus = th.detach().clone()
            plus[e] += eps
            minus[e] -= eps
            numeric.append(float((fn(plus) - fn(minus)) / (2 * eps)))
            analytic.append(float(grad[e]))
    errs = [relative_error(a, n) for a, n in zip(analytic, numeric)]
    return max(errs), grad, analytic, numeric


def grad_check(prompt: PromptParams, queries: Sequence[TaskPair], bundle: BackboneBundle,
               idx: RetrievalIndex, pool: Dataset, eps: float = 1e-6, samples: int = 32,
               placement: str = CANONICAL_PLACEMENT, seed: int = 0) -> GradCheckResult:
    """Analytic d loss / d theta vs central differences, in float64, on sampled support entries."""
    if len(queries) == 0:
        raise ValueError("grad_check needs at least one query")
    b64 = bundle.to_dtype(torch.float64)
    prep = prepare_queries(queries, idx, pool, prompt.resolution, leave_one_out=True).to(torch.float64)
    targets = gt_tokens(prep, bundle)
    theta = prompt.theta.detach().to(torch.float64)

    def fn(th):
        return _pipeline_loss(th, prompt, prep, targets, b64, placement)

    support = prompt.mask.nonzero().tolist()
    rng = np_rng(seed, "grad-check")
    picks = rng.choice(len(support) * 3, size=min(samples, len(support) * 3), replace=False)
    entries = [(int(k % 3), *support[int(k // 3)]) for k in picks]
    err, grad, analytic, numeric = finite_difference_check(fn, theta, entries, eps)
    off = grad[:, ~prompt.mask]
    return GradCheckResult(err, float(off.abs().max()) if off.numel() else 0.0, entries, analytic, numeric)
