"""Frozen toy inpainting backbone.

Three parts, pretrained once and then frozen:

* tokenizer encoder + codebook: canvas -> per-position logits over the
  vocabulary (negative squared distance to every code); argmax gives tokens
* decoder: token grid -> canvas-sized image
* predictor: canvas with the bottom-right quadrant hidden -> logits over the
  vocabulary at every token position. Hidden positions are replaced by a learned
  mask embedding right after patch embedding, so the predictor never sees the
  pixels there.
"""

from __future__ import annotations

import copy
import hashlib
import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .canvas import QuadrantMask, compose_gt_canvas, to_tensor
from .data import Dataset
from .seeding import np_rng, torch_gen

log = logging.getLogger(__name__)

CKPT_MAGIC = b"VICBB1\n"
CKPT_VERSION = 1


class BackboneError(RuntimeError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    canvas_size: int = 64
    patch: int = 4
    vocab: int = 128
    code_dim: int = 32
    enc_channels: int = 64
    d_model: int = 64
    heads: int = 4
    depth: int = 3
    mlp_ratio: int = 2
    # tokenizer stage
    tok_steps: int = 1000
    tok_batch: int = 16
    tok_lr: float = 2e-3
    commitment: float = 0.25
    dead_code_every: int = 100
    # predictor stage
    pred_steps: int = 2000
    pred_batch: int = 16
    pred_lr: float = 1e-3
    visible_weight: float = 0.1
    # label renderings the generic in-context learner is pretrained on
    label_tasks: tuple[str, ...] = ("mask", "box", "outline", "dilate", "erode")
    morph_radius: int = 4
    # acceptance threshold for held-out reconstruction (mean absolute error)
    recon_tol: float = 0.08

    def __post_init__(self):
        object.__setattr__(self, "label_tasks", tuple(self.label_tasks))
        if self.canvas_size % (2 * self.patch) or self.vocab < 2:
            raise ValueError("canvas must split into two cells of whole patches and vocab must be >= 2")

    @property
    def cell_size(self) -> int:
        return self.canvas_size // 2

    @property
    def grid(self) -> int:
        return self.canvas_size // self.patch


# ---------------------------------------------------------------------------
# modules


class TokenizerEncoder(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        c = cfg.enc_channels
        assert cfg.patch == 4, "the conv stack downsamples by exactly 4"
        self.net = nn.Sequential(
            nn.Conv2d(3, c // 2, 4, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(c // 2, c, 4, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(c, c, 3, padding=1), nn.ReLU(),
            nn.Conv2d(c, cfg.code_dim, 1),
        )

    def forward(self, x):
        return self.net(x)


class Decoder(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        c = cfg.enc_channels
        self.net = nn.Sequential(
            nn.Conv2d(cfg.code_dim, c, 3, padding=1), nn.ReLU(),
            nn.ConvTranspose2d(c, c // 2, 4, stride=2, padding=1), nn.ReLU(),
            nn.ConvTranspose2d(c // 2, c // 2, 4, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(c // 2, 3, 3, padding=1),
        )

    def forward(self, z):
        return torch.sigmoid(self.net(z))


class Block(nn.Module):
    def __init__(self, d, heads, mlp_ratio):
        super().__init__()
        self.heads = heads
        self.ln1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.ln2 = nn.LayerNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, mlp_ratio * d), nn.GELU(), nn.Linear(mlp_ratio * d, d))

    def forward(self, x):
        b, n, d = x.shape
        q, k, v = self.qkv(self.ln1(x)).view(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(d // self.heads)
        h = (att.softmax(dim=-1) @ v).transpose(1, 2).reshape(b, n, d)
        x = x + self.proj(h)
        return x + self.mlp(self.ln2(x))


class Predictor(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        n = cfg.grid * cfg.grid
        self.embed = nn.Conv2d(3, cfg.d_model, cfg.patch, stride=cfg.patch)
        self.mask_token = nn.Parameter(torch.zeros(cfg.d_model))
        self.pos = nn.Parameter(torch.randn(n, cfg.d_model) * 0.02)
        self.blocks = nn.ModuleList(Block(cfg.d_model, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.ln = nn.LayerNorm(cfg.d_model)
        self.head = nn.Linear(cfg.d_model, cfg.vocab)

    def forward(self, canvas, hidden):
        x = self.embed(canvas).flatten(2).transpose(1, 2)  # (B, N, d)
        x = torch.where(hidden[None, :, None], self.mask_token.to(x.dtype), x)
        x = x + self.pos
        for blk in self.blocks:
            x = blk(x)
        return self.head(self.ln(x))  # (B, N, V)


# ---------------------------------------------------------------------------
# bundle


class BackboneBundle:
    """Frozen tokenizer/decoder/predictor triple with a parameter fingerprint."""

    def __init__(self, cfg: BackboneConfig, encoder: TokenizerEncoder, codebook: torch.Tensor,
                 decoder: Decoder, predictor: Predictor, recon_mae: float | None = None):
        self.cfg = cfg
        self.encoder = encoder
        self.codebook = codebook
        self.decoder = decoder
        self.predictor = predictor
        self.recon_mae = recon_mae
        self.mask = QuadrantMask(cfg.grid, cfg.grid)
        for m in (encoder, decoder, predictor):
            m.eval()
            m.requires_grad_(False)
        self.codebook.requires_grad_(False)
        self.fingerprint = self.compute_fingerprint()

    @property
    def cell_size(self) -> int:
        return self.cfg.cell_size

    @property
    def dtype(self) -> torch.dtype:
        return self.codebook.dtype

    def named_planes(self):
        """All parameter planes in checkpoint order."""
        out = [("codebook", self.codebook)]
        for prefix, m in (("encoder", self.encoder), ("decoder", self.decoder),
                          ("predictor", self.predictor)):
            out.extend((f"{prefix}.{k}", v) for k, v in m.state_dict().items())
        return out

    def compute_fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, t in self.named_planes():
            h.update(name.encode())
            h.update(repr(tuple(t.shape)).encode())
            h.update(t.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes())
        return h.hexdigest()

    def to_dtype(self, dtype: torch.dtype) -> "BackboneBundle":
        """Copy in another precision (e.g. float64 for gradient checks); keeps the fingerprint."""
        clone = copy.copy(self)
        clone.encoder = copy.deepcopy(self.encoder).to(dtype)
        clone.decoder = copy.deepcopy(self.decoder).to(dtype)
        clone.predictor = copy.deepcopy(self.predictor).to(dtype)
        clone.codebook = self.codebook.detach().clone().to(dtype)
        return clone

    def _check(self, cv: torch.Tensor) -> torch.Tensor:
        cv = cv if cv.dim() == 4 else cv.unsqueeze(0)
        s = self.cfg.canvas_size
        if cv.shape[1:] != (3, s, s):
            raise ValueError(f"canvas shape {tuple(cv.shape[1:])} does not match (3, {s}, {s})")
        return cv.to(self.dtype)

    # F -------------------------------------------------------------
    def encode(self, cv: torch.Tensor) -> torch.Tensor:
        return self.encoder(self._check(cv))

    def tokenizer_logits(self, cv: torch.Tensor) -> torch.Tensor:
        """(B, rows, cols, V): negative squared distance of each encoding to each code."""
        z = self.encode(cv).permute(0, 2, 3, 1)
        return -_sq_dist(z, self.codebook)

    def tokenize(self, cv: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.tokenizer_logits(cv).argmax(dim=-1)

    # E -------------------------------------------------------------
    def predict_logits(self, cv: torch.Tensor, mask: QuadrantMask | None = None) -> torch.Tensor:
        """(B, rows, cols, V) logits; differentiable w.r.t. the canvas."""
        mask = mask or self.mask
        if (mask.rows, mask.cols) != (self.cfg.grid, self.cfg.grid):
            raise ValueError("mask geometry does not match the token grid")
        cv = self._check(cv)
        g = self.cfg.grid
        return self.predictor(cv, mask.flat).view(cv.shape[0], g, g, -1)

    def predict_tokens(self, cv: torch.Tensor, mask: QuadrantMask | None = None) -> torch.Tensor:
        with torch.no_grad():
            return self.predict_logits(cv, mask).argmax(dim=-1)

    # D -------------------------------------------------------------
    def decode(self, tokens: torch.Tensor) -> torch.Tensor:
        tokens = tokens if tokens.dim() == 3 else tokens.unsqueeze(0)
        if tokens.dtype not in (torch.int64, torch.int32):
            raise ValueError("token grid must be integer")
        if tokens.min() < 0 or tokens.max() >= self.cfg.vocab:
            raise ValueError(f"token index out of range [0, {self.cfg.vocab})")
        z = self.codebook[tokens.long()].permute(0, 3, 1, 2)
        with torch.no_grad():
            return self.decoder(z)


def _sq_dist(z: torch.Tensor, codebook: torch.Tensor) -> torch.Tensor:
    return (z.pow(2).sum(-1, keepdim=True) - 2 * z @ codebook.T + codebook.pow(2).sum(-1))


# ---------------------------------------------------------------------------
# pretraining


def _pools(train_data) -> list[Dataset]:
    pools = [train_data] if isinstance(train_data, Dataset) else list(train_data)
    pools = [d for d in pools if len(d)]
    if not pools:
        raise ValueError("pretraining needs a non-empty dataset")
    return pools


def _stack(imgs) -> torch.Tensor:
    return to_tensor(np.stack(imgs))


def render_label_task(labels: torch.Tensor, task: str, radius: int = 4) -> torch.Tensor:
    """Re-render binary (B, 3, H, W) label images under one of the pretraining label tasks."""
    m = (labels.mean(dim=1, keepdim=True) > 0.5).float()
    k = 2 * radius + 1

    def dilate(t):
        return F.max_pool2d(t, k, stride=1, padding=radius)

    def erode(t):
        return 1 - F.max_pool2d(1 - t, k, stride=1, padding=radius)

    if task == "mask":
        out = m
    elif task == "dilate":
        out = dilate(m)
    elif task == "erode":
        out = erode(m)
    elif task == "outline":
        out = m - (1 - F.max_pool2d(1 - m, 5, stride=1, padding=2))
    elif task == "box":
        rows, cols = m.amax(dim=3, keepdim=True), m.amax(dim=2, keepdim=True)
        r_idx = torch.arange(m.shape[2]).view(1, 1, -1, 1)
        c_idx = torch.arange(m.shape[3]).view(1, 1, 1, -1)
        big = m.shape[2] + m.shape[3]
        r0 = torch.where(rows > 0, r_idx, big).amin(dim=2, keepdim=True)
        r1 = torch.where(rows > 0, r_idx, -1).amax(dim=2, keepdim=True)
        c0 = torch.where(cols > 0, c_idx, big).amin(dim=3, keepdim=True)
        c1 = torch.where(cols > 0, c_idx, -1).amax(dim=3, keepdim=True)
        out = ((r_idx >= r0) & (r_idx <= r1) & (c_idx >= c0) & (c_idx <= c1)).float()
    else:
        raise ValueError(f"unknown label task {task!r}")
    return out.expand(-1, 3, -1, -1).contiguous()


def _sample_canvases(pools, batch, rng, cell, tasks=("mask",), radius=4):
    """GT canvases from random same-dataset pairs, both labels re-rendered under one random task."""
    xs, ys, qs, qys, ts = [], [], [], [], []
    for _ in range(batch):
        pool = pools[rng.integers(len(pools))]
        i, j = rng.choice(len(pool), size=2, replace=len(pool) < 2)
        a, b = pool.pairs[i], pool.pairs[j]
        xs.append(a.input); ys.append(a.label); qs.append(b.input); qys.append(b.label)
        ts.append(tasks[rng.integers(len(tasks))])
    x, y, q, qy = (_stack(t) for t in (xs, ys, qs, qys))
    if tasks != ("mask",):
        for t in set(ts):
            sel = torch.tensor([u == t for u in ts])
            both = render_label_task(torch.cat([y[sel], qy[sel]]), t, radius)
            y[sel], qy[sel] = both[:int(sel.sum())], both[int(sel.sum()):]
    return compose_gt_canvas(x, y, q, qy, cell)


def _check_finite(loss, stage, step):
    if not torch.isfinite(loss):
        raise BackboneError(f"{stage} pretraining diverged at step {step}: loss={loss.item()}")


def pretrain_backbone(train_data: Dataset | Sequence[Dataset], cfg: BackboneConfig | None = None,
                      seed: int = 0, heldout: Dataset | Sequence[Dataset] | None = None) -> BackboneBundle:
    """Train tokenizer + decoder, then the masked predictor, then freeze.

    ``train_data`` may be one dataset or several (e.g. a segmentation and a
    detection corpus); each canvas is built from two pairs of the same dataset.
    """
    cfg = cfg or BackboneConfig()
    pools = _pools(train_data)
    torch.manual_seed(seed)
    cell = cfg.cell_size

    # stage 1: vector-quantised autoencoder
    init_gen = torch_gen(seed, "backbone-init")
    with torch.random.fork_rng():
        torch.manual_seed(int(torch.randint(0, 2**31 - 1, (1,), generator=init_gen)))
        encoder, decoder, predictor = TokenizerEncoder(cfg), Decoder(cfg), Predictor(cfg)
    rng = np_rng(seed, "backbone-tokenizer")
    with torch.no_grad():
        z0 = encoder(_sample_canvases(pools, 64, rng, cell, cfg.label_tasks, cfg.morph_radius)).permute(0, 2, 3, 1).reshape(-1, cfg.code_dim)
        pick = torch.from_numpy(rng.choice(z0.shape[0], size=cfg.vocab, replace=False))
    codebook = nn.Parameter(z0[pick].clone())
    params = list(encoder.parameters()) + list(decoder.parameters()) + [codebook]
    opt = torch.optim.Adam(params, lr=cfg.tok_lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, cfg.tok_steps)
    usage = torch.zeros(cfg.vocab)
    for step in range(cfg.tok_steps):
        cv = _sample_canvases(pools, cfg.tok_batch, rng, cell, cfg.label_tasks, cfg.morph_radius)
        z = encoder(cv).permute(0, 2, 3, 1)
        flat = z.reshape(-1, cfg.code_dim)
        idx = _sq_dist(flat, codebook).argmin(dim=-1)
        q = codebook[idx].view_as(z)
        vq = F.mse_loss(q, z.detach()) + cfg.commitment * F.mse_loss(z, q.detach())
        q_st = z + (q - z).detach()
        rec = decoder(q_st.permute(0, 3, 1, 2))
        loss = F.l1_loss(rec, cv) + F.mse_loss(rec, cv) + vq
        _check_finite(loss, "tokenizer", step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        usage += torch.bincount(idx, minlength=cfg.vocab).float()
        if (step + 1) % cfg.dead_code_every == 0 and step + 1 < cfg.tok_steps * 0.8:
            dead = (usage == 0).nonzero().flatten()
            if len(dead):
                with torch.no_grad():
                    src = torch.from_numpy(rng.choice(flat.shape[0], size=len(dead), replace=len(dead) > flat.shape[0]))
                    codebook[dead] = flat.detach()[src]
            usage.zero_()
        if step % 250 == 0:
            log.info("tokenizer step %d loss %.4f", step, loss.item())

    # stage 2: masked-token predictor on frozen tokenizer targets
    encoder.requires_grad_(False)
    codebook.requires_grad_(False)
    encoder.eval()
    mask = QuadrantMask(cfg.grid, cfg.grid)
    hidden = mask.flat
    weights = torch.where(hidden, 1.0, cfg.visible_weight)
    rng = np_rng(seed, "backbone-predictor")
    opt = torch.optim.AdamW(predictor.parameters(), lr=cfg.pred_lr, weight_decay=0.01)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, cfg.pred_lr, total_steps=cfg.pred_steps, pct_start=0.1)
    for step in range(cfg.pred_steps):
        gt = _sample_canvases(pools, cfg.pred_batch, rng, cell, cfg.label_tasks, cfg.morph_radius)
        with torch.no_grad():
            targets = (-_sq_dist(encoder(gt).permute(0, 2, 3, 1), codebook)).argmax(-1).flatten(1)
        masked = gt.clone()
        masked[:, :, cell:, cell:] = 0.5
        logits = predictor(masked, hidden)
        ce = F.cross_entropy(logits.transpose(1, 2), targets, reduction="none")
        loss = (ce * weights).sum() / (weights.sum() * ce.shape[0])
        _check_finite(loss, "predictor", step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if step % 250 == 0:
            log.info("predictor step %d loss %.4f", step, loss.item())

    bundle = BackboneBundle(cfg, encoder, codebook.detach(), decoder, predictor)
    if heldout is not None:
        bundle.recon_mae = reconstruction_error(bundle, heldout, seed=seed)
    return bundle


def reconstruction_error(bundle: BackboneBundle, data, seed: int = 0, count: int = 64) -> float:
    """Mean absolute error of decode(tokenize(c)) over held-out GT canvases."""
    pools = _pools(data)
    cv = _sample_canvases(pools, count, np_rng(seed, "heldout-recon"), bundle.cell_size)
    rec = bundle.decode(bundle.tokenize(cv))
    return float((rec - cv.to(rec.dtype)).abs().mean())


# ---------------------------------------------------------------------------
# checkpoint


def save_backbone(bundle: BackboneBundle, path: Path) -> None:
    """Magic, header length, JSON header, then every plane as float32 LE in header order."""
    planes = bundle.named_planes()
    header = {
        "version": CKPT_VERSION,
        "config": asdict(bundle.cfg),
        "planes": [[n, list(t.shape)] for n, t in planes],
        "fingerprint": bundle.fingerprint,
        "recon_mae": bundle.recon_mae,
    }
    hb = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", len(hb)))
    buf.write(hb)
    for _, t in planes:
        buf.write(t.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_backbone(path: Path) -> BackboneBundle:
    raw = Path(path).read_bytes()
    if not raw.startswith(CKPT_MAGIC):
        raise BackboneError(f"{path}: not a backbone checkpoint")
    (hlen,) = struct.unpack_from("<I", raw, len(CKPT_MAGIC))
    off = len(CKPT_MAGIC) + 4
    try:
        header = json.loads(raw[off:off + hlen])
    except ValueError as e:
        raise BackboneError(f"{path}: corrupt header") from e
    if header.get("version") != CKPT_VERSION:
        raise BackboneError(f"{path}: unsupported checkpoint version {header.get('version')}")
    off += hlen
    cfg = BackboneConfig(**header["config"])
    tensors = {}
    for name, shape in header["planes"]:
        n = int(np.prod(shape)) if shape else 1
        chunk = raw[off:off + 4 * n]
        if len(chunk) != 4 * n:
            raise BackboneError(f"{path}: truncated at plane {name}")
        tensors[name] = torch.from_numpy(np.frombuffer(chunk, dtype="<f4").astype(np.float32).reshape(shape))
        off += 4 * n
    if off != len(raw):
        raise BackboneError(f"{path}: trailing bytes after last plane")
    encoder, decoder, predictor = TokenizerEncoder(cfg), Decoder(cfg), Predictor(cfg)
    for prefix, m in (("encoder", encoder), ("decoder", decoder), ("predictor", predictor)):
        m.load_state_dict({k[len(prefix) + 1:]: v for k, v in tensors.items() if k.startswith(prefix + ".")})
    bundle = BackboneBundle(cfg, encoder, tensors["codebook"], decoder, predictor, header.get("recon_mae"))
    if bundle.fingerprint != header["fingerprint"]:
        raise BackboneError(f"{path}: fingerprint mismatch (checkpoint corrupt or tampered)")
    return bundle
