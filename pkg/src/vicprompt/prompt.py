"""Learnable border perturbation shared by every in-context pair of a task.

The prompt is an R x R x 3 plane that is zero everywhere except a frame of
``pad`` pixels along the image edges. It is added, scaled by ``delta``, to the
images selected by a placement (``I`` in-context input, ``L`` in-context label,
``Q`` query). No clamping is applied after the addition.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .seeding import torch_gen

PLACEMENT_FLAGS = ("I", "L", "Q")
# name -> flags, in the row order used for the placement ablation
PLACEMENTS = {
    "I": frozenset("I"),
    "Q": frozenset("Q"),
    "I&Q": frozenset("IQ"),
    "I&L": frozenset("IL"),
    "I,L&Q": frozenset("ILQ"),
}
CANONICAL_PLACEMENT = "I&L"
_MAGIC = b"VICPRM1\n"


def border_mask(resolution: int, pad: int) -> torch.Tensor:
    """Boolean R x R plane, True within ``pad`` pixels of any edge."""
    if resolution < 1 or pad < 1:
        raise ValueError("resolution and pad must be >= 1")
    i = torch.arange(resolution)
    dist = torch.minimum(i, resolution - 1 - i)
    return torch.minimum(dist[:, None], dist[None, :]) < pad


def param_count(resolution: int, pad: int) -> int:
    if resolution < 1 or pad < 1:
        raise ValueError("resolution and pad must be >= 1")
    inner = max(resolution - 2 * pad, 0)
    return 3 * (resolution * resolution - inner * inner)


def default_pad(resolution: int) -> int:
    """Pad scaled from the 30-of-224 reference frame."""
    return max(1, round(30 / 224 * resolution))


@dataclass
class PromptParams:
    resolution: int
    pad: int
    theta: torch.Tensor  # (3, R, R)
    delta: float = 1.0
    scheme: str = "zeros"
    seed: int = 0
    backbone_fingerprint: str = ""
    _mask: torch.Tensor | None = field(default=None, repr=False, compare=False)

    @property
    def mask(self) -> torch.Tensor:
        if self._mask is None:
            self._mask = border_mask(self.resolution, self.pad)
        return self._mask

    @property
    def trainable_count(self) -> int:
        return param_count(self.resolution, self.pad)

    def perturbation(self) -> torch.Tensor:
        """delta * theta restricted to the support (differentiable in theta)."""
        return self.delta * (self.theta * self.mask.to(self.theta.dtype))

    def support_ok(self) -> bool:
        return bool((self.theta.detach()[:, ~self.mask] == 0).all())

    def snapshot(self) -> "PromptParams":
        return PromptParams(self.resolution, self.pad, self.theta.detach().clone(), self.delta,
                            self.scheme, self.seed, self.backbone_fingerprint)


def init_prompt(resolution: int, pad: int, scheme: str = "zeros", seed: int = 0,
                sigma: float = 0.02, delta: float = 1.0) -> PromptParams:
    mask = border_mask(resolution, pad)
    theta = torch.zeros(3, resolution, resolution)
    if scheme == "gaussian":
        noise = torch.randn(3, resolution, resolution, generator=torch_gen(seed, "prompt-init"))
        theta = torch.where(mask, noise * sigma, theta)
    elif scheme != "zeros":
        raise ValueError(f"unknown init scheme {scheme!r}")
    return PromptParams(resolution, pad, theta, delta, scheme, seed, _mask=mask)


def enhance(img: torch.Tensor, prompt: PromptParams) -> torch.Tensor:
    if tuple(img.shape[-2:]) != (prompt.resolution, prompt.resolution):
        raise ValueError(f"image is {tuple(img.shape[-2:])}, prompt expects "
                         f"{prompt.resolution}x{prompt.resolution}")
    return img + prompt.perturbation().to(img.dtype)


def parse_placement(spec) -> frozenset[str]:
    if isinstance(spec, str):
        flags = PLACEMENTS.get(spec)
        if flags is None:
            flags = frozenset(c for c in spec.upper() if c.isalpha())
    else:
        flags = frozenset(spec)
    bad = flags - set(PLACEMENT_FLAGS)
    if bad:
        raise ValueError(f"unknown placement flags {sorted(bad)}")
    return flags


def placement_name(flags) -> str:
    flags = frozenset(flags)
    for name, f in PLACEMENTS.items():
        if f == flags:
            return name
    return "&".join(c for c in PLACEMENT_FLAGS if c in flags)


def apply_placement(x, y, x_q, prompt: PromptParams, placement):
    flags = parse_placement(placement)
    if not flags:
        raise ValueError("an enhanced run needs a non-empty placement")
    return tuple(enhance(t, prompt) if flag in flags else t
                 for t, flag in zip((x, y, x_q), PLACEMENT_FLAGS))


def save_prompt(prompt: PromptParams, path: Path) -> None:
    """Header + R x R x 3 float32 little-endian plane, row-major, channel-last."""
    header = json.dumps({"R": prompt.resolution, "p": prompt.pad, "delta": prompt.delta,
                         "scheme": prompt.scheme, "seed": prompt.seed,
                         "backbone_fingerprint": prompt.backbone_fingerprint},
                        sort_keys=True).encode()
    plane = prompt.theta.detach().permute(1, 2, 0).contiguous().numpy().astype("<f4")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(plane.tobytes(order="C"))


def load_prompt(path: Path) -> PromptParams:
    raw = Path(path).read_bytes()
    if not raw.startswith(_MAGIC):
        raise ValueError(f"{path}: not a prompt checkpoint")
    (hlen,) = struct.unpack_from("<I", raw, len(_MAGIC))
    start = len(_MAGIC) + 4
    h = json.loads(raw[start:start + hlen])
    body = raw[start + hlen:]
    r = h["R"]
    if len(body) != 4 * r * r * 3:
        raise ValueError(f"{path}: plane size does not match R={r}")
    plane = np.frombuffer(body, dtype="<f4").reshape(r, r, 3).astype(np.float32)
    theta = torch.from_numpy(plane.copy()).permute(2, 0, 1).contiguous()
    prompt = PromptParams(r, h["p"], theta, h["delta"], h["scheme"], h["seed"],
                          h["backbone_fingerprint"])
    if not prompt.support_ok():
        raise ValueError(f"{path}: non-zero values outside the border support")
    return prompt
