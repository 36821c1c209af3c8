"""Four-cell canvas composition and masked-quadrant geometry.

Layout (cell size C, canvas 2C x 2C, no separators)::

    +------------+------------+
    | in-context | in-context |
    |   input    |   label    |
    +------------+------------+
    |   query    |   masked   |
    +------------+------------+

Tensors are channel-first: a single image is (3, H, W), a batch (B, 3, H, W).
Resizing is bilinear with half-pixel centres (``align_corners=False``) and no
antialiasing; halving a size therefore averages 2x2 blocks exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import torch
import torch.nn.functional as F

CELLS = ("TL", "TR", "BL", "BR")
MASK_FILL = 0.5


def to_tensor(img, dtype=torch.float32) -> torch.Tensor:
    """(H, W, 3) or (B, H, W, 3) array -> (3, H, W) or (B, 3, H, W) tensor."""
    if isinstance(img, torch.Tensor):
        return img.to(dtype)
    a = np.asarray(img)
    # copy: dataset images are read-only views
    t = torch.from_numpy(np.array(a, copy=True, order="C")).to(dtype)
    return t.permute(2, 0, 1) if a.ndim == 3 else t.permute(0, 3, 1, 2)


def to_image(t: torch.Tensor) -> np.ndarray:
    """Inverse of :func:`to_tensor` for a single image."""
    return t.detach().cpu().permute(1, 2, 0).numpy()


def _batched(t: torch.Tensor) -> torch.Tensor:
    return t if t.dim() == 4 else t.unsqueeze(0)


def resize(t: torch.Tensor, size: int) -> torch.Tensor:
    t = _batched(t)
    if t.shape[-2:] == (size, size):
        return t
    return F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)


def _assemble(tl, tr, bl, br):
    top = torch.cat([tl, tr], dim=3)
    bottom = torch.cat([bl, br], dim=3)
    return torch.cat([top, bottom], dim=2)


def compose_canvas(x, y, x_q, cell_size: int, fill: float = MASK_FILL) -> torch.Tensor:
    """Canvas with the in-context pair on top, the query bottom-left and a flat masked cell."""
    tl, tr, bl = (resize(t, cell_size) for t in (x, y, x_q))
    br = torch.full_like(bl, fill)
    return _assemble(tl, tr, bl, br)


def compose_gt_canvas(x, y, x_q, y_q, cell_size: int) -> torch.Tensor:
    """Like :func:`compose_canvas` but with the query's true label in the masked cell."""
    return _assemble(*(resize(t, cell_size) for t in (x, y, x_q, y_q)))


def extract_cell(cv: torch.Tensor, position: str) -> torch.Tensor:
    if position not in CELLS:
        raise ValueError(f"position must be one of {CELLS}")
    cv = _batched(cv)
    c = cv.shape[-1] // 2
    r0 = 0 if position[0] == "T" else c
    c0 = 0 if position[1] == "L" else c
    return cv[:, :, r0:r0 + c, c0:c0 + c]


def masked_token_positions(grid_rows: int, grid_cols: int) -> frozenset[tuple[int, int]]:
    if grid_rows % 2 or grid_cols % 2:
        raise ValueError("token grid dimensions must be even")
    return frozenset((r, c) for r in range(grid_rows // 2, grid_rows)
                     for c in range(grid_cols // 2, grid_cols))


@dataclass(frozen=True)
class QuadrantMask:
    """Token positions of the bottom-right (masked) quadrant."""

    rows: int
    cols: int

    @cached_property
    def positions(self) -> frozenset[tuple[int, int]]:
        return masked_token_positions(self.rows, self.cols)

    @cached_property
    def grid(self) -> torch.Tensor:
        m = torch.zeros(self.rows, self.cols, dtype=torch.bool)
        m[self.rows // 2:, self.cols // 2:] = True
        return m

    @property
    def flat(self) -> torch.Tensor:
        return self.grid.flatten()
