"""Global-guidance injection: whole-face embedding -> image-shaped additive signal.

The whole-face stream's embedding is reshaped channel-major into a 3 x G x G
grid (dim = 3*G*G), tiled spatially up to the input side, and added to each
quadrant image before its stream encoder. No scaling is applied; gradients
flow through the addition back into the whole-face encoder.
"""

from __future__ import annotations

from . import autodiff as ad
from .autodiff import Tensor
from .vit import guidance_grid_side


def embed_to_grid(embedding: Tensor, grid_side: int) -> Tensor:
    """(..., D) -> (..., 3, G, G) row-major reshape; D must equal 3*G*G."""
    d = embedding.shape[-1]
    if d != 3 * grid_side * grid_side:
        raise ValueError(
            f"embed_to_grid: dim {d} != 3*{grid_side}^2 = {3 * grid_side * grid_side}")
    return ad.reshape(embedding, (*embedding.shape[:-1], 3, grid_side, grid_side))


def tile_grid(grid: Tensor, side: int) -> Tensor:
    """Tile (..., 3, G, G) spatially to (..., 3, side, side)."""
    g = grid.shape[-1]
    if side % g:
        raise ValueError(f"tile_grid: side {side} not divisible by grid side {g}")
    reps = (1,) * (grid.ndim - 2) + (side // g, side // g)
    return ad.tile(grid, reps)


def inject(quadrant: Tensor, guide: Tensor) -> Tensor:
    """Element-wise sum of a quadrant image and the tiled guidance signal."""
    if quadrant.shape != guide.shape:
        raise ad.ShapeError(
            f"inject: shape mismatch {quadrant.shape} vs {guide.shape}")
    return ad.add(quadrant, guide)


def guidance_signal(embedding: Tensor, side: int) -> Tensor:
    """Embedding (B, D) -> additive signal (B, 3, side, side)."""
    return tile_grid(embed_to_grid(embedding, guidance_grid_side(embedding.shape[-1])), side)
