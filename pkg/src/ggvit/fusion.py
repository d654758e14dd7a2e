"""Fusion attention block: five single-head graph attention units, one per
stream, each re-predicting its stream's 2-class output with the other four
as neighbor nodes (self-edge included), concatenated into a 1x10 fusion
tensor and linearly classified.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .vit import trunc_normal

GAT_HIDDEN = 8
GAT_SLOPE = 0.2
N_STREAMS = 5


@dataclass
class GATUnit:
    """One graph attention unit over 2-d node features."""

    proj_w: Tensor   # (hidden, 2)
    attn_a: Tensor   # (2*hidden,)
    out_w: Tensor    # (2, hidden)
    slope: float = GAT_SLOPE

    def named(self, prefix: str):
        yield f"{prefix}proj_w", self.proj_w
        yield f"{prefix}attn_a", self.attn_a
        yield f"{prefix}out_w", self.out_w

    @property
    def hidden(self) -> int:
        return self.proj_w.shape[0]


def init_gat_unit(rng: np.random.Generator, hidden: int = GAT_HIDDEN,
                  slope: float = GAT_SLOPE, dtype=np.float64) -> GATUnit:
    return GATUnit(
        proj_w=ad.param(trunc_normal(rng, (hidden, 2), std=0.2, dtype=dtype)),
        attn_a=ad.param(trunc_normal(rng, (2 * hidden,), std=0.2, dtype=dtype)),
        out_w=ad.param(trunc_normal(rng, (2, hidden), std=0.2, dtype=dtype)),
        slope=slope,
    )


def _refine(unit: GATUnit, main: Tensor, neighbors: list[Tensor]) -> tuple[Tensor, Tensor]:
    """Shared attention pass: returns (refined (B, 2), alpha (B, 5))."""
    if len(neighbors) != N_STREAMS - 1:
        raise ValueError(f"gat_refine: expected 4 neighbors, got {len(neighbors)}")
    b = main.shape[0]
    f = unit.hidden
    nodes = ad.concat([ad.reshape(t, (b, 1, 2)) for t in (main, *neighbors)], axis=1)
    h = ad.matmul(nodes, ad.transpose(unit.proj_w, (1, 0)))          # (B, 5, F)
    a_main = ad.reshape(ad.slice_(unit.attn_a, (slice(0, f),)), (f, 1))
    a_nbr = ad.reshape(ad.slice_(unit.attn_a, (slice(f, 2 * f),)), (f, 1))
    h_main = ad.slice_(h, (slice(None), slice(0, 1), slice(None)))   # (B, 1, F)
    scores = ad.add(ad.matmul(h_main, a_main), ad.matmul(h, a_nbr))  # (B, 5, 1)
    alpha = ad.softmax(ad.reshape(ad.leaky_relu(scores, unit.slope), (b, N_STREAMS)),
                       axis=-1)
    mixed = ad.reshape(ad.matmul(ad.reshape(alpha, (b, 1, N_STREAMS)), h), (b, f))
    return ad.matmul(mixed, ad.transpose(unit.out_w, (1, 0))), alpha


def gat_refine(unit: GATUnit, main: Tensor, neighbors: list[Tensor]) -> Tensor:
    """Attention over {main} + neighbors; returns the refined 2-vector.

    Accepts (2,) vectors or (B, 2) batches. Scores are
    leaky_relu(a^T [h_main || h_j]); the softmax over the five nodes weights
    the projected features, and the output head maps back to 2 classes.
    """
    if main.ndim == 1:
        out, _ = _refine(unit, ad.reshape(main, (1, 2)),
                         [ad.reshape(nb, (1, 2)) for nb in neighbors])
        return ad.reshape(out, (2,))
    out, _ = _refine(unit, main, neighbors)
    return out


def attention_coefficients(unit: GATUnit, main: np.ndarray,
                           neighbors: list[np.ndarray]) -> np.ndarray:
    """Value-only attention weights over {main} + neighbors (diagnostics)."""
    with ad.no_grad():
        _, alpha = _refine(unit, Tensor(np.asarray(main).reshape(1, 2)),
                           [Tensor(np.asarray(x).reshape(1, 2)) for x in neighbors])
        return alpha.data[0]


def fuse(units: list[GATUnit], stream_probs: list[Tensor], final_w: Tensor,
         final_b: Tensor) -> tuple[Tensor, Tensor]:
    """Refine every stream against the others; concat to the 1x10 fusion
    tensor (slots 2k, 2k+1 belong to stream k) and apply the final head.

    Returns (final logits (B, 2), fusion tensor (B, 10)).
    """
    if len(units) != N_STREAMS or len(stream_probs) != N_STREAMS:
        raise ValueError("fuse: need exactly five units and five stream outputs")
    refined = []
    for k in range(N_STREAMS):
        others = [stream_probs[j] for j in range(N_STREAMS) if j != k]
        refined.append(gat_refine(units[k], stream_probs[k], others))
    fusion = ad.concat(refined, axis=-1)
    final = ad.add(ad.matmul(fusion, ad.transpose(final_w, (1, 0))), final_b)
    return final, fusion


def stream_proportions(fusions: np.ndarray) -> np.ndarray:
    """Mean absolute-magnitude share of each stream's two fusion slots, x100.

    The five percentages sum to 100 (up to rounding). Table layout matches
    the X0..X4 report columns.
    """
    arr = np.asarray(fusions, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.size == 0 or arr.shape[-1] != 2 * N_STREAMS:
        raise ValueError(f"stream_proportions: need (N, 10) fusion tensors, got {arr.shape}")
    mags = np.abs(arr)
    totals = mags.sum(axis=1)
    if (totals == 0).any():
        raise ValueError("stream_proportions: all-zero fusion tensor")
    shares = mags.reshape(-1, N_STREAMS, 2).sum(axis=2) / totals[:, None]
    return shares.mean(axis=0) * 100.0
