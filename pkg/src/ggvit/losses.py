"""Training objective: per-stream cross-entropy, fusion cross-entropy, and
the weighted total with the margin-loss term.

All three components are summed over the batch; the trainer divides the
total by batch size once before the optimizer step so the margin weight
keeps its meaning at any batch size. Saturated predictions are clamped at
LOG_FLOOR inside the log, with a counter reporting clamp events.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LOG_FLOOR = 1e-12


def one_hot(labels, n_classes: int, dtype=np.float64) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels out of range for {n_classes} classes")
    out = np.zeros((labels.size, n_classes), dtype=dtype)
    out[np.arange(labels.size), labels] = 1.0
    return out


def ce_sum_from_probs(probs: Tensor, labels) -> tuple[Tensor, int]:
    """Batch-summed cross-entropy from probabilities; returns clamp count."""
    labels = np.asarray(labels, dtype=np.int64)
    oh = one_hot(labels, probs.shape[-1], dtype=probs.dtype)
    clamps = int((probs.data[np.arange(labels.size), labels] < LOG_FLOOR).sum())
    picked = ad.sum_(ad.mul(ad.log(probs, floor=LOG_FLOOR), Tensor(oh)))
    return ad.scale(picked, -1.0), clamps


def ce_sum_from_logits(logits: Tensor, labels) -> tuple[Tensor, int]:
    return ce_sum_from_probs(ad.softmax(logits, axis=-1), labels)


def l_vit(stream_probs: list[Tensor], labels) -> tuple[Tensor, int]:
    """Sum over the five streams of two-class cross-entropy (batch-summed)."""
    total = None
    clamps = 0
    for probs in stream_probs:
        term, c = ce_sum_from_probs(probs, labels)
        clamps += c
        total = term if total is None else ad.add(total, term)
    return total, clamps


def l_fusion(final_logits: Tensor, labels) -> tuple[Tensor, int]:
    """Cross-entropy of the fusion head's final logits (batch-summed)."""
    return ce_sum_from_logits(final_logits, labels)


@dataclass
class LossBreakdown:
    l_vit: float
    l_lmc: float
    l_fusion: float
    total: float
    lam: float
    clamp_count: int = 0

    def as_dict(self) -> dict:
        return {"l_vit": self.l_vit, "l_lmc": self.l_lmc, "l_fusion": self.l_fusion,
                "total": self.total, "lam": self.lam, "clamp_count": self.clamp_count}


def total_loss(l_vit_t: Tensor, l_lmc_t: Tensor | None, l_fusion_t: Tensor | None,
               lam: float, clamp_count: int = 0) -> tuple[Tensor, LossBreakdown]:
    """total = lam * l_lmc + l_vit + l_fusion; missing terms count as zero."""
    if lam < 0:
        raise ValueError("lam must be >= 0")
    total = l_vit_t
    if l_lmc_t is not None:
        total = ad.add(total, ad.scale(l_lmc_t, lam))
    if l_fusion_t is not None:
        total = ad.add(total, l_fusion_t)
    breakdown = LossBreakdown(
        l_vit=l_vit_t.item(),
        l_lmc=l_lmc_t.item() if l_lmc_t is not None else 0.0,
        l_fusion=l_fusion_t.item() if l_fusion_t is not None else 0.0,
        total=total.item(),
        lam=lam,
        clamp_count=clamp_count,
    )
    return total, breakdown
