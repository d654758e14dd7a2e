"""Full detector assembly: five stream encoders with guidance injection, the
quality-conditioned margin head, and the graph-attention fusion block.

Ablation variants are configuration, not code forks: ``guidance`` toggles
the injection, ``iqb`` the margin-loss branch, ``fab`` the fusion block
(when off, the final decision is the mean of the five stream probability
vectors).
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import losses
from .autodiff import Tensor
from .fusion import GATUnit, N_STREAMS, fuse, init_gat_unit
from .guidance import guidance_signal
from .quality import LMCHead, QualityClassifier, build_quality_embedding, init_lmc_head, lmc_loss, quality_scalar
from .vit import (PRESETS, StackedViTParams, ViTConfig, ViTParams, init_stacked_vit_params,
                  init_vit_params, predict, trunc_normal, vit_forward, vit_forward_multi)

VARIANTS = {
    "GGViT-base": dict(guidance=True, iqb=False, fab=False),
    "GGViT+IQB": dict(guidance=True, iqb=True, fab=False),
    "GGViT+FAB": dict(guidance=True, iqb=False, fab=True),
    "GGViT+IQB+FAB": dict(guidance=True, iqb=True, fab=True),
    "no-guidance": dict(guidance=False, iqb=True, fab=True),
}


@dataclass(frozen=True)
class ModelConfig:
    """Architecture plus loss hyperparameters for one detector instance."""

    vit: ViTConfig = field(default_factory=lambda: PRESETS["tiny"])
    preset: str = "tiny"
    s: float = 30.0
    m: float = 0.35
    lam: float = 0.1
    n_quality: int = 3
    gat_hidden: int = 8
    gat_slope: float = 0.2
    guidance: bool = True
    guidance_gain: float = 0.1
    iqb: bool = True
    fab: bool = True

    def as_dict(self) -> dict:
        d = asdict(self)
        d["vit"] = asdict(self.vit)
        return d

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        d = dict(d)
        d["vit"] = ViTConfig(**d["vit"])
        return ModelConfig(**d)


def make_config(preset: str = "tiny", **overrides) -> ModelConfig:
    if preset not in PRESETS:
        raise ValueError(f"unknown preset '{preset}'; choose from {sorted(PRESETS)}")
    return ModelConfig(vit=PRESETS[preset], preset=preset, **overrides)


@dataclass
class GGViTParams:
    vit0: ViTParams             # whole-face stream
    quads: StackedViTParams     # quadrant streams X1..X4, stacked on axis 0
    lmc: LMCHead
    gats: list[GATUnit]
    fusion_w: Tensor            # (2, 10)
    fusion_b: Tensor            # (2,)

    def named(self):
        yield from self.vit0.named(prefix="vit0.")
        yield from self.quads.named(prefix="quads.")
        yield from self.lmc.named(prefix="lmc.")
        for i, g in enumerate(self.gats):
            yield from g.named(prefix=f"gat{i}.")
        yield "fusion.head_w", self.fusion_w
        yield "fusion.head_b", self.fusion_b

    def params(self) -> dict[str, Tensor]:
        return dict(self.named())

    def stream_vit(self, k: int) -> ViTParams:
        """Per-stream parameter view (0 = whole face, 1..4 = quadrants)."""
        return self.vit0 if k == 0 else self.quads.stream_view(k - 1)

    def trainable(self, cfg: ModelConfig) -> dict[str, Tensor]:
        """Parameters the configured variant actually optimizes."""
        out = {}
        for name, p in self.named():
            if name.startswith("lmc.") and not cfg.iqb:
                continue
            if (name.startswith("gat") or name.startswith("fusion.")) and not cfg.fab:
                continue
            out[name] = p
        return out


def init_ggvit_params(cfg: ModelConfig, rng: np.random.Generator,
                      dtype=np.float64) -> GGViTParams:
    vit0 = init_vit_params(cfg.vit, rng, dtype=dtype)
    quads = init_stacked_vit_params(cfg.vit, rng, N_STREAMS - 1, dtype=dtype)
    lmc = init_lmc_head(cfg.vit.dim, rng, dtype=dtype, s=cfg.s, m=cfg.m)
    gats = [init_gat_unit(rng, hidden=cfg.gat_hidden, slope=cfg.gat_slope, dtype=dtype)
            for _ in range(N_STREAMS)]
    return GGViTParams(
        vit0=vit0,
        quads=quads,
        lmc=lmc,
        gats=gats,
        fusion_w=ad.param(trunc_normal(rng, (2, 2 * N_STREAMS), std=0.2, dtype=dtype)),
        fusion_b=ad.param(np.zeros(2, dtype=dtype)),
    )


@dataclass
class ForwardOut:
    stream_logits: list[Tensor]   # 5 x (B, 2)
    stream_probs: list[Tensor]    # 5 x (B, 2), softmaxed
    embedding: Tensor             # (B, D) whole-face class token
    final_logits: Tensor | None   # (B, 2) when fab is on
    fusion: Tensor | None         # (B, 10) when fab is on

    def decisions(self) -> np.ndarray:
        """Predicted class per sample: fusion head when present, else the
        mean of the five stream probability vectors."""
        if self.final_logits is not None:
            return self.final_logits.data.argmax(axis=-1)
        mean_probs = np.mean([p.data for p in self.stream_probs], axis=0)
        return mean_probs.argmax(axis=-1)


def ggvit_forward(params: GGViTParams, cfg: ModelConfig, streams: list[Tensor],
                  zero_guidance: bool = False) -> ForwardOut:
    """Run all five streams. ``streams`` is [X0, X1, X2, X3, X4], each
    (B, 3, S, S). ``zero_guidance`` injects a detached all-zero signal in
    place of the embedding-derived one (the no-guidance equivalence case).

    The quadrant streams run as one stacked pass; gradients reach the
    whole-face encoder both through its own logits and through the injected
    guidance signal.
    """
    if len(streams) != N_STREAMS:
        raise ValueError(f"ggvit_forward: need {N_STREAMS} stream inputs")
    logits0, emb = vit_forward(params.vit0, streams[0], cfg.vit)

    quad_in = Tensor(np.stack([s.data for s in streams[1:]], axis=0))
    # broadcast add over the stacked stream axis; the guidance gradient
    # accumulates contributions from all four quadrant streams
    if zero_guidance:
        quad_in = ad.add(quad_in, Tensor(np.zeros(streams[1].shape,
                                                  dtype=streams[1].dtype)))
    elif cfg.guidance:
        signal = guidance_signal(emb, cfg.vit.side)
        if cfg.guidance_gain != 1.0:
            signal = ad.scale(signal, cfg.guidance_gain)
        quad_in = ad.add(quad_in, signal)

    quad_logits, _ = vit_forward_multi(params.quads, quad_in, cfg.vit)
    b = streams[0].shape[0]
    stream_logits = [logits0] + [
        ad.reshape(ad.slice_(quad_logits, (slice(k, k + 1),)), (b, 2))
        for k in range(N_STREAMS - 1)]
    stream_probs = [predict(z) for z in stream_logits]

    final_logits = fusion = None
    if cfg.fab:
        final_logits, fusion = fuse(params.gats, stream_probs, params.fusion_w,
                                    params.fusion_b)
    return ForwardOut(stream_logits=stream_logits, stream_probs=stream_probs,
                      embedding=emb, final_logits=final_logits, fusion=fusion)


def ggvit_loss(params: GGViTParams, cfg: ModelConfig, streams: list[Tensor],
               labels: np.ndarray, quality_clf: QualityClassifier | None = None,
               zero_guidance: bool = False) -> tuple[Tensor, losses.LossBreakdown, ForwardOut]:
    """Assemble the full objective for one batch (batch-summed components)."""
    out = ggvit_forward(params, cfg, streams, zero_guidance=zero_guidance)
    lv, clamps_v = losses.l_vit(out.stream_probs, labels)

    lm = None
    if cfg.iqb:
        if quality_clf is None:
            raise ValueError("ggvit_loss: iqb enabled but no quality classifier given")
        q = quality_scalar(quality_clf.probs(streams[0]))
        e_star = build_quality_embedding(out.embedding, q, params.lmc)
        lm = lmc_loss(e_star, labels, params.lmc)

    lf = None
    clamps_f = 0
    if cfg.fab:
        lf, clamps_f = losses.l_fusion(out.final_logits, labels)

    total, breakdown = losses.total_loss(lv, lm, lf, cfg.lam,
                                         clamp_count=clamps_v + clamps_f)
    return total, breakdown, out
