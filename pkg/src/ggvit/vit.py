"""Pre-norm vision transformer encoder built on the tape ops.

Each stream is a standard ViT: patch projection, class token, learned
positional embeddings, pre-norm attention/MLP blocks with GELU, final
layernorm. The class-token vector after the final layernorm is both the
stream embedding and the input to the 2-way head.

Presets: "tiny" (side 64, patch 8, dim 48, depth 4) for tests and toy
training, "base" (side 224, patch 16, dim 768, depth 12, the ViT-B/16
layout) for full-scale fidelity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class ViTConfig:
    side: int = 64
    patch: int = 8
    dim: int = 48
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 2.0
    n_classes: int = 2

    def __post_init__(self):
        if self.side % self.patch:
            raise ValueError(f"side {self.side} not divisible by patch {self.patch}")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        guidance_grid_side(self.dim)  # must admit a 3 x G x G reshape

    @property
    def tokens(self) -> int:
        return 1 + (self.side // self.patch) ** 2

    @property
    def mlp_dim(self) -> int:
        return int(self.mlp_ratio * self.dim)


def guidance_grid_side(dim: int) -> int:
    """G with dim == 3 * G * G; raises when no such integer exists."""
    g = math.isqrt(dim // 3)
    if 3 * g * g != dim:
        raise ValueError(f"embed dim {dim} is not 3*G*G for integer G")
    return g


PRESETS = {
    "tiny": ViTConfig(side=64, patch=8, dim=48, depth=4, heads=4, mlp_ratio=2.0),
    "base": ViTConfig(side=224, patch=16, dim=768, depth=12, heads=12, mlp_ratio=4.0),
}


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02,
                 dtype=np.float64) -> np.ndarray:
    """Normal(0, std) truncated at +-2 std via rejection resampling."""
    out = rng.normal(0.0, std, size=shape)
    bound = 2.0 * std
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > bound
    return out.astype(dtype)


@dataclass
class BlockParams:
    ln1_g: Tensor
    ln1_b: Tensor
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class ViTParams:
    patch_w: Tensor       # (dim, 3*P*P)
    patch_b: Tensor       # (dim,)
    cls_token: Tensor     # (1, 1, dim)
    pos_embed: Tensor     # (tokens, dim)
    blocks: list[BlockParams]
    ln_g: Tensor
    ln_b: Tensor
    head_w: Tensor        # (n_classes, dim)
    head_b: Tensor        # (n_classes,)

    def named(self, prefix: str = ""):
        yield f"{prefix}patch_w", self.patch_w
        yield f"{prefix}patch_b", self.patch_b
        yield f"{prefix}cls_token", self.cls_token
        yield f"{prefix}pos_embed", self.pos_embed
        for i, blk in enumerate(self.blocks):
            for fname in ("ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv",
                          "wo", "bo", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2"):
                yield f"{prefix}blocks.{i}.{fname}", getattr(blk, fname)
        yield f"{prefix}ln_g", self.ln_g
        yield f"{prefix}ln_b", self.ln_b
        yield f"{prefix}head_w", self.head_w
        yield f"{prefix}head_b", self.head_b


def _patch_filter_bank(rng: np.random.Generator, dim: int, patch: int,
                       gain: float = 2.0) -> np.ndarray:
    """Generic per-patch filters: channel and opponent-color means, gradients,
    and low-frequency cosines; remaining rows are trunc-normal(0.02).

    A from-scratch random projection leaves the class token almost blind to
    the input under plain SGD (verified against a torchvision ViT, which
    shows the same collapse); this bank is the desk-scale stand-in for the
    pretrained patch embedding the full-scale system starts from.
    """
    p = patch
    yy, xx = np.mgrid[0:p, 0:p] / max(p - 1, 1)
    ones = np.ones((p, p))
    zer = np.zeros((p, p))

    def flat(maps):
        return np.asarray(maps, dtype=np.float64).reshape(-1)

    rows = [
        flat([ones, zer, zer]), flat([zer, ones, zer]), flat([zer, zer, ones]),
        flat([ones, -ones, zer]), flat([zer, ones, -ones]),
        flat([ones, -0.5 * ones, -0.5 * ones]),
        flat([(xx - 0.5) / 3] * 3), flat([(yy - 0.5) / 3] * 3),
        flat([(xx + yy - 1.0) / 3] * 3), flat([(xx - yy) / 3] * 3),
    ]
    for f in (1, 2):
        for grid in (xx, yy):
            rows.append(flat([np.cos(2 * np.pi * f * grid) / 3] * 3))
            rows.append(flat([np.sin(2 * np.pi * f * grid) / 3] * 3))
    bank = np.stack(rows[:dim])
    bank = bank / np.linalg.norm(bank, axis=1, keepdims=True) * gain
    w = trunc_normal(rng, (dim, 3 * p * p), std=0.02, dtype=np.float64)
    w[:len(bank)] = bank
    return w


SELECT_GAIN = 3.0  # attention-score spread of the pooling heads at init


def init_vit_params(cfg: ViTConfig, rng: np.random.Generator,
                    dtype=np.float64) -> ViTParams:
    """Seeded encoder init, constructed to be trainable by plain SGD.

    Every attention head starts as a feature-selective pooler: the query
    matrix is zero, one query-bias coordinate per head is hot, and the
    matching key column holds a random unit feature direction, so the class
    token reads a soft-max over tokens of that feature instead of a uniform
    average. Value/output/MLP projections use Xavier scaling; the class
    token starts at zero and positional embeddings at trunc-normal(0.02).
    All parameters remain trainable.
    """
    d = cfg.dim
    dh = d // cfg.heads
    xav = np.sqrt(2.0 / (d + d))

    def z(*shape):
        return ad.param(np.zeros(shape, dtype=dtype))

    def ones(*shape):
        return ad.param(np.ones(shape, dtype=dtype))

    def xavier(fan_in, fan_out):
        std = np.sqrt(2.0 / (fan_in + fan_out))
        return ad.param(trunc_normal(rng, (fan_in, fan_out), std=std, dtype=dtype))

    blocks = []
    for _ in range(cfg.depth):
        wq = np.zeros((d, d))
        bq = np.zeros(d)
        wk = trunc_normal(rng, (d, d), std=0.02, dtype=np.float64)
        for head in range(cfg.heads):
            direction = rng.normal(size=d)
            direction /= np.linalg.norm(direction)
            bq[head * dh] = SELECT_GAIN * np.sqrt(dh)
            wk[:, head * dh] = direction
        blocks.append(BlockParams(
            ln1_g=ones(d), ln1_b=z(d),
            wq=ad.param(wq.astype(dtype)), bq=ad.param(bq.astype(dtype)),
            wk=ad.param(wk.astype(dtype)), bk=z(d),
            wv=ad.param(trunc_normal(rng, (d, d), std=xav, dtype=dtype)), bv=z(d),
            wo=ad.param(trunc_normal(rng, (d, d), std=xav, dtype=dtype)), bo=z(d),
            ln2_g=ones(d), ln2_b=z(d),
            w1=xavier(d, cfg.mlp_dim), b1=z(cfg.mlp_dim),
            w2=xavier(cfg.mlp_dim, d), b2=z(d),
        ))
    return ViTParams(
        patch_w=ad.param(_patch_filter_bank(rng, d, cfg.patch).astype(dtype)),
        patch_b=z(d),
        cls_token=z(1, 1, d),
        pos_embed=ad.param(trunc_normal(rng, (cfg.tokens, d), dtype=dtype)),
        blocks=blocks,
        ln_g=ones(d),
        ln_b=z(d),
        head_w=ad.param(trunc_normal(rng, (cfg.n_classes, d), dtype=dtype)),
        head_b=z(cfg.n_classes),
    )


def _patchify(images: Tensor, cfg: ViTConfig) -> Tensor:
    """(B, 3, S, S) -> (B, T, 3*P*P) patch vectors, channel-major per patch."""
    b = images.shape[0]
    p = cfg.patch
    n = cfg.side // p
    x = ad.reshape(images, (b, 3, n, p, n, p))
    x = ad.transpose(x, (0, 2, 4, 1, 3, 5))
    return ad.reshape(x, (b, n * n, 3 * p * p))


def _affine_ln(x: Tensor, g: Tensor, b: Tensor) -> Tensor:
    return ad.add(ad.mul(ad.layernorm(x), g), b)


def _attention(x: Tensor, blk: BlockParams, cfg: ViTConfig,
               attn_sink: list | None = None) -> Tensor:
    b, t, d = x.shape
    h = cfg.heads
    dh = d // h

    def heads(w, bias):
        y = ad.add(ad.matmul(x, w), bias)
        y = ad.reshape(y, (b, t, h, dh))
        return ad.transpose(y, (0, 2, 1, 3))  # (B, H, T, dh)

    q = heads(blk.wq, blk.bq)
    k = heads(blk.wk, blk.bk)
    v = heads(blk.wv, blk.bv)
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    attn = ad.softmax(scores, axis=-1)
    if attn_sink is not None:
        attn_sink.append(attn.data)
    y = ad.matmul(attn, v)
    y = ad.reshape(ad.transpose(y, (0, 2, 1, 3)), (b, t, d))
    return ad.add(ad.matmul(y, blk.wo), blk.bo)


def _mlp(x: Tensor, blk: BlockParams) -> Tensor:
    y = ad.gelu(ad.add(ad.matmul(x, blk.w1), blk.b1))
    return ad.add(ad.matmul(y, blk.w2), blk.b2)


def vit_forward(params: ViTParams, images: Tensor, cfg: ViTConfig,
                attn_sink: list | None = None) -> tuple[Tensor, Tensor]:
    """Returns (logits (B, n_classes), embedding (B, dim)).

    The embedding is the class token after the final layernorm; ``attn_sink``
    collects per-block attention maps when provided.
    """
    if images.shape[1:] != (3, cfg.side, cfg.side):
        raise ad.ShapeError(
            f"vit_forward: expected (B, 3, {cfg.side}, {cfg.side}), got {images.shape}")
    b = images.shape[0]
    tokens = ad.add(ad.matmul(_patchify(images, cfg), ad.transpose(params.patch_w, (1, 0))),
                    params.patch_b)
    cls = ad.tile(params.cls_token, (b, 1, 1))
    x = ad.concat([cls, tokens], axis=1)
    x = ad.add(x, params.pos_embed)
    for blk in params.blocks:
        x = ad.add(x, _attention(_affine_ln(x, blk.ln1_g, blk.ln1_b), blk, cfg, attn_sink))
        x = ad.add(x, _mlp(_affine_ln(x, blk.ln2_g, blk.ln2_b), blk))
    x = _affine_ln(x, params.ln_g, params.ln_b)
    emb = ad.reshape(ad.slice_(x, (slice(None), slice(0, 1), slice(None))), (b, cfg.dim))
    logits = ad.add(ad.matmul(emb, ad.transpose(params.head_w, (1, 0))), params.head_b)
    return logits, emb


def predict(logits: Tensor) -> Tensor:
    """Class probabilities; index 0 = real, 1 = forged."""
    return ad.softmax(logits, axis=-1)


# --- stacked multi-stream forward ---------------------------------------------
#
# The four quadrant streams share no weights, but their shapes are identical,
# so their parameters live stacked along a leading axis and one tape pass
# runs all of them. Slice views recover per-stream ViTParams when needed.

_BLOCK_FIELDS = ("ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv",
                 "wo", "bo", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2")
_TOP_FIELDS = ("patch_w", "patch_b", "cls_token", "pos_embed", "ln_g", "ln_b",
               "head_w", "head_b")


@dataclass
class StackedViTParams:
    """Parameters of M independent streams, stacked on axis 0."""

    n_streams: int
    patch_w: Tensor       # (M, dim, 3*P*P)
    patch_b: Tensor       # (M, dim)
    cls_token: Tensor     # (M, 1, 1, dim)
    pos_embed: Tensor     # (M, tokens, dim)
    blocks: list[BlockParams]   # fields carry a leading M axis
    ln_g: Tensor
    ln_b: Tensor
    head_w: Tensor        # (M, n_classes, dim)
    head_b: Tensor        # (M, n_classes)

    def named(self, prefix: str = ""):
        for f in ("patch_w", "patch_b", "cls_token", "pos_embed"):
            yield f"{prefix}{f}", getattr(self, f)
        for i, blk in enumerate(self.blocks):
            for f in _BLOCK_FIELDS:
                yield f"{prefix}blocks.{i}.{f}", getattr(blk, f)
        for f in ("ln_g", "ln_b", "head_w", "head_b"):
            yield f"{prefix}{f}", getattr(self, f)

    def stream_view(self, k: int) -> ViTParams:
        """Value view of stream k as plain (non-leaf) ViTParams."""
        def cut(t):
            return Tensor(t.data[k])
        blocks = [BlockParams(**{f: cut(getattr(blk, f)) for f in _BLOCK_FIELDS})
                  for blk in self.blocks]
        top = {f: cut(getattr(self, f)) for f in _TOP_FIELDS}
        top["cls_token"] = Tensor(self.cls_token.data[k])
        return ViTParams(blocks=blocks, **top)


def stack_vit_params(streams: list[ViTParams]) -> StackedViTParams:
    """Stack per-stream parameter sets into shared leaves (training layout)."""
    m = len(streams)

    def stacked(field_values):
        return ad.param(np.stack([v.data for v in field_values], axis=0))

    blocks = []
    for blk_set in zip(*(s.blocks for s in streams)):
        blocks.append(BlockParams(**{
            f: stacked([getattr(b, f) for b in blk_set]) for f in _BLOCK_FIELDS}))
    top = {f: stacked([getattr(s, f) for s in streams]) for f in _TOP_FIELDS}
    return StackedViTParams(n_streams=m, blocks=blocks, **top)


def init_stacked_vit_params(cfg: ViTConfig, rng: np.random.Generator, n_streams: int,
                            dtype=np.float64) -> StackedViTParams:
    """Same draws as initializing ``n_streams`` encoders one after another."""
    return stack_vit_params([init_vit_params(cfg, rng, dtype=dtype)
                             for _ in range(n_streams)])


def _patchify_multi(images: Tensor, cfg: ViTConfig) -> Tensor:
    m, b = images.shape[:2]
    p = cfg.patch
    n = cfg.side // p
    x = ad.reshape(images, (m, b, 3, n, p, n, p))
    x = ad.transpose(x, (0, 1, 3, 5, 2, 4, 6))
    return ad.reshape(x, (m, b, n * n, 3 * p * p))


def _bc(t: Tensor, shape) -> Tensor:
    """Reshape a stacked parameter for broadcasting over the batch axis."""
    return ad.reshape(t, shape)


def _mm_streams(x: Tensor, w: Tensor) -> Tensor:
    """(M, B, T, K) @ (M, K, D) as M large GEMMs (collapse the B axis;
    a (M, 1, K, D) broadcast would degrade into M*B small GEMMs)."""
    m, b, t, k = x.shape
    y = ad.matmul(ad.reshape(x, (m, b * t, k)), w)
    return ad.reshape(y, (m, b, t, w.shape[-1]))


def _affine_ln_multi(x: Tensor, g: Tensor, b: Tensor) -> Tensor:
    m, d = g.shape
    return ad.add(ad.mul(ad.layernorm(x), _bc(g, (m, 1, 1, d))),
                  _bc(b, (m, 1, 1, d)))


def _attention_multi(x: Tensor, blk: BlockParams, cfg: ViTConfig) -> Tensor:
    m, b, t, d = x.shape
    h = cfg.heads
    dh = d // h

    def heads(w, bias):
        y = ad.add(_mm_streams(x, w), _bc(bias, (m, 1, 1, d)))
        y = ad.reshape(y, (m, b, t, h, dh))
        return ad.transpose(y, (0, 1, 3, 2, 4))  # (M, B, H, T, dh)

    q = heads(blk.wq, blk.bq)
    k = heads(blk.wk, blk.bk)
    v = heads(blk.wv, blk.bv)
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 2, 4, 3))),
                      1.0 / math.sqrt(dh))
    y = ad.matmul(ad.softmax(scores, axis=-1), v)
    y = ad.reshape(ad.transpose(y, (0, 1, 3, 2, 4)), (m, b, t, d))
    return ad.add(_mm_streams(y, blk.wo), _bc(blk.bo, (m, 1, 1, d)))


def vit_forward_multi(params: StackedViTParams, images: Tensor,
                      cfg: ViTConfig) -> tuple[Tensor, Tensor]:
    """Forward M streams at once: images (M, B, 3, S, S) ->
    (logits (M, B, n_classes), embeddings (M, B, dim))."""
    m = params.n_streams
    if images.shape[0] != m or images.shape[2:] != (3, cfg.side, cfg.side):
        raise ad.ShapeError(
            f"vit_forward_multi: expected ({m}, B, 3, {cfg.side}, {cfg.side}), "
            f"got {images.shape}")
    b = images.shape[1]
    d = cfg.dim
    mlp = cfg.mlp_dim
    tokens = ad.add(_mm_streams(_patchify_multi(images, cfg),
                                ad.transpose(params.patch_w, (0, 2, 1))),
                    _bc(params.patch_b, (m, 1, 1, d)))
    cls = ad.tile(params.cls_token, (1, b, 1, 1))
    x = ad.concat([cls, tokens], axis=2)
    x = ad.add(x, _bc(params.pos_embed, (m, 1, cfg.tokens, d)))
    for blk in params.blocks:
        x = ad.add(x, _attention_multi(_affine_ln_multi(x, blk.ln1_g, blk.ln1_b), blk, cfg))
        y = ad.gelu(ad.add(_mm_streams(_affine_ln_multi(x, blk.ln2_g, blk.ln2_b), blk.w1),
                           _bc(blk.b1, (m, 1, 1, mlp))))
        x = ad.add(x, ad.add(_mm_streams(y, blk.w2), _bc(blk.b2, (m, 1, 1, d))))
    x = _affine_ln_multi(x, params.ln_g, params.ln_b)
    emb = ad.reshape(ad.slice_(x, (slice(None), slice(None), slice(0, 1), slice(None))),
                     (m, b, d))
    logits = ad.add(ad.matmul(emb, ad.transpose(params.head_w, (0, 2, 1))),
                    _bc(params.head_b, (m, 1, cfg.n_classes)))
    return logits, emb
