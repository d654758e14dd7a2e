"""Encoder behavior: shapes, attention simplex, positional sensitivity,
permutation symmetry, head wiring, and gradient flow end to end."""

import numpy as np
import pytest

from ggvit import autodiff as ad
from ggvit.autodiff import Tensor
from ggvit.vit import (PRESETS, ViTConfig, guidance_grid_side, init_vit_params,
                       predict, trunc_normal, vit_forward)

SMALL = ViTConfig(side=16, patch=8, dim=12, depth=2, heads=2, mlp_ratio=2.0)


def make(cfg=SMALL, seed=0):
    return init_vit_params(cfg, np.random.default_rng(seed))


def test_config_validation():
    with pytest.raises(ValueError):
        ViTConfig(side=30, patch=8, dim=12, depth=1, heads=2)   # side % patch != 0
    with pytest.raises(ValueError):
        ViTConfig(side=16, patch=8, dim=27, depth=1, heads=2)   # dim % heads != 0
    with pytest.raises(ValueError):
        ViTConfig(side=16, patch=8, dim=16, depth=1, heads=2)   # 16 != 3*G^2
    assert PRESETS["tiny"].tokens == 1 + 64
    assert PRESETS["base"].tokens == 1 + 196


def test_guidance_grid_side():
    assert guidance_grid_side(48) == 4
    assert guidance_grid_side(768) == 16
    with pytest.raises(ValueError):
        guidance_grid_side(50)


def test_trunc_normal_bounds_and_determinism():
    a = trunc_normal(np.random.default_rng(5), (200, 50), std=0.02)
    b = trunc_normal(np.random.default_rng(5), (200, 50), std=0.02)
    assert np.array_equal(a, b)
    assert np.abs(a).max() <= 0.04 + 1e-12
    assert 0.015 < a.std() < 0.02  # +-2 sigma truncation shrinks std to ~0.88 sigma


def test_forward_shapes_and_determinism():
    params = make()
    rng = np.random.default_rng(1)
    x = Tensor(rng.uniform(0, 1, size=(3, 3, 16, 16)))
    logits, emb = vit_forward(params, x, SMALL)
    assert logits.shape == (3, 2)
    assert emb.shape == (3, 12)
    logits2, emb2 = vit_forward(params, Tensor(x.data.copy()), SMALL)
    assert np.array_equal(logits.data, logits2.data)
    assert np.array_equal(emb.data, emb2.data)


def test_zero_image_zero_params_logits_equal_head_bias():
    params = make()
    for name, p in params.named():
        if name.endswith(("ln1_g", "ln2_g", "ln_g")):
            p.data = np.ones_like(p.data)
        else:
            p.data = np.zeros_like(p.data)
    bias = np.array([0.3, -0.7])
    params.head_b.data = bias.copy()
    x = Tensor(np.zeros((2, 3, 16, 16)))
    logits, _ = vit_forward(params, x, SMALL)
    assert np.allclose(logits.data, np.tile(bias, (2, 1)), atol=1e-12)


def test_attention_rows_sum_to_one():
    params = make()
    rng = np.random.default_rng(2)
    x = Tensor(rng.uniform(0, 1, size=(2, 3, 16, 16)))
    sink = []
    vit_forward(params, x, SMALL, attn_sink=sink)
    assert len(sink) == SMALL.depth
    for attn in sink:
        assert attn.shape == (2, SMALL.heads, SMALL.tokens, SMALL.tokens)
        sums = attn.sum(axis=-1)
        assert np.abs(sums - 1.0).max() <= 1e-9
        assert attn.min() >= 0


def _token_permutation(cfg, rng):
    """Patch permutation plus the matching positional-row permutation."""
    n = cfg.tokens - 1
    perm = rng.permutation(n)
    return perm


def _permute_patches(images, cfg, perm):
    """Reorder the patch grid of (B, 3, S, S) images according to perm."""
    b = images.shape[0]
    p = cfg.patch
    n = cfg.side // p
    x = images.reshape(b, 3, n, p, n, p).transpose(0, 2, 4, 1, 3, 5)
    x = x.reshape(b, n * n, 3, p, p)[:, perm]
    x = x.reshape(b, n, n, 3, p, p).transpose(0, 3, 1, 4, 2, 5)
    return x.reshape(b, 3, cfg.side, cfg.side)


def test_patch_permutation_with_pos_rows_is_symmetric():
    cfg = SMALL
    params = make(cfg, seed=3)
    rng = np.random.default_rng(4)
    x = rng.uniform(0, 1, size=(2, 3, cfg.side, cfg.side))
    perm = _token_permutation(cfg, rng)

    base_logits, base_emb = vit_forward(params, Tensor(x), cfg)
    pos = params.pos_embed.data.copy()
    params.pos_embed.data = np.concatenate([pos[:1], pos[1:][perm]], axis=0)
    perm_logits, perm_emb = vit_forward(params, Tensor(_permute_patches(x, cfg, perm)), cfg)
    params.pos_embed.data = pos
    assert np.abs(base_emb.data - perm_emb.data).max() <= 1e-10
    assert np.abs(base_logits.data - perm_logits.data).max() <= 1e-10


def test_forward_positionally_sensitive():
    cfg = SMALL
    params = make(cfg, seed=5)
    rng = np.random.default_rng(6)
    x = rng.uniform(0, 1, size=(1, 3, cfg.side, cfg.side))
    perm = np.roll(np.arange(cfg.tokens - 1), 1)
    _, base = vit_forward(params, Tensor(x), cfg)
    _, moved = vit_forward(params, Tensor(_permute_patches(x, cfg, perm)), cfg)
    assert np.abs(base.data - moved.data).max() > 1e-6


def test_predict_examples():
    assert np.allclose(predict(Tensor(np.array([[0.0, 0.0]]))).data, [[0.5, 0.5]])
    p = predict(Tensor(np.array([[np.log(3.0), 0.0]]))).data
    assert np.allclose(p, [[0.75, 0.25]], atol=1e-12)
    rng = np.random.default_rng(7)
    z = rng.normal(size=(8, 2))
    p = predict(Tensor(z)).data
    assert np.array_equal(p.argmax(axis=1), z.argmax(axis=1))


def test_cross_entropy_gradient_through_encoder_fd():
    """Full-encoder gradient check on a handful of parameter tensors."""
    from ggvit.losses import ce_sum_from_logits
    cfg = SMALL
    params = make(cfg, seed=8)
    rng = np.random.default_rng(9)
    x = Tensor(rng.uniform(0, 1, size=(2, 3, cfg.side, cfg.side)))
    labels = np.array([0, 1])

    def loss():
        logits, _ = vit_forward(params, x, cfg)
        val, _ = ce_sum_from_logits(logits, labels)
        return val

    subset = {name: p for name, p in params.named()
              if name in ("patch_w", "cls_token", "pos_embed", "blocks.0.wq",
                          "blocks.1.w1", "blocks.0.ln1_g", "ln_g", "head_w", "head_b")}
    report = ad.finite_diff_check(loss, subset, coords_per_param=4, seed=0,
                                  coord_mode="largest")
    assert report.passed, "\n".join(report.lines())


def test_rejects_wrong_input_shape():
    params = make()
    with pytest.raises(ad.ShapeError):
        vit_forward(params, Tensor(np.zeros((1, 3, 8, 8))), SMALL)


def test_stacked_forward_matches_per_stream():
    from ggvit.vit import init_stacked_vit_params, vit_forward_multi
    cfg = SMALL
    stacked = init_stacked_vit_params(cfg, np.random.default_rng(21), 4)
    rng = np.random.default_rng(22)
    images = rng.uniform(0, 1, size=(4, 2, 3, cfg.side, cfg.side))
    logits_m, emb_m = vit_forward_multi(stacked, Tensor(images), cfg)
    assert logits_m.shape == (4, 2, 2)
    assert emb_m.shape == (4, 2, cfg.dim)
    for k in range(4):
        view = stacked.stream_view(k)
        logits_k, emb_k = vit_forward(view, Tensor(images[k]), cfg)
        assert np.abs(logits_m.data[k] - logits_k.data).max() <= 1e-12
        assert np.abs(emb_m.data[k] - emb_k.data).max() <= 1e-12


def test_stacked_gradients_pass_fd():
    from ggvit.losses import ce_sum_from_logits
    from ggvit.vit import init_stacked_vit_params, vit_forward_multi
    cfg = SMALL
    stacked = init_stacked_vit_params(cfg, np.random.default_rng(23), 2)
    rng = np.random.default_rng(24)
    x = Tensor(rng.uniform(0, 1, size=(2, 2, 3, cfg.side, cfg.side)))
    labels = np.array([0, 1])

    def loss():
        logits, _ = vit_forward_multi(stacked, x, cfg)
        l0, _ = ce_sum_from_logits(ad.reshape(ad.slice_(logits, (slice(0, 1),)), (2, 2)), labels)
        l1, _ = ce_sum_from_logits(ad.reshape(ad.slice_(logits, (slice(1, 2),)), (2, 2)), labels)
        return ad.add(l0, l1)

    subset = {name: p for name, p in stacked.named()
              if name in ("patch_w", "pos_embed", "blocks.0.wq", "blocks.1.w2",
                          "ln_g", "head_w", "cls_token")}
    report = ad.finite_diff_check(loss, subset, coords_per_param=6, seed=3,
                                  coord_mode="largest")
    assert report.passed, "\n".join(report.lines())
