"""Guidance wiring: reshape/tile index arithmetic, linearity, additive
injection, zero-embedding equivalence, and gradient flow into the
whole-face encoder."""

import numpy as np
import pytest

from ggvit import autodiff as ad
from ggvit.autodiff import Tensor
from ggvit.guidance import embed_to_grid, guidance_signal, inject, tile_grid
from ggvit.model import ggvit_forward, init_ggvit_params, make_config
from ggvit.vit import ViTConfig


def test_embed_to_grid_index_arithmetic():
    e = Tensor(np.arange(12.0))
    grid = embed_to_grid(e, 2).data
    assert np.array_equal(grid[0], [[0, 1], [2, 3]])
    assert np.array_equal(grid[1], [[4, 5], [6, 7]])
    assert np.array_equal(grid[2], [[8, 9], [10, 11]])


def test_embed_to_grid_zero_and_roundtrip():
    z = embed_to_grid(Tensor(np.zeros(12)), 2)
    assert not z.data.any()
    rng = np.random.default_rng(0)
    e = rng.normal(size=48)
    grid = embed_to_grid(Tensor(e), 4)
    assert np.array_equal(grid.data.reshape(-1), e)  # bit-exact round trip


def test_embed_to_grid_enforces_dim():
    with pytest.raises(ValueError, match="3"):
        embed_to_grid(Tensor(np.zeros(10)), 2)
    # the paper-scale and tiny-scale constraints: 768 -> 16, 48 -> 4
    embed_to_grid(Tensor(np.zeros(768)), 16)
    embed_to_grid(Tensor(np.zeros(48)), 4)
    with pytest.raises(ValueError):
        embed_to_grid(Tensor(np.zeros(768)), 8)


def test_tile_grid_index_arithmetic():
    grid = np.zeros((3, 2, 2))
    grid[0] = [[1, 2], [3, 4]]
    out = tile_grid(Tensor(grid), 4).data
    assert np.array_equal(out[0], [[1, 2, 1, 2], [3, 4, 3, 4],
                                   [1, 2, 1, 2], [3, 4, 3, 4]])
    # every G x G block equals the grid, bit-exact
    for bi in range(2):
        for bj in range(2):
            assert np.array_equal(out[:, 2 * bi:2 * bi + 2, 2 * bj:2 * bj + 2], grid)


def test_tile_grid_constant_and_errors():
    out = tile_grid(Tensor(np.full((3, 4, 4), 2.5)), 16).data
    assert out.shape == (3, 16, 16)
    assert (out == 2.5).all()
    with pytest.raises(ValueError, match="divisible"):
        tile_grid(Tensor(np.zeros((3, 5, 5))), 16)


def test_tile_of_reshape_is_linear():
    rng = np.random.default_rng(1)
    e1, e2 = rng.normal(size=48), rng.normal(size=48)
    a, b = 0.7, -1.3

    def f(e):
        return tile_grid(embed_to_grid(Tensor(e), 4), 16).data

    lhs = f(a * e1 + b * e2)
    rhs = a * f(e1) + b * f(e2)
    assert np.abs(lhs - rhs).max() <= 1e-12


def test_inject_identity_commutativity_gradient():
    rng = np.random.default_rng(2)
    q = rng.uniform(0, 1, size=(3, 8, 8))
    g = rng.normal(size=(3, 8, 8))
    assert np.array_equal(inject(Tensor(q), Tensor(np.zeros_like(q))).data, q)
    ab = inject(Tensor(q), Tensor(g)).data
    ba = inject(Tensor(g), Tensor(q)).data
    assert np.array_equal(ab, ba)

    qp, gp = ad.param(q), ad.param(g)
    grads = ad.backward(ad.sum_(inject(qp, gp)), leaves=[qp, gp])
    assert np.array_equal(grads[qp].data, np.ones_like(q))
    assert np.array_equal(grads[gp].data, np.ones_like(g))
    with pytest.raises(ad.ShapeError):
        inject(Tensor(np.zeros((3, 8, 8))), Tensor(np.zeros((3, 4, 4))))


def test_guidance_signal_batched():
    rng = np.random.default_rng(3)
    e = rng.normal(size=(2, 48))
    sig = guidance_signal(Tensor(e), 16).data
    assert sig.shape == (2, 3, 16, 16)
    assert np.array_equal(sig[0, :, :4, :4], e[0].reshape(3, 4, 4))
    assert np.array_equal(sig[1, :, 4:8, 8:12], e[1].reshape(3, 4, 4))


TINY2 = ViTConfig(side=16, patch=8, dim=12, depth=1, heads=2, mlp_ratio=2.0)


def _tiny_case(seed=0, guidance=True, iqb=False, fab=False):
    cfg = make_config("tiny", guidance=guidance, iqb=iqb, fab=fab)
    cfg = cfg.__class__(**{**cfg.__dict__, "vit": TINY2})
    params = init_ggvit_params(cfg, np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 1)
    streams = [Tensor(rng.uniform(0, 1, size=(2, 3, 16, 16))) for _ in range(5)]
    return cfg, params, streams


def test_zero_embedding_equals_no_guidance_ablation():
    cfg, params, streams = _tiny_case()
    forced = ggvit_forward(params, cfg, streams, zero_guidance=True)
    ablated_cfg = cfg.__class__(**{**cfg.__dict__, "guidance": False})
    ablated = ggvit_forward(params, ablated_cfg, streams)
    for a, b in zip(forced.stream_logits, ablated.stream_logits):
        assert np.abs(a.data - b.data).max() <= 1e-12


def test_gradient_flows_into_whole_face_encoder_via_guidance_only():
    # loss over quadrant streams only (X0 term excluded): with guidance the
    # whole-face encoder still receives gradient; without it, none
    from ggvit.losses import ce_sum_from_probs
    cfg, params, streams = _tiny_case(seed=4)
    labels = np.array([0, 1])
    vit0_params = dict(params.vit0.named(prefix="vit0."))

    def quadrant_loss(c):
        out = ggvit_forward(params, c, streams)
        total = None
        for probs in out.stream_probs[1:]:
            term, _ = ce_sum_from_probs(probs, labels)
            total = term if total is None else ad.add(total, term)
        return total

    grads = ad.backward(quadrant_loss(cfg), leaves=vit0_params.values())
    total_norm = sum(float(np.abs(g.data).sum()) for g in grads.values())
    assert total_norm > 1e-6

    off = cfg.__class__(**{**cfg.__dict__, "guidance": False})
    grads_off = ad.backward(quadrant_loss(off), leaves=vit0_params.values())
    assert sum(float(np.abs(g.data).sum()) for g in grads_off.values()) == 0.0
