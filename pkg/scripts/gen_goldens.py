"""Regenerate the golden tensors used by the regression tests.

Each golden is produced by the float64 path only after its gradient
verification passes, then frozen under tests/goldens/. Rerun only when a
numeric contract deliberately changes."""

from pathlib import Path

import numpy as np

from ggvit import autodiff as ad
from ggvit.autodiff import Tensor, finite_diff_check
from ggvit.fusion import fuse, init_gat_unit
from ggvit.losses import ce_sum_from_logits
from ggvit.model import ggvit_forward, ggvit_loss, init_ggvit_params, make_config
from ggvit.quality import build_quality_embedding, init_lmc_head, init_quality_classifier
from ggvit.serialize import write_ggt1
from ggvit.vit import ViTConfig, init_vit_params, vit_forward

OUT = Path(__file__).resolve().parent.parent / "tests" / "goldens"

GOLDEN_VIT = ViTConfig(side=32, patch=8, dim=48, depth=2, heads=4, mlp_ratio=2.0)


def assert_grads(loss_fn, params, label):
    report = finite_diff_check(loss_fn, params, coords_per_param=4,
                               coord_mode="largest", min_grad=1e-5)
    if not report.passed:
        raise SystemExit(f"{label}: gradient check failed:\n" + "\n".join(report.lines()))
    print(f"{label}: gradients verified (max rel err {report.max_rel_err:.2e})")


def main():
    OUT.mkdir(parents=True, exist_ok=True)

    # encoder forward on a fixed-seed input
    params = init_vit_params(GOLDEN_VIT, np.random.default_rng(2024))
    rng = np.random.default_rng(7)
    image = Tensor(rng.uniform(0, 1, size=(1, 3, 32, 32)))
    labels = np.array([1])

    def vit_loss():
        logits, _ = vit_forward(params, image, GOLDEN_VIT)
        val, _ = ce_sum_from_logits(logits, labels)
        return val

    subset = {n: p for n, p in params.named()
              if n in ("patch_w", "pos_embed", "blocks.0.wv", "blocks.1.w1",
                       "ln_g", "head_w")}
    assert_grads(vit_loss, subset, "vit_forward")
    logits, emb = vit_forward(params, image, GOLDEN_VIT)
    write_ggt1(OUT / "vit_logits.ggt", logits.data)
    write_ggt1(OUT / "vit_embedding.ggt", emb.data)

    # quality embedding from the same encoder output
    head = init_lmc_head(GOLDEN_VIT.dim, np.random.default_rng(2025))
    q = np.array([0.25])
    e_star = build_quality_embedding(emb, q, head)

    def qe_loss():
        logits2, emb2 = vit_forward(params, image, GOLDEN_VIT)
        return ad.sum_(ad.mul(build_quality_embedding(emb2, q, head),
                              Tensor(np.full((1, 512), 0.01))))

    assert_grads(qe_loss, {"proj_w": head.proj_w, "proj_b": head.proj_b}, "quality_embedding")
    write_ggt1(OUT / "quality_embedding.ggt", e_star.data)

    # fusion tensor from fixed stream probabilities
    units = [init_gat_unit(np.random.default_rng(3000 + i)) for i in range(5)]
    frng = np.random.default_rng(9)
    probs = [Tensor(frng.dirichlet((2.0, 2.0), size=1)) for _ in range(5)]
    fin_w = ad.param(frng.normal(size=(2, 10)) * 0.3)
    fin_b = ad.param(np.zeros(2))

    def fuse_loss():
        final, _ = fuse(units, probs, fin_w, fin_b)
        val, _ = ce_sum_from_logits(final, np.array([0]))
        return val

    fparams = {"final_w": fin_w}
    for i, u in enumerate(units):
        fparams[f"gat{i}.attn_a"] = u.attn_a
    assert_grads(fuse_loss, fparams, "fusion")
    final, fusion = fuse(units, probs, fin_w, fin_b)
    write_ggt1(OUT / "fusion_tensor.ggt", fusion.data)
    write_ggt1(OUT / "fusion_logits.ggt", final.data)

    # full detector pipeline on the tiny preset: freeze the fusion tensor
    cfg = make_config("tiny")
    gparams = init_ggvit_params(cfg, np.random.default_rng(4040))
    clf = init_quality_classifier(cfg.vit.side, cfg.n_quality, dtype=np.float64)
    prng = np.random.default_rng(41)
    streams = [Tensor(prng.uniform(0, 1, size=(1, 3, 64, 64))) for _ in range(5)]

    def pipe_loss():
        total, _, _ = ggvit_loss(gparams, cfg, streams, np.array([1]), clf)
        return total

    pipe_params = {n: p for n, p in gparams.named()
                   if n in ("vit0.patch_w", "quads.patch_w", "lmc.weights",
                            "gat0.attn_a", "fusion.head_w")}
    report = finite_diff_check(pipe_loss, pipe_params, coords_per_param=2,
                               coord_mode="largest", min_grad=1e-5)
    if not report.passed:
        raise SystemExit("pipeline goldens: gradient check failed:\n"
                         + "\n".join(report.lines()))
    print(f"pipeline: gradients verified (max rel err {report.max_rel_err:.2e})")
    out = ggvit_forward(gparams, cfg, streams)
    write_ggt1(OUT / "pipeline_fusion.ggt", out.fusion.data)
    print(f"goldens written to {OUT}")


if __name__ == "__main__":
    main()
