"""Finite-difference verification of the full model's gradients.

Builds a seeded detector on random inputs and checks the tape gradients of
each loss path (per-stream cross-entropy, margin loss, fusion loss, and the
weighted total through guidance injection) against central differences.
Parameter tensors are sampled per path, with a fixed anchor set always
included, to keep the check inside its runtime budget.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import losses
from .autodiff import FiniteDiffReport, Tensor, finite_diff_check
from .model import (GGViTParams, ModelConfig, ggvit_forward, ggvit_loss,
                    init_ggvit_params, make_config)
from .quality import (QualityClassifier, build_quality_embedding,
                      init_quality_classifier, lmc_loss, quality_scalar)

ANCHORS = (
    "vit0.patch_w", "vit0.cls_token", "vit0.pos_embed", "vit0.blocks.0.wq",
    "vit0.blocks.0.ln1_g", "vit0.blocks.0.w1", "vit0.ln_g", "vit0.head_w",
    "quads.patch_w", "quads.head_w", "lmc.proj_w", "lmc.proj_b", "lmc.weights",
    "gat0.proj_w", "gat0.attn_a", "gat0.out_w", "fusion.head_w", "fusion.head_b",
)


@dataclass
class CheckCase:
    cfg: ModelConfig
    params: GGViTParams
    quality_clf: QualityClassifier
    streams: list[Tensor]
    labels: np.ndarray


def build_case(preset: str = "tiny", seed: int = 0, batch: int = 2) -> CheckCase:
    cfg = make_config(preset)
    rng = np.random.default_rng(seed)
    params = init_ggvit_params(cfg, rng, dtype=np.float64)
    clf = init_quality_classifier(cfg.vit.side, cfg.n_quality, rng, dtype=np.float64)
    streams = [Tensor(rng.uniform(0, 1, size=(batch, 3, cfg.vit.side, cfg.vit.side)))
               for _ in range(5)]
    labels = rng.integers(0, 2, size=batch)
    return CheckCase(cfg=cfg, params=params, quality_clf=clf, streams=streams,
                     labels=labels)


def _select(all_params: dict[str, Tensor], names: list[str], n_tensors: int,
            seed: int) -> dict[str, Tensor]:
    pool = [n for n in names if n not in ANCHORS]
    rng = np.random.default_rng(seed)
    picked = list(rng.choice(pool, size=min(n_tensors, len(pool)), replace=False)) \
        if pool and n_tensors else []
    chosen = [n for n in ANCHORS if n in names] + [str(p) for p in picked]
    return {n: all_params[n] for n in chosen}


def loss_paths(case: CheckCase) -> dict[str, tuple]:
    """Loss closures plus the parameter-name filters they exercise."""
    cfg, params, clf = case.cfg, case.params, case.quality_clf
    streams, labels = case.streams, case.labels

    def path_l_vit():
        out = ggvit_forward(params, cfg, streams)
        lv, _ = losses.l_vit(out.stream_probs, labels)
        return lv

    def path_l_lmc():
        out = ggvit_forward(params, cfg, streams)
        q = quality_scalar(clf.probs(streams[0]))
        return lmc_loss(build_quality_embedding(out.embedding, q, params.lmc),
                        labels, params.lmc)

    def path_l_fusion():
        out = ggvit_forward(params, cfg, streams)
        lf, _ = losses.l_fusion(out.final_logits, labels)
        return lf

    def path_total():
        total, _, _ = ggvit_loss(params, cfg, streams, labels, clf)
        return total

    def vit_names(n):
        return n.startswith("vit")

    return {
        "l_vit": (path_l_vit, vit_names),
        "l_lmc": (path_l_lmc, lambda n: n.startswith(("lmc.", "vit0."))),
        "l_fusion": (path_l_fusion, lambda n: n.startswith(("gat", "fusion.", "vit"))),
        "total": (path_total, lambda n: True),
    }


def run_gradcheck(preset: str = "tiny", seed: int = 0, step: float = 1e-6,
                  tol: float = 1e-4, tensors_per_loss: int = 14,
                  coords_per_param: int = 2) -> dict[str, FiniteDiffReport]:
    """FD-verify every loss path; returns a report per path."""
    case = build_case(preset=preset, seed=seed)
    all_params = case.params.params()
    reports: dict[str, FiniteDiffReport] = {}
    for i, (name, (fn, name_filter)) in enumerate(loss_paths(case).items()):
        names = [n for n in all_params if name_filter(n)]
        subset = _select(all_params, names, tensors_per_loss, seed=seed + 100 + i)
        reports[name] = finite_diff_check(fn, subset, step=step, tol=tol,
                                          coords_per_param=coords_per_param,
                                          seed=seed + 200 + i,
                                          coord_mode="largest", min_grad=1e-5)
    return reports


def format_reports(reports: dict[str, FiniteDiffReport]) -> list[str]:
    lines = []
    for name, rep in reports.items():
        status = "PASS" if rep.passed else "FAIL"
        lines.append(f"{name}: max_rel_err={rep.max_rel_err:.3e} "
                     f"coords={rep.checked_coords} {status}")
        if not rep.passed and rep.worst:
            pname, idx, a, nmr, rel = rep.worst
            lines.append(f"  worst: {pname}[{idx}] analytic={a:.6e} "
                         f"numeric={nmr:.6e} rel={rel:.3e}")
    overall = "PASS" if all(r.passed for r in reports.values()) else "FAIL"
    lines.append(f"overall: {overall}")
    return lines
