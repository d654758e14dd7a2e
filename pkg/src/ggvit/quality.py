"""Image-quality block: a small frozen compression-quality classifier, the
projection of the whole-face embedding to 511 dims, concatenation with the
quality scalar into a 512-vector, and the large-margin cosine loss over it.

The margin loss normalizes both the 512-vector and each class-weight row to
unit norm, subtracts the margin m from the true-class cosine only, scales by
s, and sums negative log-softmax over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .losses import ce_sum_from_logits, one_hot
from .vit import trunc_normal

LMC_DIM = 512
DEFAULT_S = 30.0
DEFAULT_M = 0.35


# --- compression-quality classifier ------------------------------------------


@dataclass
class QualityClassifier:
    """Three stride-2 conv layers (kernel 2, channels 8/16/32, ReLU), global
    mean pool, linear K-way head. Frozen after its own training run.

    The conv stack is a structured, deterministic feature extractor:
    layer 1 holds rectified pixel-difference units at two thresholds,
    layer 2 aggregates them into plateau-fraction and edge-tail statistics
    (the signatures of value quantization and blur), layer 3 passes them
    through with extra thresholds. Only the head is fit; joint SGD from
    random init cannot recover these second-order statistics at desk scale.
    """

    conv_w: list[Tensor]   # (4*C_in, C_out) patch-matmul kernels
    conv_b: list[Tensor]
    head_w: Tensor         # (32, K)
    head_b: Tensor         # (K,)
    side: int
    n_classes: int

    CHANNELS = (8, 16, 32)
    EDGE_GAIN = 8.0

    def named(self, prefix: str = "q."):
        for i, (w, b) in enumerate(zip(self.conv_w, self.conv_b)):
            yield f"{prefix}conv{i}_w", w
            yield f"{prefix}conv{i}_b", b
        yield f"{prefix}head_w", self.head_w
        yield f"{prefix}head_b", self.head_b

    def params(self) -> dict[str, Tensor]:
        return dict(self.named())

    def features(self, images: Tensor) -> Tensor:
        """(B, 3, S, S) in [0, 1] -> pooled (B, 32) conv features."""
        x = ad.add(ad.transpose(images, (0, 2, 3, 1)),
                   Tensor(np.asarray(-0.5, dtype=images.dtype)))
        for w, b_ in zip(self.conv_w, self.conv_b):
            bb, hh, ww, cc = x.shape
            x = ad.reshape(x, (bb, hh // 2, 2, ww // 2, 2, cc))
            x = ad.transpose(x, (0, 1, 3, 2, 4, 5))
            x = ad.reshape(x, (bb, hh // 2, ww // 2, 4 * cc))
            x = ad.leaky_relu(ad.add(ad.matmul(x, w), b_), slope=0.0)
        return ad.mean(x, axis=(1, 2))

    def logits(self, images: Tensor) -> Tensor:
        """(B, 3, S, S) -> (B, K) logits."""
        return ad.add(ad.matmul(self.features(images), self.head_w), self.head_b)

    def probs(self, images: Tensor) -> np.ndarray:
        """Frozen inference: probability rows over the K quality classes."""
        with ad.no_grad():
            return ad.softmax(self.logits(images), axis=-1).data


def _conv1_kernels(gain: float, dtype):
    """8 units: {h+, h-, v+, v-} pixel differences at thresholds 0.02, 0.15."""
    w = np.zeros((2, 2, 3, 8), dtype=dtype)
    b = np.zeros(8, dtype=dtype)
    u = 0
    for th in (0.02, 0.15):
        for kind in range(4):
            for c in range(3):
                if kind == 0:
                    w[0, 0, c, u], w[0, 1, c, u] = gain, -gain
                elif kind == 1:
                    w[0, 0, c, u], w[0, 1, c, u] = -gain, gain
                elif kind == 2:
                    w[0, 0, c, u], w[1, 0, c, u] = gain, -gain
                else:
                    w[0, 0, c, u], w[1, 0, c, u] = -gain, gain
            b[u] = -th * gain
            u += 1
    return w.reshape(12, 8), b


def _conv2_kernels(dtype):
    """16 units: 8 pass-through means, 4 plateau detectors over the
    low-threshold diffs, 4 edge-tail detectors over the high-threshold ones."""
    w = np.zeros((4, 8, 16), dtype=dtype)
    b = np.zeros(16, dtype=dtype)
    for j in range(8):
        w[:, j, j] = 0.25
    for k, th in enumerate((0.05, 0.15, 0.4, 0.8)):
        w[:, 0:4, 8 + k] = -0.25
        b[8 + k] = th
    for k, th in enumerate((0.0, 0.2, 0.5, 1.0)):
        w[:, 4:8, 12 + k] = 0.25
        b[12 + k] = -th
    return w.reshape(32, 16), b


def _conv3_kernels(dtype):
    """32 units: 16 pass-through plus 16 re-thresholded doubled copies."""
    w = np.zeros((4, 16, 32), dtype=dtype)
    b = np.zeros(32, dtype=dtype)
    for j in range(16):
        w[:, j, j] = 0.25
        w[:, j, 16 + j] = 0.5
        b[16 + j] = -0.05
    return w.reshape(64, 32), b


def init_quality_classifier(side: int, n_classes: int, rng=None,
                            dtype=np.float64) -> QualityClassifier:
    """Structured deterministic conv stack; zero head (fit by training)."""
    if side % 8:
        raise ValueError(f"quality classifier needs side divisible by 8, got {side}")
    del rng  # parameters are deterministic by design
    kernels = (_conv1_kernels(QualityClassifier.EDGE_GAIN, dtype),
               _conv2_kernels(dtype), _conv3_kernels(dtype))
    return QualityClassifier(
        conv_w=[ad.param(w) for w, _ in kernels],
        conv_b=[ad.param(b) for _, b in kernels],
        head_w=ad.param(np.zeros((QualityClassifier.CHANNELS[-1], n_classes),
                                 dtype=dtype)),
        head_b=ad.param(np.zeros(n_classes, dtype=dtype)),
        side=side,
        n_classes=n_classes,
    )


def quality_scalar(probs: np.ndarray) -> np.ndarray:
    """Expected compression severity in [0, 1]: sum_k k*p_k / (K-1)."""
    probs = np.asarray(probs)
    k = probs.shape[-1]
    weights = np.arange(k, dtype=probs.dtype)
    return probs @ weights / (k - 1)


# --- large-margin cosine head -------------------------------------------------


@dataclass
class LMCHead:
    """Projection to 511 dims plus class weights over the 512-vector."""

    proj_w: Tensor   # (511, D)
    proj_b: Tensor   # (511,)
    weights: Tensor  # (n_classes, 512), normalized per row inside the loss
    s: float = DEFAULT_S
    m: float = DEFAULT_M

    def named(self, prefix: str = "lmc."):
        yield f"{prefix}proj_w", self.proj_w
        yield f"{prefix}proj_b", self.proj_b
        yield f"{prefix}weights", self.weights


def init_lmc_head(dim: int, rng: np.random.Generator, dtype=np.float64,
                  s: float = DEFAULT_S, m: float = DEFAULT_M) -> LMCHead:
    if not s > 0:
        raise ValueError("LMC scale s must be positive")
    if not 0 <= m < 1:
        raise ValueError("LMC margin m must be in [0, 1)")
    return LMCHead(
        proj_w=ad.param(trunc_normal(rng, (LMC_DIM - 1, dim), dtype=dtype)),
        proj_b=ad.param(np.zeros(LMC_DIM - 1, dtype=dtype)),
        weights=ad.param(trunc_normal(rng, (2, LMC_DIM), dtype=dtype)),
        s=s,
        m=m,
    )


def build_quality_embedding(whole_embedding: Tensor, q, head: LMCHead) -> Tensor:
    """e* = concat(projection(embedding), quality scalar): (B, 512).

    ``q`` is a length-B vector from the frozen classifier (plain array; no
    gradient flows into it).
    """
    proj = ad.add(ad.matmul(whole_embedding, ad.transpose(head.proj_w, (1, 0))),
                  head.proj_b)
    b = whole_embedding.shape[0]
    qcol = Tensor(np.asarray(q, dtype=whole_embedding.dtype).reshape(b, 1))
    return ad.concat([proj, qcol], axis=1)


def lmc_loss(e_star: Tensor, labels, head: LMCHead) -> Tensor:
    """Quality-conditioned large-margin cosine loss, summed over the batch."""
    labels = np.asarray(labels, dtype=np.int64)
    if e_star.shape[0] == 0:
        raise ValueError("lmc_loss: empty batch")
    if (np.linalg.norm(e_star.data, axis=-1) == 0).any():
        raise ValueError("lmc_loss: zero-norm embedding, normalization undefined")
    if (np.linalg.norm(head.weights.data, axis=-1) == 0).any():
        raise ValueError("lmc_loss: zero-norm weight row, normalization undefined")
    e = ad.l2_normalize(e_star, axis=-1)
    w = ad.l2_normalize(head.weights, axis=-1)
    cos = ad.matmul(e, ad.transpose(w, (1, 0)))  # (B, n_classes)
    margin = one_hot(labels, cos.shape[-1], dtype=cos.dtype) * (-head.m)
    z = ad.scale(ad.add(cos, Tensor(margin)), head.s)
    loss, _ = ce_sum_from_logits(z, labels)
    return loss


# --- classifier training -------------------------------------------------------


@dataclass
class QualityTrainResult:
    classifier: QualityClassifier
    holdout_accuracy: float
    epochs_run: int


ITERS_PER_EPOCH = 200  # full-batch GD iterations on pooled features


def train_quality_classifier(samples, epochs: int = 20, side: int = 64,
                             seed: int = 0, lr: float = 0.5,
                             holdout_frac: float = 0.2,
                             dtype=np.float32) -> QualityTrainResult:
    """Fit the quality scorer's head on whole-face crops.

    Pooled conv features are extracted once; the K-way head is plain
    multinomial logistic regression (full-batch GD, feature standardization
    folded back into the linear weights afterwards). Samples must carry at
    least 2 distinct quality labels; a seeded holdout reports accuracy.
    """
    from .data import load_whole_faces  # local import, data depends on preprocess only
    from .losses import one_hot

    qualities = sorted({s.quality for s in samples})
    if len(qualities) < 2:
        raise ValueError(
            f"train_quality_classifier: need >= 2 quality classes, got {qualities}")
    n_classes = max(qualities) + 1

    images, labels = load_whole_faces(samples, side, dtype=dtype)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(samples))
    n_hold = max(1, int(round(holdout_frac * len(samples))))
    hold_idx, train_idx = perm[:n_hold], perm[n_hold:]

    clf = init_quality_classifier(side, n_classes, dtype=dtype)
    with ad.no_grad():
        feats = clf.features(Tensor(images)).data.astype(np.float64)

    mu = feats[train_idx].mean(axis=0)
    sd = feats[train_idx].std(axis=0) + 1e-6
    fz = (feats[train_idx] - mu) / sd
    y = one_hot(labels[train_idx], n_classes)
    w = np.zeros((feats.shape[1], n_classes))
    b = np.zeros(n_classes)
    for _ in range(epochs * ITERS_PER_EPOCH):
        z = fz @ w + b
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        w -= lr * fz.T @ (p - y) / len(fz)
        b -= lr * (p - y).mean(axis=0)

    # fold standardization into the stored affine head
    clf.head_w.data = (w / sd[:, None]).astype(dtype)
    clf.head_b.data = (b - (mu / sd) @ w).astype(dtype)

    with ad.no_grad():
        pred = clf.logits(Tensor(images[hold_idx])).data.argmax(axis=-1)
    acc = float((pred == labels[hold_idx]).mean())
    return QualityTrainResult(classifier=clf, holdout_accuracy=acc, epochs_run=epochs)
