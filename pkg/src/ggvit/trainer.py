"""SGD training loop, checkpointing, evaluation, and the cross-quality
accuracy matrix.

Training is fully deterministic given the seed: parameter init, per-epoch
shuffles, and update order are all derived from it. The best checkpoint by
validation accuracy at matched quality is retained. Evaluation of a frozen
checkpoint can fan out over threads (GGVIT_THREADS); results merge in
sample-index order so the fan-out never changes a number.
"""

from __future__ import annotations

import csv
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Batch, Sample, batch_iter
from .fusion import stream_proportions
from .model import (ForwardOut, GGViTParams, ModelConfig, ggvit_forward, ggvit_loss,
                    init_ggvit_params, make_config)
from .quality import QualityClassifier, QualityTrainResult
from .serialize import load_checkpoint, save_checkpoint

DTYPES = {"f32": np.float32, "f64": np.float64}


@dataclass(frozen=True)
class TrainConfig:
    preset: str = "tiny"
    epochs: int = 20
    batch_size: int = 8
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    lam: float = 0.1
    seed: int = 0
    dtype: str = "f32"
    guidance: bool = True
    guidance_gain: float = 0.1
    iqb: bool = True
    fab: bool = True
    s: float = 30.0
    m: float = 0.35
    n_quality: int = 3
    eval_batch: int = 64
    # stop once both accuracy targets are met (None trains all epochs)
    stop_train_acc: float | None = None
    stop_val_acc: float | None = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {sorted(DTYPES)}")

    def model_config(self) -> ModelConfig:
        return make_config(self.preset, s=self.s, m=self.m, lam=self.lam,
                           n_quality=self.n_quality, guidance=self.guidance,
                           guidance_gain=self.guidance_gain,
                           iqb=self.iqb, fab=self.fab)


class SGD:
    """Momentum SGD: v = mu*v + (g + wd*w); w -= lr*v."""

    def __init__(self, params: dict[str, Tensor], lr: float, momentum: float = 0.9,
                 weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: dict[Tensor, Tensor]) -> None:
        for k, p in self.params.items():
            g = grads[p].data
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v = self.velocity[k]
            v *= self.momentum
            v += g
            p.data -= self.lr * v


@dataclass
class EpochStats:
    epoch: int
    train_acc: float   # running accuracy over the epoch's training batches
    val_acc: float     # full evaluation of the validation split
    mean_loss: float
    seconds: float


@dataclass
class TrainResult:
    params: GGViTParams            # best-validation parameters
    model_cfg: ModelConfig
    train_cfg: TrainConfig
    log: list[dict]
    epochs: list[EpochStats]
    best_val_acc: float
    best_epoch: int

    def epoch_summary(self) -> list[dict]:
        return [asdict(e) for e in self.epochs]


def params_to_arrays(params: GGViTParams) -> dict[str, np.ndarray]:
    return {name: t.data for name, t in params.named()}


def params_from_arrays(cfg: ModelConfig, arrays: dict[str, np.ndarray],
                       dtype=np.float64) -> GGViTParams:
    params = init_ggvit_params(cfg, np.random.default_rng(0), dtype=dtype)
    for name, t in params.named():
        if name not in arrays:
            raise ValueError(f"checkpoint missing tensor '{name}'")
        arr = arrays[name].astype(dtype)
        if arr.shape != t.data.shape:
            raise ValueError(
                f"checkpoint tensor '{name}' has shape {arr.shape}, expected {t.data.shape}")
        t.data = arr
    return params


def save_detector(path: str | Path, params: GGViTParams, model_cfg: ModelConfig,
                  train_cfg: TrainConfig | None = None, extra: dict | None = None) -> None:
    meta = {"kind": "ggvit", "model": model_cfg.as_dict()}
    if train_cfg is not None:
        meta["train"] = asdict(train_cfg)
    if extra:
        meta["extra"] = extra
    save_checkpoint(path, params_to_arrays(params), meta=meta)


def load_detector(path: str | Path, dtype=np.float64) -> tuple[GGViTParams, ModelConfig, dict]:
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "ggvit":
        raise ValueError(f"{path}: not a detector checkpoint (kind={meta.get('kind')!r})")
    cfg = ModelConfig.from_dict(meta["model"])
    return params_from_arrays(cfg, arrays, dtype=dtype), cfg, meta


def save_quality(path: str | Path, result: QualityTrainResult) -> None:
    clf = result.classifier
    meta = {"kind": "quality", "side": clf.side, "n_classes": clf.n_classes,
            "holdout_accuracy": result.holdout_accuracy}
    save_checkpoint(path, {k: t.data for k, t in clf.named()}, meta=meta)


def load_quality(path: str | Path, dtype=np.float32) -> QualityClassifier:
    from .quality import init_quality_classifier
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "quality":
        raise ValueError(f"{path}: not a quality-classifier checkpoint")
    clf = init_quality_classifier(meta["side"], meta["n_classes"],
                                  np.random.default_rng(0), dtype=dtype)
    for name, t in clf.named():
        t.data = arrays[name].astype(dtype)
    return clf


def _forward_batch(params: GGViTParams, cfg: ModelConfig, batch: Batch,
                   dtype) -> ForwardOut:
    streams = [Tensor(batch.streams[k].astype(dtype, copy=False)) for k in range(5)]
    return ggvit_forward(params, cfg, streams)


@dataclass
class EvalResult:
    accuracy: float                 # percent
    predictions: np.ndarray         # (N,) argmax classes
    labels: np.ndarray              # (N,)
    fusion: np.ndarray | None       # (N, 10) when the fusion block is on

    def correct(self) -> int:
        return int((self.predictions == self.labels).sum())


def evaluate(params: GGViTParams, cfg: ModelConfig, samples: list[Sample],
             side: int | None = None, batch_size: int = 64, workers: int | None = None,
             cache: dict | None = None, dtype=np.float32) -> EvalResult:
    """Frozen-parameter accuracy over ``samples`` plus per-sample outputs."""
    side = side or cfg.vit.side
    if workers is None:
        workers = max(1, int(os.environ.get("GGVIT_THREADS", "1")))
    batches = list(batch_iter(samples, batch_size, seed=0, shuffle=False,
                              side=side, cache=cache, dtype=dtype))

    def run(batch: Batch):
        with ad.no_grad():
            out = _forward_batch(params, cfg, batch, dtype)
        fus = out.fusion.data if out.fusion is not None else None
        return batch.indices, out.decisions(), fus

    if workers > 1 and len(batches) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, batches))
    else:
        results = [run(b) for b in batches]

    n = len(samples)
    preds = np.zeros(n, dtype=np.int64)
    labels = np.array([s.label for s in samples], dtype=np.int64)
    fusion = np.zeros((n, 10), dtype=np.float64) if cfg.fab else None
    for idx, dec, fus in results:
        preds[idx] = dec
        if fusion is not None:
            fusion[idx] = fus
    acc = 100.0 * float((preds == labels).mean()) if n else 0.0
    return EvalResult(accuracy=acc, predictions=preds, labels=labels, fusion=fusion)


def train(cfg: TrainConfig, train_samples: list[Sample], val_samples: list[Sample],
          quality_clf: QualityClassifier | None = None, out_dir: str | Path | None = None,
          side: int | None = None, verbose: bool = False) -> TrainResult:
    """Run the full training loop; returns the best-validation parameters."""
    model_cfg = cfg.model_config()
    dtype = DTYPES[cfg.dtype]
    side = side or model_cfg.vit.side
    if model_cfg.iqb and quality_clf is None:
        raise ValueError("train: iqb enabled but quality_clf missing "
                         "(train it first, or pass iqb=False)")

    params = init_ggvit_params(model_cfg, np.random.default_rng([cfg.seed, 0]), dtype=dtype)
    trainable = params.trainable(model_cfg)
    opt = SGD(trainable, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)

    cache: dict = {}
    log: list[dict] = []
    epochs: list[EpochStats] = []
    best_val, best_epoch, best_arrays = -1.0, -1, None
    step = 0

    for epoch in range(cfg.epochs):
        t0 = time.time()
        losses_seen = []
        seen = correct = 0
        for batch in batch_iter(train_samples, cfg.batch_size, seed=int(
                np.random.default_rng([cfg.seed, 1, epoch]).integers(2 ** 31)),
                shuffle=True, side=side, cache=cache, dtype=dtype):
            streams = [Tensor(batch.streams[k]) for k in range(5)]
            try:
                total, breakdown, out = ggvit_loss(params, model_cfg, streams,
                                                   batch.labels, quality_clf)
            except ad.NonFiniteError as e:
                raise RuntimeError(
                    f"non-finite loss at step {step} (epoch {epoch}): {e}") from e
            loss = ad.scale(total, 1.0 / len(batch.labels))
            grads = ad.backward(loss, leaves=trainable.values())
            opt.step(grads)
            entry = {"step": step, **breakdown.as_dict()}
            log.append(entry)
            losses_seen.append(breakdown.total / len(batch.labels))
            correct += int((out.decisions() == batch.labels).sum())
            seen += len(batch.labels)
            step += 1

        train_acc = 100.0 * correct / max(seen, 1)
        val_acc = evaluate(params, model_cfg, val_samples, side=side,
                           batch_size=cfg.eval_batch, cache=cache, dtype=dtype).accuracy
        stats = EpochStats(epoch=epoch, train_acc=train_acc, val_acc=val_acc,
                           mean_loss=float(np.mean(losses_seen)) if losses_seen else 0.0,
                           seconds=time.time() - t0)
        epochs.append(stats)
        if verbose:
            print(f"epoch {epoch}: train {train_acc:.2f}% val {val_acc:.2f}% "
                  f"loss {stats.mean_loss:.4f} ({stats.seconds:.1f}s)", flush=True)
        if val_acc > best_val:
            best_val, best_epoch = val_acc, epoch
            best_arrays = {k: v.copy() for k, v in params_to_arrays(params).items()}
        if (cfg.stop_train_acc is not None and cfg.stop_val_acc is not None
                and train_acc >= cfg.stop_train_acc and val_acc >= cfg.stop_val_acc):
            break

    best_params = params_from_arrays(model_cfg, best_arrays, dtype=dtype)
    result = TrainResult(params=best_params, model_cfg=model_cfg, train_cfg=cfg,
                         log=log, epochs=epochs, best_val_acc=best_val,
                         best_epoch=best_epoch)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_detector(out_dir / "best.ggck", best_params, model_cfg, cfg,
                      extra={"best_val_acc": best_val, "best_epoch": best_epoch})
        with open(out_dir / "train_log.jsonl", "w", encoding="utf-8") as f:
            for entry in log:
                f.write(json.dumps(entry, sort_keys=True) + "\n")
        (out_dir / "epochs.json").write_text(
            json.dumps(result.epoch_summary(), indent=2, sort_keys=True), encoding="utf-8")
    return result


# --- cross-quality evaluation matrix -------------------------------------------


@dataclass
class EvalMatrix:
    """accuracy[train_quality][test_quality], percentages."""

    qualities: list[int]
    accuracy: np.ndarray  # (K, K)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["train\\test"] + [f"q{q}" for q in self.qualities])
            for i, q in enumerate(self.qualities):
                writer.writerow([f"q{q}"] + [f"{v:.2f}" for v in self.accuracy[i]])

    def to_json(self, path: str | Path) -> None:
        obj = {f"q{qi}/q{qj}": round(float(self.accuracy[i][j]), 4)
               for i, qi in enumerate(self.qualities)
               for j, qj in enumerate(self.qualities)}
        Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True), encoding="utf-8")


def eval_matrix(checkpoints: dict[int, tuple[GGViTParams, ModelConfig]],
                test_sets: dict[int, list[Sample]], batch_size: int = 64,
                dtype=np.float32) -> EvalMatrix:
    """Fill the full train-quality x test-quality accuracy grid."""
    qualities = sorted(test_sets)
    for q in qualities:
        if q not in checkpoints:
            raise ValueError(f"eval_matrix: missing checkpoint for train quality q{q}")
    acc = np.zeros((len(qualities), len(qualities)))
    for i, qi in enumerate(qualities):
        params, cfg = checkpoints[qi]
        cache: dict = {}
        for j, qj in enumerate(qualities):
            acc[i, j] = evaluate(params, cfg, test_sets[qj], batch_size=batch_size,
                                 cache=cache, dtype=dtype).accuracy
    return EvalMatrix(qualities=qualities, accuracy=acc)


PROPORTIONS_HEADER_NOTE = (
    "# share = mean over samples of |slot| magnitude share per stream "
    "(slots 2k, 2k+1 of the fusion tensor)")


def proportions_csv(path: str | Path, rows: dict[str, np.ndarray]) -> None:
    """Write stream-share percentages, one row per train/test pair."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        f.write(PROPORTIONS_HEADER_NOTE + "\n")
        writer = csv.writer(f)
        writer.writerow(["train_test", "X0", "X1", "X2", "X3", "X4"])
        for name, shares in rows.items():
            writer.writerow([name] + [f"{v:.2f}" for v in shares])


def proportions_from_eval(result: EvalResult) -> np.ndarray:
    if result.fusion is None:
        raise ValueError("proportions need a fusion-enabled evaluation")
    return stream_proportions(result.fusion)
