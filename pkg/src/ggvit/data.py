"""Dataset ingestion and the synthetic forgery corpus.

Real images are procedural face-like blobs (smooth background, textured
ellipse, eye spots). A forged image is its paired real image with a
localized perturbation confined to one quadrant of the face box: a smooth
color bump that survives blur plus a high-frequency ripple that does not.
Every base image is emitted at three quality levels: pristine, mild blur +
value quantization, stronger blur + coarser quantization.

Manifests are JSON Lines with keys {path, label, quality, split, box?};
extra keys (base id, patch bbox, quadrant) ride along in Sample.meta.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .pngio import read_png, write_png
from .preprocess import FaceBox, build_streams, to_float

SPLITS = ("train", "val", "test")
QUALITY_NAMES = ("q0", "q1", "q2")


@dataclass
class Sample:
    path: Path
    label: int
    quality: int
    split: str
    box: FaceBox | None = None
    meta: dict = field(default_factory=dict)


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for the generated corpus; the seed fixes every byte."""

    n_train: int = 200          # base pairs per split -> 2*3*n images
    n_val: int = 40
    n_test: int = 50
    side: int = 96
    seed: int = 0
    patch_side: tuple[int, int] = (16, 24)
    quadrant_probs: tuple[float, float, float, float] = (0.25, 0.25, 0.25, 0.25)
    blend: tuple[float, float] = (0.75, 0.95)      # splice opacity range
    target_color: tuple[float, float, float] = (1.0, 0.1, 0.9)
    ripple_amp: float = 0.25
    ripple_period: tuple[float, float] = (3.0, 4.5)
    degradations: tuple[tuple[float, int], ...] = ((1.0, 16), (2.2, 40))
    #              ^ (blur sigma, quantization step) for levels 1, 2

    def counts(self) -> dict[str, int]:
        return {"train": self.n_train, "val": self.n_val, "test": self.n_test}


# --- manifest I/O -------------------------------------------------------------

_REQUIRED_KEYS = ("path", "label", "quality", "split")


def load_manifest(path: str | Path) -> list[Sample]:
    """Parse and validate a JSON Lines manifest; image paths must exist."""
    path = Path(path)
    root = path.parent
    samples: list[Sample] = []
    missing: list[str] = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{lineno}: malformed JSON ({e.msg})") from e
            for key in _REQUIRED_KEYS:
                if key not in rec:
                    raise ValueError(f"{path}:{lineno}: missing key '{key}'")
            label = rec["label"]
            if label not in (0, 1):
                raise ValueError(f"{path}:{lineno}: field 'label' must be 0 or 1, got {label!r}")
            quality = rec["quality"]
            if not isinstance(quality, int) or not 0 <= quality <= 2:
                raise ValueError(f"{path}:{lineno}: field 'quality' must be 0, 1 or 2")
            split = rec["split"]
            if split not in SPLITS:
                raise ValueError(f"{path}:{lineno}: field 'split' must be one of {SPLITS}")
            box = None
            if rec.get("box") is not None:
                bx = rec["box"]
                if not (isinstance(bx, list) and len(bx) == 4):
                    raise ValueError(f"{path}:{lineno}: field 'box' must be [x, y, w, h]")
                box = FaceBox(*map(float, bx))
            img_path = root / rec["path"]
            if not img_path.exists():
                missing.append(str(img_path))
            meta = {k: v for k, v in rec.items() if k not in (*_REQUIRED_KEYS, "box")}
            samples.append(Sample(path=img_path, label=label, quality=quality,
                                  split=split, box=box, meta=meta))
    if missing:
        raise FileNotFoundError(
            f"{path}: {len(missing)} image file(s) missing: " + ", ".join(missing[:10]))
    return samples


def manifest_counts(samples: list[Sample]) -> dict[tuple, int]:
    counts: dict[tuple, int] = {}
    for s in samples:
        key = (s.split, s.label, s.quality)
        counts[key] = counts.get(key, 0) + 1
    return counts


# --- procedural image synthesis ------------------------------------------------


def _low_freq_noise(rng: np.random.Generator, side: int, n_waves: int,
                    freq_range: tuple[float, float], amp: float) -> np.ndarray:
    """Sum of random 2-D cosines, (side, side)."""
    yy, xx = np.mgrid[0:side, 0:side] / side
    out = np.zeros((side, side))
    for _ in range(n_waves):
        fx, fy = rng.uniform(*freq_range, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        out += rng.uniform(0.4, 1.0) * np.cos(2 * np.pi * (fx * xx + fy * yy) + phase)
    return amp * out / max(n_waves, 1)


def _render_real(rng: np.random.Generator, side: int) -> tuple[np.ndarray, FaceBox]:
    """Face-like blob on a smooth background; returns float image (H, W, 3)
    in [0, 1] plus the face bounding box."""
    img = np.zeros((side, side, 3))
    base = rng.uniform(0.25, 0.55, size=3)
    gx, gy = rng.uniform(-0.12, 0.12, size=2)
    yy, xx = np.mgrid[0:side, 0:side] / side
    for c in range(3):
        img[:, :, c] = base[c] + gx * xx + gy * yy
        img[:, :, c] += _low_freq_noise(rng, side, 3, (0.5, 2.5), 0.05)

    cx = side / 2 + rng.uniform(-6, 6)
    cy = side / 2 + rng.uniform(-6, 6)
    ax = side * rng.uniform(0.30, 0.38)
    ay = ax * rng.uniform(0.95, 1.15)
    yy_px, xx_px = np.mgrid[0:side, 0:side].astype(np.float64)
    d = ((xx_px - cx) / ax) ** 2 + ((yy_px - cy) / ay) ** 2
    mask = 1.0 / (1.0 + np.exp((d - 1.0) * 12.0))  # soft ellipse edge
    skin = np.array([rng.uniform(0.55, 0.8), rng.uniform(0.42, 0.62),
                     rng.uniform(0.34, 0.52)])
    texture = _low_freq_noise(rng, side, 4, (3.0, 7.0), 0.05)
    for c in range(3):
        img[:, :, c] = img[:, :, c] * (1 - mask) + (skin[c] + texture) * mask

    # two darker eye spots, symmetric about the face center
    for sx in (-1, 1):
        ex = cx + sx * 0.42 * ax + rng.uniform(-2, 2)
        ey = cy - 0.28 * ay + rng.uniform(-2, 2)
        er = side * rng.uniform(0.028, 0.042)
        de = ((xx_px - ex) ** 2 + (yy_px - ey) ** 2) / er ** 2
        spot = np.exp(-de)
        for c in range(3):
            img[:, :, c] -= 0.35 * spot * mask

    box = FaceBox(cx - ax, cy - ay, 2 * ax, 2 * ay)
    return np.clip(img, 0.0, 1.0), box


def _forge(rng: np.random.Generator, real: np.ndarray, box: FaceBox,
           cfg: SynthConfig) -> tuple[np.ndarray, dict]:
    """Splice a blended color patch into one quadrant of the face box.

    The patch is a smooth-windowed blend toward a fixed target color whose
    intensity carries a high-frequency ripple (destroyed by the blur levels);
    the perturbation is written only inside the recorded patch bbox.
    """
    side = real.shape[0]
    quadrant = int(rng.choice(4, p=np.asarray(cfg.quadrant_probs) / sum(cfg.quadrant_probs)))
    cx, cy = box.center
    x_rng = (box.x, cx) if quadrant % 2 == 0 else (cx, box.x + box.w)
    y_rng = (box.y, cy) if quadrant < 2 else (cy, box.y + box.h)

    p = int(rng.integers(cfg.patch_side[0], cfg.patch_side[1] + 1))
    margin = 2.0
    x_lo = max(x_rng[0] + margin, 0)
    x_hi = min(x_rng[1] - margin - p, side - p)
    y_lo = max(y_rng[0] + margin, 0)
    y_hi = min(y_rng[1] - margin - p, side - p)
    if x_hi <= x_lo or y_hi <= y_lo:  # degenerate quadrant; recenter on it
        px = int(np.clip((x_rng[0] + x_rng[1]) / 2 - p / 2, 0, side - p))
        py = int(np.clip((y_rng[0] + y_rng[1]) / 2 - p / 2, 0, side - p))
    else:
        px = int(rng.uniform(x_lo, x_hi))
        py = int(rng.uniform(y_lo, y_hi))

    yy, xx = np.mgrid[0:p, 0:p].astype(np.float64)
    r = np.sqrt((xx - (p - 1) / 2) ** 2 + (yy - (p - 1) / 2) ** 2) / (p / 2)
    window = np.clip(np.cos(np.clip(r, 0, 1) * np.pi / 2) ** 2, 0, 1)

    opacity = rng.uniform(*cfg.blend)
    period = rng.uniform(*cfg.ripple_period)
    theta = rng.uniform(0, np.pi)
    ripple = 0.5 + 0.5 * np.sin(
        2 * np.pi * (np.cos(theta) * xx + np.sin(theta) * yy) / period)
    target = np.asarray(cfg.target_color)[None, None, :] * (
        (1.0 - cfg.ripple_amp) + cfg.ripple_amp * ripple[:, :, None])

    forged = real.copy()
    region = forged[py:py + p, px:px + p, :]
    wb = (window * opacity)[:, :, None]
    forged[py:py + p, px:px + p, :] = np.clip(region * (1 - wb) + wb * target, 0.0, 1.0)
    return forged, {"patch": [px, py, px + p, py + p], "quadrant": quadrant}


def _gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable reflect-padded Gaussian blur of (H, W, C) float."""
    radius = max(1, int(np.ceil(3 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (x / sigma) ** 2)
    kernel /= kernel.sum()

    def convolve(a, axis):
        padded = np.pad(a, [(radius, radius) if i == axis else (0, 0)
                            for i in range(a.ndim)], mode="reflect")
        out = np.zeros_like(a)
        sl = [slice(None)] * a.ndim
        for i, kv in enumerate(kernel):
            sl[axis] = slice(i, i + a.shape[axis])
            out += kv * padded[tuple(sl)]
        return out

    return convolve(convolve(img, 0), 1)


def degrade(img_u8: np.ndarray, level: int, cfg: SynthConfig) -> np.ndarray:
    """Apply the quality-level degradation to an (H, W, 3) uint8 image."""
    if level == 0:
        return img_u8
    sigma, step = cfg.degradations[level - 1]
    blurred = _gaussian_blur(img_u8.astype(np.float64), sigma)
    levels = np.clip(blurred, 0, 255).astype(np.int32) // step
    return np.clip(levels * step + step // 2, 0, 255).astype(np.uint8)


def _to_u8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def synth_generate(cfg: SynthConfig, out_dir: str | Path) -> list[Sample]:
    """Render the corpus to PNG files plus a manifest.jsonl in ``out_dir``."""
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    samples: list[Sample] = []
    lines: list[str] = []

    for split_idx, split in enumerate(SPLITS):
        n = cfg.counts()[split]
        for i in range(n):
            rng = np.random.default_rng([cfg.seed, split_idx, i])
            real, box = _render_real(rng, cfg.side)
            forged, patch_meta = _forge(rng, real, box, cfg)
            real_u8, forged_u8 = _to_u8(real), _to_u8(forged)
            for label, img_u8, extra in ((0, real_u8, {}), (1, forged_u8, patch_meta)):
                for level in range(3):
                    out = degrade(img_u8, level, cfg)
                    name = f"{split}_{i:04d}_{'fake' if label else 'real'}_q{level}.png"
                    write_png(img_dir / name, out)
                    rec = {
                        "path": f"images/{name}",
                        "label": label,
                        "quality": level,
                        "split": split,
                        "box": [box.x, box.y, box.w, box.h],
                        "base": i,
                        **extra,
                    }
                    lines.append(json.dumps(rec, sort_keys=True))
                    samples.append(Sample(
                        path=img_dir / name, label=label, quality=level, split=split,
                        box=box, meta={"base": i, **extra}))
    (out_dir / "manifest.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return samples


# --- batching -------------------------------------------------------------------


@dataclass
class Batch:
    streams: np.ndarray    # (5, B, 3, S, S)
    labels: np.ndarray     # (B,) int64
    qualities: np.ndarray  # (B,) int64
    indices: np.ndarray    # (B,) positions in the sample list


def sample_streams(sample: Sample, side: int, cache: dict | None = None,
                   dtype=np.float32) -> np.ndarray:
    """Preprocess one sample into its (5, 3, S, S) stream stack."""
    key = (str(sample.path), side, np.dtype(dtype).name)
    if cache is not None and key in cache:
        return cache[key]
    img = to_float(read_png(sample.path))
    stack = build_streams(img, sample.box, side).stacked().astype(dtype)
    if cache is not None:
        cache[key] = stack
    return stack


def load_whole_faces(samples: list[Sample], side: int,
                     dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """Whole-face crops (N, 3, S, S) plus quality labels, for the quality
    classifier."""
    images = np.stack([sample_streams(s, side, dtype=dtype)[0] for s in samples])
    labels = np.array([s.quality for s in samples], dtype=np.int64)
    return images, labels


def batch_iter(samples: list[Sample], batch_size: int, seed: int,
               shuffle: bool = True, side: int = 64, cache: dict | None = None,
               dtype=np.float32):
    """Yield Batches in seeded order; the final short batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.arange(len(samples))
    if shuffle:
        order = np.random.default_rng(seed).permutation(len(samples))
    for start in range(0, len(samples), batch_size):
        idx = order[start:start + batch_size]
        stacks = [sample_streams(samples[i], side, cache, dtype) for i in idx]
        yield Batch(
            streams=np.stack(stacks, axis=1),
            labels=np.array([samples[i].label for i in idx], dtype=np.int64),
            qualities=np.array([samples[i].quality for i in idx], dtype=np.int64),
            indices=idx,
        )
