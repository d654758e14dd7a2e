"""Command-line entry point.

Subcommands: synth, preprocess, train-quality, train, eval, matrix,
proportions, gradcheck, report. Every subcommand accepts --config FILE
(flat key=value lines, '#' comments); explicit flags override file values.
Outputs land in a run directory together with the resolved configuration
echoed as JSON and content hashes of the inputs. GGVIT_THREADS caps
evaluation workers.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import report as report_mod
from . import trainer as trainer_mod
from .autodiff import NonFiniteError
from .fusion import stream_proportions
from .quality import train_quality_classifier
from .selfcheck import format_reports, run_gradcheck
from .serialize import save_checkpoint, write_ggt1, read_ggt1


def parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def read_config_file(path: str | Path) -> dict[str, str]:
    """Flat key=value lines; blank lines and '#' comments are skipped."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def apply_config_file(argv: list[str]) -> list[str]:
    """Expand a --config file into leading flags so explicit flags win."""
    if "--config" not in argv:
        return argv
    i = argv.index("--config")
    if i + 1 >= len(argv):
        raise ValueError("--config needs a file path")
    entries = read_config_file(argv[i + 1])
    rest = argv[:i] + argv[i + 2:]
    expanded: list[str] = []
    for key, value in entries.items():
        expanded += [f"--{key.replace('_', '-')}", value]
    return [rest[0], *expanded, *rest[1:]] if rest else expanded


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_run_meta(out_dir: Path, args: argparse.Namespace, inputs: list[Path]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    resolved = {k: (str(v) if isinstance(v, Path) else v)
                for k, v in vars(args).items() if k != "func"}
    resolved["inputs_sha256"] = {str(p): sha256_file(p) for p in inputs if p.exists()}
    (out_dir / "config.json").write_text(
        json.dumps(resolved, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _split_samples(samples, split: str | None, quality: int | None):
    out = samples
    if split:
        out = [s for s in out if s.split == split]
    if quality is not None:
        out = [s for s in out if s.quality == quality]
    return out


# --- subcommand implementations ------------------------------------------------


def cmd_synth(args) -> int:
    cfg = data_mod.SynthConfig(
        n_train=args.n_train, n_val=args.n_val, n_test=args.n_test,
        side=args.side, seed=args.seed)
    out_dir = Path(args.out)
    samples = data_mod.synth_generate(cfg, out_dir)
    write_run_meta(out_dir, args, [])
    counts = data_mod.manifest_counts(samples)
    print(f"wrote {len(samples)} images under {out_dir}")
    for key in sorted(counts):
        print(f"  split={key[0]} label={key[1]} quality={key[2]}: {counts[key]}")
    return 0


def cmd_preprocess(args) -> int:
    samples = data_mod.load_manifest(args.manifest)
    samples = _split_samples(samples, args.split, args.quality)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        stack = data_mod.sample_streams(s, args.side, dtype=np.float32)
        tensors = {f"X{k}": stack[k] for k in range(5)}
        meta = {"kind": "streamset", "label": s.label, "quality": s.quality,
                "source": str(s.path)}
        save_checkpoint(out_dir / f"sample_{i:05d}.ggck", tensors, meta=meta)
    write_run_meta(out_dir, args, [Path(args.manifest)])
    print(f"wrote {len(samples)} stream sets to {out_dir}")
    return 0


def cmd_train_quality(args) -> int:
    samples = data_mod.load_manifest(args.manifest)
    train = [s for s in samples if s.split == "train"]
    result = train_quality_classifier(train, epochs=args.epochs, side=args.side,
                                      seed=args.seed, lr=args.lr)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    trainer_mod.save_quality(out, result)
    print(f"quality classifier: holdout accuracy {result.holdout_accuracy * 100:.2f}% "
          f"-> {out}")
    return 0


def cmd_train(args) -> int:
    samples = data_mod.load_manifest(args.manifest)
    train_set = _split_samples(samples, "train", args.train_quality)
    val_set = _split_samples(samples, "val", args.train_quality)
    if not train_set:
        raise ValueError("train: empty training set after filtering")
    cfg = trainer_mod.TrainConfig(
        preset=args.preset, epochs=args.epochs, batch_size=args.batch_size,
        lr=args.lr, momentum=args.momentum, weight_decay=args.weight_decay,
        lam=args.lam, seed=args.seed, dtype=args.dtype, guidance=args.guidance,
        guidance_gain=args.guidance_gain, iqb=args.iqb, fab=args.fab,
        s=args.s, m=args.m)
    quality_clf = None
    inputs = [Path(args.manifest)]
    if cfg.iqb:
        if not args.quality_ckpt:
            raise ValueError("train: --quality-ckpt required when iqb=true")
        quality_clf = trainer_mod.load_quality(args.quality_ckpt,
                                               dtype=trainer_mod.DTYPES[cfg.dtype])
        inputs.append(Path(args.quality_ckpt))
    out_dir = Path(args.out)
    write_run_meta(out_dir, args, inputs)
    result = trainer_mod.train(cfg, train_set, val_set, quality_clf=quality_clf,
                               out_dir=out_dir, verbose=not args.quiet)
    print(f"best val accuracy {result.best_val_acc:.2f}% at epoch "
          f"{result.best_epoch} -> {out_dir / 'best.ggck'}")
    return 0


def cmd_eval(args) -> int:
    params, cfg, _ = trainer_mod.load_detector(
        args.ckpt, dtype=trainer_mod.DTYPES[args.dtype])
    if args.preset and args.preset != cfg.preset:
        raise ValueError(f"eval: checkpoint preset '{cfg.preset}' does not match "
                         f"requested '{args.preset}'")
    samples = data_mod.load_manifest(args.manifest)
    subset = _split_samples(samples, args.split, args.quality)
    if not subset:
        raise ValueError("eval: no samples after filtering")
    result = trainer_mod.evaluate(params, cfg, subset,
                                  dtype=trainer_mod.DTYPES[args.dtype])
    print(f"accuracy: {result.accuracy:.2f}% over {len(subset)} samples")
    if args.out:
        out_dir = Path(args.out)
        write_run_meta(out_dir, args, [Path(args.manifest), Path(args.ckpt)])
        (out_dir / "accuracy.json").write_text(json.dumps(
            {"accuracy": result.accuracy, "n": len(subset)}, indent=2) + "\n",
            encoding="utf-8")
        with open(out_dir / "predictions.jsonl", "w", encoding="utf-8") as f:
            for s, p in zip(subset, result.predictions):
                f.write(json.dumps({"path": str(s.path), "label": s.label,
                                    "pred": int(p)}) + "\n")
        if result.fusion is not None:
            write_ggt1(out_dir / "fusion.ggt", result.fusion)
    return 0


def cmd_matrix(args) -> int:
    ckpt_paths = [Path(p) for p in args.ckpts.split(",")]
    qualities = [int(q.lstrip("q")) for q in args.qualities.split(",")]
    if len(ckpt_paths) != len(qualities):
        raise ValueError("matrix: --ckpts and --qualities must have equal length")
    dtype = trainer_mod.DTYPES[args.dtype]
    checkpoints = {}
    for q, p in zip(qualities, ckpt_paths):
        params, cfg, _ = trainer_mod.load_detector(p, dtype=dtype)
        checkpoints[q] = (params, cfg)
    samples = data_mod.load_manifest(args.manifest)
    test_sets = {q: _split_samples(samples, args.split, q) for q in qualities}
    for q, subset in test_sets.items():
        if not subset:
            raise ValueError(f"matrix: empty test set for quality q{q}")
    matrix = trainer_mod.eval_matrix(checkpoints, test_sets, dtype=dtype)
    out_dir = Path(args.out)
    write_run_meta(out_dir, args, [Path(args.manifest), *ckpt_paths])
    matrix.to_csv(out_dir / "matrix.csv")
    matrix.to_json(out_dir / "matrix.json")
    print(report_mod.matrix_table(matrix.qualities, matrix.accuracy))
    return 0


def cmd_proportions(args) -> int:
    names = args.names.split(",") if args.names else None
    paths = [Path(p) for p in args.fusion.split(",")]
    if names and len(names) != len(paths):
        raise ValueError("proportions: --names must match --fusion count")
    rows = {}
    for i, p in enumerate(paths):
        fus = read_ggt1(p)
        rows[names[i] if names else p.stem] = stream_proportions(fus)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    trainer_mod.proportions_csv(out, rows)
    print(report_mod.proportions_table(rows))
    return 0


def cmd_gradcheck(args) -> int:
    reports = run_gradcheck(preset=args.preset, seed=args.seed, step=args.step,
                            tol=args.tol, tensors_per_loss=args.tensors_per_loss,
                            coords_per_param=args.coords_per_param)
    for line in format_reports(reports):
        print(line)
    return 0 if all(r.passed for r in reports.values()) else 1


def cmd_report(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    wrote_any = False
    if args.matrix:
        obj = json.loads(Path(args.matrix).read_text(encoding="utf-8"))
        qualities = sorted({int(k.split("/")[0][1:]) for k in obj})
        acc = np.zeros((len(qualities), len(qualities)))
        for i, qi in enumerate(qualities):
            for j, qj in enumerate(qualities):
                acc[i, j] = obj[f"q{qi}/q{qj}"]
        table = report_mod.matrix_table(qualities, acc)
        (out_dir / "matrix.txt").write_text(table + "\n", encoding="utf-8")
        report_mod.svg_heatmap(out_dir / "matrix.svg", qualities, acc)
        print(table)
        wrote_any = True
    if args.proportions:
        rows = {}
        with open(args.proportions, encoding="utf-8") as f:
            for line in f:
                if line.startswith("#") or line.startswith("train_test"):
                    continue
                cells = line.strip().split(",")
                if len(cells) == 6:
                    rows[cells[0]] = np.array([float(c) for c in cells[1:]])
        table = report_mod.proportions_table(rows)
        (out_dir / "proportions.txt").write_text(table + "\n", encoding="utf-8")
        print(table)
        wrote_any = True
    if not wrote_any:
        raise ValueError("report: pass --matrix and/or --proportions")
    return 0


# --- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ggvit",
        description="Multi-stream guided-ViT forgery detector toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="flat key=value config file", default=None)
        p.set_defaults(func=fn)
        return p

    p = add("synth", cmd_synth, "generate the synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-train", type=int, default=200)
    p.add_argument("--n-val", type=int, default=40)
    p.add_argument("--n-test", type=int, default=50)
    p.add_argument("--side", type=int, default=96)

    p = add("preprocess", cmd_preprocess, "emit stream sets as GGT1 tensors")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--side", type=int, default=64)
    p.add_argument("--split", default=None)
    p.add_argument("--quality", type=int, default=None)

    p = add("train-quality", cmd_train_quality, "train the frozen quality classifier")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--side", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=0.05)

    p = add("train", cmd_train, "train the detector")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--quality-ckpt", default=None)
    p.add_argument("--train-quality", type=int, default=None,
                   help="restrict train/val to one quality level")
    p.add_argument("--preset", default="tiny")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=0.0)
    p.add_argument("--lam", type=float, default=0.1)
    p.add_argument("--s", type=float, default=30.0)
    p.add_argument("--m", type=float, default=0.35)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dtype", choices=("f32", "f64"), default="f32")
    p.add_argument("--guidance", type=parse_bool, default=True)
    p.add_argument("--guidance-gain", type=float, default=0.1)
    p.add_argument("--iqb", type=parse_bool, default=True)
    p.add_argument("--fab", type=parse_bool, default=True)
    p.add_argument("--quiet", action="store_true")

    p = add("eval", cmd_eval, "evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--quality", type=int, default=None)
    p.add_argument("--preset", default=None)
    p.add_argument("--dtype", choices=("f32", "f64"), default="f32")
    p.add_argument("--out", default=None)

    p = add("matrix", cmd_matrix, "cross-quality accuracy matrix")
    p.add_argument("--ckpts", required=True, help="comma-separated checkpoints")
    p.add_argument("--qualities", "--tests", default="0,1,2",
                   help="quality levels, e.g. 0,1,2 (or q0,q1,q2)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--dtype", choices=("f32", "f64"), default="f32")
    p.add_argument("--out", required=True)

    p = add("proportions", cmd_proportions, "stream share report from fusion tensors")
    p.add_argument("--fusion", required=True, help="comma-separated fusion .ggt files")
    p.add_argument("--names", default=None, help="row names, e.g. q0/q2")
    p.add_argument("--out", required=True)

    p = add("gradcheck", cmd_gradcheck, "finite-difference gradient verification")
    p.add_argument("--preset", default="tiny")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=float, default=1e-6)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--tensors-per-loss", type=int, default=14)
    p.add_argument("--coords-per-param", type=int, default=2)

    p = add("report", cmd_report, "render matrix/proportions tables and SVG heatmap")
    p.add_argument("--matrix", default=None, help="matrix.json from the matrix command")
    p.add_argument("--proportions", default=None, help="proportions CSV")
    p.add_argument("--out", required=True)

    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        argv = apply_config_file(argv)
        args = build_parser().parse_args(argv)
        return args.func(args)
    except (ValueError, FileNotFoundError) as e:
        print(f"error (validation): {e}", file=sys.stderr)
        return 1
    except NonFiniteError as e:
        print(f"error (numeric): {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
