"""Cross-quality directional experiment: train at one quality level, test at
another, comparing the guided model against the no-guidance ablation over
several seeds.

Usage: python scripts/run_cross_quality.py [--seeds 0,1,2] [--train-q 0] [--test-q 2]
"""

import argparse
import json
import tempfile
import time
from pathlib import Path


from ggvit.data import SynthConfig, synth_generate
from ggvit.quality import train_quality_classifier
from ggvit.trainer import TrainConfig, evaluate, train


def run_pair(corpus, quality_clf, seed, train_q, test_q, guidance, epochs, lr):
    train_set = [s for s in corpus if s.split == "train" and s.quality == train_q]
    val_set = [s for s in corpus if s.split == "val" and s.quality == train_q]
    test_set = [s for s in corpus if s.split == "test" and s.quality == test_q]
    cfg = TrainConfig(preset="tiny", epochs=epochs, seed=seed, lr=lr,
                      guidance=guidance, stop_train_acc=97.0, stop_val_acc=90.0)
    t0 = time.time()
    result = train(cfg, train_set, val_set, quality_clf=quality_clf)
    acc = evaluate(result.params, result.model_cfg, test_set).accuracy
    matched = evaluate(result.params, result.model_cfg,
                       [s for s in corpus if s.split == "test" and s.quality == train_q]).accuracy
    return {"seed": seed, "guidance": guidance, "epochs_run": len(result.epochs),
            "matched_acc": round(matched, 2), "cross_acc": round(acc, 2),
            "minutes": round((time.time() - t0) / 60, 1)}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--train-q", type=int, default=0)
    ap.add_argument("--test-q", type=int, default=2)
    ap.add_argument("--n-train", type=int, default=120)
    ap.add_argument("--epochs", type=int, default=16)
    ap.add_argument("--lr", type=float, default=0.01)
    ap.add_argument("--data-seed", type=int, default=0)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    root = Path(args.out) if args.out else Path(tempfile.mkdtemp(prefix="ggvit_xq_"))
    corpus = synth_generate(SynthConfig(n_train=args.n_train, n_val=30, n_test=40,
                                        seed=args.data_seed), root / "data")
    qres = train_quality_classifier(
        [s for s in corpus if s.split == "train"], epochs=20, side=64, seed=0)
    print(f"quality classifier holdout: {qres.holdout_accuracy*100:.1f}%", flush=True)

    rows = []
    for seed in [int(s) for s in args.seeds.split(",")]:
        for guidance in (True, False):
            row = run_pair(corpus, qres.classifier, seed, args.train_q, args.test_q,
                           guidance, args.epochs, args.lr)
            rows.append(row)
            print(json.dumps(row), flush=True)

    for flag in (True, False):
        vals = sorted(r["cross_acc"] for r in rows if r["guidance"] == flag)
        med = vals[len(vals) // 2]
        print(f"guidance={flag}: cross-quality accs {vals} median {med}", flush=True)


if __name__ == "__main__":
    main()
