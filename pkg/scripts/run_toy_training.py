"""End-to-end toy run: synthesize the corpus, train the quality classifier,
train the detector at matched quality, and report accuracies.

Usage: python scripts/run_toy_training.py [--n-train 200] [--epochs 20] ...
"""

import argparse
import tempfile
import time
from pathlib import Path

from ggvit.data import SynthConfig, synth_generate
from ggvit.quality import train_quality_classifier
from ggvit.trainer import TrainConfig, evaluate, train


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n-train", type=int, default=200)
    ap.add_argument("--n-val", type=int, default=40)
    ap.add_argument("--n-test", type=int, default=50)
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--lr", type=float, default=0.01)
    ap.add_argument("--lam", type=float, default=0.1)
    ap.add_argument("--guidance", type=int, default=1)
    ap.add_argument("--guidance-gain", type=float, default=0.1)
    ap.add_argument("--stop-train", type=float, default=None)
    ap.add_argument("--stop-val", type=float, default=None)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    out = Path(args.out) if args.out else Path(tempfile.mkdtemp(prefix="ggvit_toy_"))
    t0 = time.time()
    corpus = synth_generate(SynthConfig(n_train=args.n_train, n_val=args.n_val,
                                        n_test=args.n_test, seed=args.seed), out / "data")
    train_set = [s for s in corpus if s.split == "train"]
    val_set = [s for s in corpus if s.split == "val"]
    test_set = [s for s in corpus if s.split == "test"]
    print(f"corpus: {len(train_set)}/{len(val_set)}/{len(test_set)} "
          f"({time.time()-t0:.0f}s)", flush=True)

    t0 = time.time()
    qres = train_quality_classifier(train_set, epochs=20, side=64, seed=args.seed)
    print(f"quality classifier holdout: {qres.holdout_accuracy*100:.1f}% "
          f"({time.time()-t0:.0f}s)", flush=True)

    cfg = TrainConfig(preset="tiny", epochs=args.epochs, seed=args.seed, lr=args.lr,
                      lam=args.lam, guidance=bool(args.guidance),
                      guidance_gain=args.guidance_gain,
                      stop_train_acc=args.stop_train, stop_val_acc=args.stop_val)
    t0 = time.time()
    result = train(cfg, train_set, val_set, quality_clf=qres.classifier,
                   out_dir=out / "run", verbose=True)
    mins = (time.time() - t0) / 60
    print(f"training took {mins:.1f} min; best val {result.best_val_acc:.2f}% "
          f"at epoch {result.best_epoch}", flush=True)

    final_train = evaluate(result.params, result.model_cfg, train_set)
    final_test = evaluate(result.params, result.model_cfg, test_set)
    print(f"final: train {final_train.accuracy:.2f}% test {final_test.accuracy:.2f}%")
    print(f"outputs in {out}")


if __name__ == "__main__":
    main()
