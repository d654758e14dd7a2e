"""Synthetic corpus properties (determinism, degradation monotonicity,
perturbation confinement, balance) and manifest/batch behavior."""

import hashlib
import json

import numpy as np
import pytest

from ggvit.data import (Sample, SynthConfig, batch_iter, load_manifest,
                        manifest_counts, synth_generate)
from ggvit.pngio import read_png

CFG = SynthConfig(n_train=6, n_val=2, n_test=2, side=96, seed=11)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    samples = synth_generate(CFG, root)
    return root, samples


def _hash_dir(root):
    out = {}
    for p in sorted((root / "images").iterdir()):
        out[p.name] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


def test_generator_deterministic_bytes(tmp_path, corpus):
    root, _ = corpus
    again = tmp_path / "again"
    synth_generate(CFG, again)
    assert _hash_dir(root) == _hash_dir(again)
    assert (root / "manifest.jsonl").read_bytes() == (again / "manifest.jsonl").read_bytes()


def test_corpus_counts_and_balance(corpus):
    _, samples = corpus
    assert len(samples) == (6 + 2 + 2) * 2 * 3
    counts = manifest_counts(samples)
    for split, n in (("train", 6), ("val", 2), ("test", 2)):
        for q in range(3):
            assert counts[(split, 0, q)] == n
            assert counts[(split, 1, q)] == n  # |#real - #forged| == 0


def test_degradation_strictly_monotonic(corpus):
    root, samples = corpus
    by_key = {(s.split, s.meta["base"], s.label, s.quality): s for s in samples}
    for split in ("train", "val"):
        for base in range(2):
            for label in (0, 1):
                pristine = read_png(by_key[(split, base, label, 0)].path).astype(float)
                d1 = np.abs(read_png(by_key[(split, base, label, 1)].path) - pristine).mean()
                d2 = np.abs(read_png(by_key[(split, base, label, 2)].path) - pristine).mean()
                assert 0 < d1 < d2, (split, base, label, d1, d2)


def test_forgery_confined_to_recorded_patch(corpus):
    _, samples = corpus
    by_key = {(s.split, s.meta["base"], s.label, s.quality): s for s in samples}
    for base in range(6):
        real = read_png(by_key[("train", base, 0, 0)].path)
        fake_sample = by_key[("train", base, 1, 0)]
        fake = read_png(fake_sample.path)
        x0, y0, x1, y1 = fake_sample.meta["patch"]
        outside = np.abs(real.astype(int) - fake.astype(int))
        outside[y0:y1, x0:x1] = 0
        assert outside.max() == 0, "difference leaked outside the patch bbox"
        inside = np.abs(real[y0:y1, x0:x1].astype(int) - fake[y0:y1, x0:x1].astype(int))
        assert inside.max() > 10, "perturbation too weak to matter"


def test_patch_inside_recorded_quadrant(corpus):
    _, samples = corpus
    for s in samples:
        if s.label != 1 or s.quality != 0:
            continue
        x0, y0, x1, y1 = s.meta["patch"]
        cx, cy = s.box.center
        quadrant = s.meta["quadrant"]
        if quadrant % 2 == 0:
            assert x1 <= cx + 1e-9
        else:
            assert x0 >= cx - 1e-9
        if quadrant < 2:
            assert y1 <= cy + 1e-9
        else:
            assert y0 >= cy - 1e-9


def test_manifest_roundtrip(corpus):
    root, samples = corpus
    loaded = load_manifest(root / "manifest.jsonl")
    assert len(loaded) == len(samples)
    assert {s.path.name for s in loaded} == {s.path.name for s in samples}
    first = loaded[0]
    assert first.box is not None
    assert "base" in first.meta


def test_manifest_validation_errors(tmp_path):
    man = tmp_path / "manifest.jsonl"
    man.write_text("", encoding="utf-8")
    assert load_manifest(man) == []

    img = tmp_path / "img.png"
    from ggvit.pngio import write_png
    write_png(img, np.zeros((4, 4, 3), dtype=np.uint8))

    man.write_text(json.dumps({"path": "img.png", "label": 0, "quality": 0,
                               "split": "train"}) + "\n", encoding="utf-8")
    assert len(load_manifest(man)) == 1

    man.write_text('{"path": "img.png", "label": 2, "quality": 0, "split": "train"}\n',
                   encoding="utf-8")
    with pytest.raises(ValueError, match="label"):
        load_manifest(man)

    man.write_text('{"path": "img.png", "label": 0, "quality": 0}\n', encoding="utf-8")
    with pytest.raises(ValueError, match="split"):
        load_manifest(man)

    man.write_text("{not json}\n", encoding="utf-8")
    with pytest.raises(ValueError, match="manifest.jsonl:1"):
        load_manifest(man)

    man.write_text('{"path": "gone.png", "label": 0, "quality": 0, "split": "train"}\n',
                   encoding="utf-8")
    with pytest.raises(FileNotFoundError, match="gone.png"):
        load_manifest(man)


def test_batch_iter_sizes_order_and_determinism(corpus):
    _, samples = corpus
    train = [s for s in samples if s.split == "train"][:10]
    cache = {}
    batches = list(batch_iter(train, 8, seed=3, side=32, cache=cache))
    assert [len(b.labels) for b in batches] == [8, 2]
    assert batches[0].streams.shape == (5, 8, 3, 32, 32)

    again = list(batch_iter(train, 8, seed=3, side=32, cache=cache))
    assert np.array_equal(batches[0].indices, again[0].indices)
    assert np.array_equal(batches[0].streams, again[0].streams)

    ordered = list(batch_iter(train, 4, seed=0, shuffle=False, side=32, cache=cache))
    assert np.array_equal(np.concatenate([b.indices for b in ordered]), np.arange(10))

    with pytest.raises(ValueError):
        list(batch_iter(train, 0, seed=0, side=32))


def test_batch_labels_and_quality_match_samples(corpus):
    _, samples = corpus
    subset = [s for s in samples if s.split == "val"]
    for batch in batch_iter(subset, 5, seed=1, side=32):
        for pos, idx in enumerate(batch.indices):
            assert batch.labels[pos] == subset[idx].label
            assert batch.qualities[pos] == subset[idx].quality
