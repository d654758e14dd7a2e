"""Optimizer arithmetic, run determinism, ablation equivalences, evaluation
merging, the cross-quality matrix, and checkpoint round-trips."""

import json

import numpy as np
import pytest

from ggvit import autodiff as ad
from ggvit.autodiff import Tensor
from ggvit.model import ggvit_loss, init_ggvit_params, make_config
from ggvit.quality import init_quality_classifier, train_quality_classifier
from ggvit.serialize import ggt1_bytes
from ggvit.trainer import (SGD, EvalMatrix, TrainConfig, eval_matrix, evaluate,
                           load_detector, params_from_arrays, params_to_arrays,
                           proportions_csv, save_detector, train)


def micro_cfg(**kw):
    return TrainConfig(preset="micro", dtype="f64", epochs=kw.pop("epochs", 1),
                       batch_size=kw.pop("batch_size", 4), **kw)


def micro_quality(seed=0):
    return init_quality_classifier(16, 3, np.random.default_rng(seed), dtype=np.float64)


# --- SGD -------------------------------------------------------------------------


def test_sgd_single_step_closed_form():
    w = ad.param(np.array([1.0, -2.0, 3.0]))
    opt = SGD({"w": w}, lr=0.1, momentum=0.9)
    x = w.data.copy()
    loss = ad.sum_(ad.mul(w, w))  # grad = 2w
    grads = ad.backward(loss, leaves=[w])
    opt.step({w: grads[w]})
    assert np.abs(w.data - (x - 0.1 * 2 * x)).max() <= 1e-12


def test_sgd_momentum_accumulates():
    w = ad.param(np.array([4.0]))
    opt = SGD({"w": w}, lr=0.5, momentum=0.5)
    for _ in range(2):
        grads = ad.backward(ad.sum_(w), leaves=[w])  # grad = 1
        opt.step({w: grads[w]})
    # v1 = 1, w1 = 4 - 0.5; v2 = 0.5*1 + 1 = 1.5, w2 = 3.5 - 0.75
    assert w.data[0] == pytest.approx(2.75, abs=1e-12)


def test_sgd_weight_decay():
    w = ad.param(np.array([2.0]))
    opt = SGD({"w": w}, lr=0.1, momentum=0.0, weight_decay=0.5)
    grads = ad.backward(ad.sum_(ad.scale(w, 0.0)), leaves=[w])  # zero grad
    opt.step({w: grads[w]})
    assert w.data[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0, abs=1e-12)


# --- training determinism and ablation equivalences -------------------------------


def _train_samples(small_corpus, n=12):
    _, samples, _ = small_corpus
    return ([s for s in samples if s.split == "train"][:n],
            [s for s in samples if s.split == "val"][:6])


def test_training_deterministic_bitexact(small_corpus):
    train_set, val_set = _train_samples(small_corpus)
    clf = micro_quality()
    results, logs = [], []
    for _ in range(2):
        r = train(micro_cfg(seed=7), train_set, val_set, quality_clf=clf)
        results.append({k: ggt1_bytes(v) for k, v in params_to_arrays(r.params).items()})
        logs.append(json.dumps(r.log))
    assert results[0] == results[1]
    assert logs[0] == logs[1]

    r3 = train(micro_cfg(seed=8), train_set, val_set, quality_clf=clf)
    b3 = {k: ggt1_bytes(v) for k, v in params_to_arrays(r3.params).items()}
    assert b3 != results[0]  # a different seed must change something


def test_lambda_zero_equals_detached_lmc(small_corpus):
    train_set, val_set = _train_samples(small_corpus)
    clf = micro_quality()
    with_zero = train(micro_cfg(lam=0.0, iqb=True, seed=3), train_set, val_set,
                      quality_clf=clf)
    detached = train(micro_cfg(lam=0.0, iqb=False, seed=3), train_set, val_set)
    a = params_to_arrays(with_zero.params)
    b = params_to_arrays(detached.params)
    assert set(a) == set(b)
    for k in a:
        assert np.array_equal(a[k], b[k]), k


def test_guidance_off_equals_forced_zero_embedding():
    """Three manual steps: disabling guidance == injecting a zero signal."""
    cfg_on = make_config("micro", iqb=False, fab=True, guidance=True)
    cfg_off = make_config("micro", iqb=False, fab=True, guidance=False)
    rng = np.random.default_rng(11)
    batches = [([Tensor(rng.uniform(0, 1, size=(3, 3, 16, 16))) for _ in range(5)],
                rng.integers(0, 2, size=3)) for _ in range(3)]

    trajectories = []
    for cfg, zero in ((cfg_on, True), (cfg_off, False)):
        params = init_ggvit_params(cfg, np.random.default_rng(1))
        trainable = params.trainable(cfg)
        opt = SGD(trainable, lr=0.05, momentum=0.9)
        for streams, labels in batches:
            total, _, _ = ggvit_loss(params, cfg, streams, labels,
                                     zero_guidance=zero)
            grads = ad.backward(ad.scale(total, 1 / 3), leaves=trainable.values())
            opt.step(grads)
        trajectories.append(params_to_arrays(params))
    a, b = trajectories
    for k in a:
        assert np.array_equal(a[k], b[k]), k


def test_nonfinite_loss_aborts_with_step_info(small_corpus, monkeypatch):
    train_set, val_set = _train_samples(small_corpus, n=8)
    clf = micro_quality()

    from ggvit import trainer as trainer_mod

    def poisoned(*args, **kwargs):
        raise ad.NonFiniteError("non-finite values in output of op 'matmul'")

    monkeypatch.setattr(trainer_mod, "ggvit_loss", poisoned)
    with pytest.raises(RuntimeError, match=r"step 0 \(epoch 0\)"):
        train(micro_cfg(seed=0), train_set, val_set, quality_clf=clf)


# --- evaluation ---------------------------------------------------------------------


def test_evaluate_counts_and_thread_merge(small_corpus):
    _, samples, _ = small_corpus
    subset = [s for s in samples if s.split == "test"]
    cfg = make_config("micro")
    params = init_ggvit_params(cfg, np.random.default_rng(2))
    clf_free = evaluate(params, cfg, subset, batch_size=7, workers=1, dtype=np.float64)
    assert 0.0 <= clf_free.accuracy <= 100.0
    assert clf_free.fusion.shape == (len(subset), 10)

    threaded = evaluate(params, cfg, subset, batch_size=7, workers=3, dtype=np.float64)
    assert np.array_equal(clf_free.predictions, threaded.predictions)
    assert np.array_equal(clf_free.fusion, threaded.fusion)
    assert clf_free.accuracy == threaded.accuracy


def test_evaluate_perfect_and_coinflip_bounds(small_corpus, monkeypatch):
    _, samples, _ = small_corpus
    subset = [s for s in samples if s.split == "test"]
    labels = np.array([s.label for s in subset])

    from ggvit import trainer as trainer_mod

    class Stub:
        def __init__(self, decisions):
            self._d = decisions
            self.fusion = None

        def decisions(self):
            return self._d

    calls = {"i": 0}

    def perfect_forward(params, cfg, streams, zero_guidance=False):
        b = streams[0].shape[0]
        start = calls["i"]
        calls["i"] += b
        return Stub(labels[start:start + b])

    cfg = make_config("micro", fab=False)
    params = init_ggvit_params(cfg, np.random.default_rng(3))
    monkeypatch.setattr(trainer_mod, "ggvit_forward", perfect_forward)
    res = evaluate(params, cfg, subset, batch_size=5, workers=1, dtype=np.float64)
    assert res.accuracy == 100.0
    assert res.correct() == len(subset)


def test_eval_matrix_and_reports(small_corpus, tmp_path):
    _, samples, _ = small_corpus
    cfg = make_config("micro")
    params = init_ggvit_params(cfg, np.random.default_rng(4))
    test_sets = {q: [s for s in samples if s.split == "test" and s.quality == q]
                 for q in range(3)}
    checkpoints = {q: (params, cfg) for q in range(3)}
    matrix = eval_matrix(checkpoints, test_sets, dtype=np.float64)
    assert matrix.accuracy.shape == (3, 3)
    assert ((matrix.accuracy >= 0) & (matrix.accuracy <= 100)).all()

    again = eval_matrix(checkpoints, test_sets, dtype=np.float64)
    assert np.array_equal(matrix.accuracy, again.accuracy)

    with pytest.raises(ValueError, match="q2"):
        eval_matrix({0: (params, cfg), 1: (params, cfg)},
                    test_sets, dtype=np.float64)

    matrix.to_csv(tmp_path / "m.csv")
    matrix.to_json(tmp_path / "m.json")
    header = (tmp_path / "m.csv").read_text().splitlines()[0]
    assert header == "train\\test,q0,q1,q2"
    obj = json.loads((tmp_path / "m.json").read_text())
    assert set(obj) == {f"q{i}/q{j}" for i in range(3) for j in range(3)}


def test_proportions_csv_layout(tmp_path):
    rows = {"q0/q2": np.array([10.0, 20, 30, 25, 15])}
    path = tmp_path / "p.csv"
    proportions_csv(path, rows)
    lines = path.read_text().splitlines()
    assert lines[0].startswith("#")              # metric definition note
    assert lines[1] == "train_test,X0,X1,X2,X3,X4"
    assert lines[2].startswith("q0/q2,10.00,20.00")


# --- checkpoints ---------------------------------------------------------------------


def test_detector_checkpoint_roundtrip(tmp_path):
    cfg = make_config("micro", lam=0.25)
    params = init_ggvit_params(cfg, np.random.default_rng(5))
    path = tmp_path / "det.ggck"
    save_detector(path, params, cfg, extra={"note": 1})
    loaded, cfg2, meta = load_detector(path)
    assert cfg2 == cfg
    assert meta["extra"]["note"] == 1
    a, b = params_to_arrays(params), params_to_arrays(loaded)
    assert set(a) == set(b)
    for k in a:
        assert np.array_equal(a[k], b[k])


def test_params_from_arrays_validates(tmp_path):
    cfg = make_config("micro")
    params = init_ggvit_params(cfg, np.random.default_rng(6))
    arrays = params_to_arrays(params)
    missing = dict(arrays)
    missing.pop("fusion.head_w")
    with pytest.raises(ValueError, match="fusion.head_w"):
        params_from_arrays(cfg, missing)
    wrong = dict(arrays)
    wrong["fusion.head_w"] = np.zeros((3, 3))
    with pytest.raises(ValueError, match="shape"):
        params_from_arrays(cfg, wrong)


# --- quality classifier toy run ------------------------------------------------------


def test_quality_classifier_toy_accuracy(small_corpus):
    _, samples, _ = small_corpus
    train_set = [s for s in samples if s.split == "train"]
    result = train_quality_classifier(train_set, epochs=12, side=64, seed=0)
    assert result.holdout_accuracy >= 0.90

    single = [s for s in train_set if s.quality == 0]
    with pytest.raises(ValueError, match="quality classes"):
        train_quality_classifier(single, epochs=1, side=64)


def test_evaluate_coinflip_predictor_near_half(small_corpus, monkeypatch):
    _, samples, _ = small_corpus
    subset = [s for s in samples if s.split == "train"][:120]

    from ggvit import trainer as trainer_mod

    class Stub:
        def __init__(self, decisions):
            self._d = decisions
            self.fusion = None

        def decisions(self):
            return self._d

    flip_rng = np.random.default_rng(99)

    def coinflip_forward(params, cfg, streams, zero_guidance=False):
        return Stub(flip_rng.integers(0, 2, size=streams[0].shape[0]))

    cfg = make_config("micro", fab=False)
    params = init_ggvit_params(cfg, np.random.default_rng(3))
    monkeypatch.setattr(trainer_mod, "ggvit_forward", coinflip_forward)
    res = evaluate(params, cfg, subset, batch_size=16, workers=1, dtype=np.float64)
    # binomial: n=120, p=0.5 -> sigma ~ 4.6%; allow 4 sigma
    assert 30.0 <= res.accuracy <= 70.0
