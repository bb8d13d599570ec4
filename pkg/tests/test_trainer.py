import json

import numpy as np
import pytest

from conftest import random_maps
from selfkws.calibrate import calibrate
from selfkws.labeler import PseudoSample, SampleStore
from selfkws.frontend import MfccMap
from selfkws.trainer import (
    Adam,
    PretrainConfig,
    TrainConfig,
    TrainingError,
    assemble_epoch,
    finetune,
    pretrain,
    public_profile,
    recorded_profile,
    reinitialize_after_training,
    triplet_loss,
)


# ---------------------------------------------------------------------------
# Triplet loss


def reference_triplet_loss(p1, p2, n, margin, exclude_diag=False):
    total, count = 0.0, 0
    for a in range(len(p1)):
        for k in range(len(p2)):
            if exclude_diag and a == k:
                continue
            for b in range(len(n)):
                d_ap = np.linalg.norm(p1[a] - p2[k])
                d_an = np.linalg.norm(p1[a] - n[b])
                total += max(d_ap - d_an + margin, 0.0)
                count += 1
    return total / count if count else 0.0


@pytest.mark.parametrize("exclude_diag", [False, True])
def test_triplet_loss_matches_brute_force(exclude_diag):
    rng = np.random.default_rng(0)
    for _ in range(10):
        p1 = rng.normal(size=(4, 6))
        p2 = rng.normal(size=(4 if exclude_diag else 3, 6))
        n = rng.normal(size=(5, 6))
        loss, *_ = triplet_loss(p1, p2, n, margin=0.5, exclude_diag=exclude_diag)
        ref = reference_triplet_loss(p1, p2, n, 0.5, exclude_diag)
        assert loss == pytest.approx(ref, rel=1e-12)


def test_triplet_loss_gradients_fd():
    rng = np.random.default_rng(1)
    eps = 1e-6
    for trial in range(5):
        p1 = rng.normal(size=(3, 4))
        p2 = rng.normal(size=(2, 4))
        n = rng.normal(size=(3, 4))
        loss, g_p1, g_p2, g_n = triplet_loss(p1, p2, n, margin=0.5)
        for arr, grad in ((p1, g_p1), (p2, g_p2), (n, g_n)):
            flat, gflat = arr.reshape(-1), np.asarray(grad).reshape(-1)
            for i in range(flat.size):
                old = flat[i]
                flat[i] = old + eps
                lp = triplet_loss(p1, p2, n, 0.5)[0]
                flat[i] = old - eps
                lm = triplet_loss(p1, p2, n, 0.5)[0]
                flat[i] = old
                fd = (lp - lm) / (2 * eps)
                assert abs(fd - gflat[i]) / max(abs(fd), abs(gflat[i]), 1e-6) < 1e-4


def test_triplet_loss_zero_when_separated():
    # all positives coincide, negatives far away: hinge inactive
    p = np.zeros((3, 4))
    n = np.ones((2, 4)) * 100.0
    loss, g_p1, g_p2, g_n = triplet_loss(p, p, n, margin=0.5)
    assert loss == 0.0
    assert np.all(g_p1 == 0) and np.all(g_p2 == 0) and np.all(g_n == 0)


def test_triplet_loss_all_excluded():
    p = np.zeros((1, 4))
    loss, g_p1, g_p2, g_n = triplet_loss(p, p, np.ones((2, 4)), 0.5, exclude_diag=True)
    # only diagonal pairs exist -> no triplets
    assert loss == 0.0 and np.all(g_n == 0)


# ---------------------------------------------------------------------------
# Batch assembly


def _make_store(n_pos, n_neg):
    store = SampleStore(max_pos=1000, max_neg=10000)
    rng = np.random.default_rng(0)
    for i in range(n_pos):
        store.add(PseudoSample(MfccMap(values=rng.normal(size=(47, 10)).astype(np.float32)),
                               "positive", 0.1, f"p{i}", 0.0))
    for i in range(n_neg):
        store.add(PseudoSample(MfccMap(values=rng.normal(size=(47, 10)).astype(np.float32)),
                               "negative", 0.9, f"n{i}", 0.0))
    return store


def test_batch_and_triplet_laws_public_profile():
    cfg = public_profile(rng_seed=0)
    store = _make_store(45, 500)
    user_maps = random_maps(cfg.k_user, np.random.default_rng(1))
    batches = assemble_epoch(store, user_maps, cfg, np.random.default_rng(0))
    assert len(batches) == 45 // cfg.n_b_p  # only full groups
    for b in batches:
        assert b.n_samples == cfg.n_b_p + cfg.n_b_n + cfg.k_user == 143
        assert b.n_triplets == cfg.n_b_p * cfg.k_user * cfg.n_b_n == 7200


def test_batch_laws_recorded_profile():
    cfg = recorded_profile(rng_seed=0)
    store = _make_store(25, 100)
    user_maps = random_maps(cfg.k_user, np.random.default_rng(1))
    batches = assemble_epoch(store, user_maps, cfg, np.random.default_rng(0))
    assert len(batches) == 2
    for b in batches:
        assert b.n_samples == 10 + 60 + 3
        assert b.n_triplets == 10 * 3 * 60


def test_negatives_not_reused_before_exhaustion():
    cfg = TrainConfig(n_b_p=2, n_b_n=5, k_user=1, epochs=1, rng_seed=0)
    store = _make_store(6, 15)  # 3 batches x 5 negatives == pool size
    user_maps = random_maps(1, np.random.default_rng(1))
    batches = assemble_epoch(store, user_maps, cfg, np.random.default_rng(0))
    seen = [id(m) for b in batches for m in b.neg_maps]
    assert len(seen) == 15 and len(set(seen)) == 15


def test_insufficient_positives_refuses():
    cfg = recorded_profile(rng_seed=0)  # n_b_p = 10
    store = _make_store(9, 50)
    with pytest.raises(TrainingError, match="insufficient pseudo-positives"):
        assemble_epoch(store, [], cfg, np.random.default_rng(0))
    empty_neg = _make_store(20, 0)
    with pytest.raises(TrainingError, match="no pseudo-negatives"):
        assemble_epoch(empty_neg, [], cfg, np.random.default_rng(0))


def test_train_config_validation():
    with pytest.raises(TrainingError):
        TrainConfig(n_b_p=0)
    with pytest.raises(TrainingError):
        TrainConfig(lr=0.0)
    with pytest.raises(TrainingError):
        TrainConfig(margin=-1.0)


# ---------------------------------------------------------------------------
# Adam


def test_adam_matches_reference_formula():
    lr, b1, b2, eps = 0.001, 0.9, 0.999, 1e-8
    opt = Adam(3, lr)
    w = np.array([1.0, -2.0, 0.5], dtype=np.float32)
    m = np.zeros(3)
    v = np.zeros(3)
    rng = np.random.default_rng(0)
    for t in range(1, 6):
        g = rng.normal(size=3)
        w_got = opt.step(w, g)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g**2
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        w_ref = w - lr * m_hat / (np.sqrt(v_hat) + eps)
        assert np.allclose(w_got, w_ref.astype(np.float32), atol=1e-7)
        w = w_got


def test_adam_first_step_size_is_lr():
    opt = Adam(1, lr=0.01)
    w = np.array([0.0], dtype=np.float32)
    w2 = opt.step(w, np.array([123.0]))
    # bias-corrected first step has magnitude ~lr regardless of grad scale
    assert abs(w2[0]) == pytest.approx(0.01, rel=1e-4)


# ---------------------------------------------------------------------------
# Fine-tuning


@pytest.fixture(scope="module")
def filled_store(trained_enc, speaker, window):
    cfg = calibrate(trained_enc, speaker.user_enroll, speaker.user_neg, 0.6, 0.9, window)
    from selfkws.labeler import run_stream

    store = SampleStore()
    run_stream(speaker.adaptation, trained_enc, cfg, store)
    return store


def test_finetune_epochs_zero_is_identity(trained_enc, filled_store, speaker):
    cfg = recorded_profile(rng_seed=0, epochs=0)
    out = finetune(trained_enc, filled_store, speaker.user_enroll, cfg)
    assert out is not trained_enc
    assert np.array_equal(out.weights, trained_enc.weights)


def test_finetune_deterministic_and_logged(tmp_path, trained_enc, filled_store, speaker):
    cfg = TrainConfig(n_b_p=3, n_b_n=8, k_user=3, epochs=3, margin=2.0, rng_seed=4)
    a = finetune(trained_enc, filled_store, speaker.user_enroll, cfg, log_path=tmp_path / "a.jsonl")
    b = finetune(trained_enc, filled_store, speaker.user_enroll, cfg)
    assert np.array_equal(a.weights, b.weights)
    assert not np.array_equal(a.weights, trained_enc.weights)
    records = [json.loads(line) for line in (tmp_path / "a.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in records] == [0, 1, 2]
    assert all(np.isfinite(r["mean_loss"]) for r in records)


def test_finetune_reduces_loss(tmp_path, trained_enc, filled_store, speaker):
    cfg = TrainConfig(n_b_p=3, n_b_n=8, k_user=3, epochs=10, margin=2.0, rng_seed=0)
    finetune(trained_enc, filled_store, speaker.user_enroll, cfg, log_path=tmp_path / "log.jsonl")
    records = [json.loads(line) for line in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert records[0]["mean_loss"] > 0
    assert records[-1]["mean_loss"] < records[0]["mean_loss"]


def test_finetune_widens_calibration_margin(trained_enc, filled_store, speaker, window):
    before = calibrate(trained_enc, speaker.user_enroll, speaker.user_neg, 0.4, 0.9, window)
    cfg = TrainConfig(n_b_p=3, n_b_n=8, k_user=3, epochs=10, margin=2.0, rng_seed=0)
    tuned = finetune(trained_enc, filled_store, speaker.user_enroll, cfg)
    after = reinitialize_after_training(tuned, speaker.user_enroll, speaker.user_neg, 0.4, 0.9, window)
    assert (after.dist_n - after.dist_p) > (before.dist_n - before.dist_p)


# ---------------------------------------------------------------------------
# Pretraining


def test_pretrain_validation(tiny_enc, small_corpus):
    pretrain_set, _, negatives = small_corpus
    with pytest.raises(TrainingError, match="class_id"):
        pretrain(tiny_enc, [negatives[0]], PretrainConfig(epochs=1))
    one_class = [c for c in pretrain_set if c.class_id == pretrain_set[0].class_id]
    with pytest.raises(TrainingError, match="two classes"):
        pretrain(tiny_enc, one_class, PretrainConfig(epochs=1))


def test_pretrain_deterministic_and_improves(tmp_path, tiny_enc, small_corpus):
    pretrain_set, _, _ = small_corpus
    cfg = PretrainConfig(epochs=5, rng_seed=0)
    a = pretrain(tiny_enc, pretrain_set, cfg, log_path=tmp_path / "p.jsonl")
    b = pretrain(tiny_enc, pretrain_set, cfg)
    assert np.array_equal(a.weights, b.weights)
    records = [json.loads(line) for line in (tmp_path / "p.jsonl").read_text().splitlines()]
    assert len(records) == 5
    assert records[-1]["mean_loss"] < records[0]["mean_loss"]


def test_pretrain_epochs_zero_identity(tiny_enc, small_corpus):
    pretrain_set, _, _ = small_corpus
    out = pretrain(tiny_enc, pretrain_set, PretrainConfig(epochs=0))
    assert np.array_equal(out.weights, tiny_enc.weights)
