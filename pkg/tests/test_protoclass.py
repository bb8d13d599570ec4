import numpy as np
import pytest

from selfkws.protoclass import (
    ProtoError,
    Prototype,
    classify_open_set,
    compute_prototype,
    euclidean,
)


def test_euclidean_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        a, b = rng.normal(size=8), rng.normal(size=8)
        assert euclidean(a, b) == pytest.approx(np.linalg.norm(a - b), rel=1e-12)
    assert euclidean(a, a) == 0.0


def test_euclidean_shape_mismatch():
    with pytest.raises(ProtoError):
        euclidean(np.zeros(3), np.zeros(4))


def test_prototype_is_mean():
    rng = np.random.default_rng(1)
    embs = rng.normal(size=(5, 6))
    p = compute_prototype(embs, "kw")
    assert np.allclose(p.vector, embs.mean(axis=0), atol=1e-6)
    assert p.k_used == 5 and p.class_id == "kw"


def test_prototype_errors():
    with pytest.raises(ProtoError):
        compute_prototype([], "kw")
    with pytest.raises(ProtoError):
        compute_prototype(np.zeros((2, 2, 2)), "kw")
    with pytest.raises(ProtoError):
        Prototype(vector=np.array([[1.0, 2.0]]), class_id="x", k_used=1)
    with pytest.raises(ProtoError):
        Prototype(vector=np.array([np.inf]), class_id="x", k_used=1)


def test_classify_brute_force():
    rng = np.random.default_rng(2)
    protos = [Prototype(vector=rng.normal(size=4), class_id=f"c{i}", k_used=3) for i in range(5)]
    for _ in range(50):
        x = rng.normal(size=4)
        gamma = float(rng.uniform(0.5, 4.0))
        got = classify_open_set(x, protos, gamma)
        dists = {p.class_id: euclidean(x, p.vector) for p in protos}
        best_id = min(dists, key=lambda c: (dists[c], c))
        expected = best_id if dists[best_id] < gamma else "unknown"
        assert got.predicted == expected
        assert got.distance == pytest.approx(dists[best_id])
        assert got.gamma_used == gamma


def test_classify_strict_threshold():
    p = Prototype(vector=np.zeros(2), class_id="c", k_used=1)
    x = np.array([3.0, 4.0])  # distance exactly 5
    assert classify_open_set(x, [p], 5.0).predicted == "unknown"
    assert classify_open_set(x, [p], 5.0 + 1e-9).predicted == "c"


def test_classify_tie_break_lexicographic():
    v = np.ones(3)
    protos = [
        Prototype(vector=v, class_id="zeta", k_used=1),
        Prototype(vector=v.copy(), class_id="alpha", k_used=1),
    ]
    got = classify_open_set(np.ones(3) + 0.1, protos, gamma=10.0)
    assert got.predicted == "alpha"


def test_classify_errors():
    p = Prototype(vector=np.zeros(2), class_id="c", k_used=1)
    with pytest.raises(ProtoError):
        classify_open_set(np.zeros(2), [], 1.0)
    with pytest.raises(ProtoError):
        classify_open_set(np.zeros(2), [p], 0.0)
