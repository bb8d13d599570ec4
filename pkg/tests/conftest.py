"""Shared fixtures and finite-difference oracle helpers.

The gradient oracles use central finite differences.  ReLU makes the loss
non-differentiable on a measure-zero set; whenever a perturbed forward pass
flips any ReLU activation mask across the stencil, that coordinate is
excluded from the comparison (the oracle itself is invalid there, the
analytic gradient is not wrong).
"""

import numpy as np
import pytest

from selfkws import encoder as enc_mod
from selfkws.corpus import SynthSpec, generate_synthetic_corpus
from selfkws.frontend import FrameWindow, MfccMap
from selfkws.pipeline import split_synthetic_speaker
from selfkws.trainer import PretrainConfig, pretrain


def random_maps(n, rng):
    return [MfccMap(values=rng.normal(size=(47, 10)).astype(np.float32)) for _ in range(n)]


def collect_relu_masks(caches):
    """All boolean ReLU masks recorded on an activation tape."""
    masks = []
    for c in caches:
        if isinstance(c, np.ndarray) and c.dtype == bool:
            masks.append(c)
        elif (
            isinstance(c, tuple)
            and len(c) == 3
            and isinstance(c[1], np.ndarray)
            and c[1].dtype == bool
        ):  # ResidualPair cache: (sub, mask1, mask2)
            masks.extend([c[1], c[2]])
    return masks


def full_net_grad_check(enc, maps, rng, eps=1e-4, coords=None):
    """Max relative error between analytic and central-FD weight gradients
    for the scalar loss sum(embeddings * R).

    Returns (max_rel_err, n_checked, n_skipped); kink-crossing stencils are
    skipped.  ``coords`` restricts the check to a subset of weight indices.
    """
    emb, tape = enc_mod.forward_training(enc, maps)
    R = rng.normal(size=emb.shape)
    g = enc_mod.backward(enc, tape, R)
    w0 = enc.weights.copy()
    if coords is None:
        coords = range(w0.size)
    worst, checked, skipped = 0.0, 0, 0
    try:
        for i in coords:
            enc.weights = w0.copy()
            enc.weights[i] += eps
            ep, tp = enc_mod.forward_training(enc, maps)
            enc.weights = w0.copy()
            enc.weights[i] -= eps
            em, tm = enc_mod.forward_training(enc, maps)
            mp = collect_relu_masks(tp.caches)
            mm = collect_relu_masks(tm.caches)
            if any(not np.array_equal(a, b) for a, b in zip(mp, mm)):
                skipped += 1
                continue
            fd = float(((ep - em) * R).sum()) / (2 * eps)
            worst = max(worst, abs(fd - g[i]) / max(abs(fd), abs(g[i]), 1e-8))
            checked += 1
    finally:
        enc.weights = w0
    return worst, checked, skipped


def layer_fd_check(layer, params, x, rng, eps=1e-6):
    """Per-layer FD check (float64): perturb every parameter and every input
    element against the analytic backward.  Returns max relative error."""
    params = [p.astype(np.float64) for p in params]
    x = x.astype(np.float64)

    def run(xv, pv):
        tape = []
        y = layer.forward(xv, pv, tape)
        return y, tape

    y, tape = run(x, params)
    R = rng.normal(size=y.shape)
    gx, gparams = layer.backward(R, tape[-1] if tape else None, params)

    worst = 0.0

    def scalar_loss(xv, pv):
        yv, _ = run(xv, pv)
        return float((yv * R).sum())

    for pi, p in enumerate(params):
        flat = p.reshape(-1)
        gflat = np.asarray(gparams[pi]).reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            lp = scalar_loss(x, params)
            flat[i] = old - eps
            lm = scalar_loss(x, params)
            flat[i] = old
            fd = (lp - lm) / (2 * eps)
            worst = max(worst, abs(fd - gflat[i]) / max(abs(fd), abs(gflat[i]), 1e-6))
    xflat = x.reshape(-1)
    gxflat = np.asarray(gx).reshape(-1)
    for i in range(xflat.size):
        old = xflat[i]
        xflat[i] = old + eps
        lp = scalar_loss(x, params)
        xflat[i] = old - eps
        lm = scalar_loss(x, params)
        xflat[i] = old
        fd = (lp - lm) / (2 * eps)
        worst = max(worst, abs(fd - gxflat[i]) / max(abs(fd), abs(gxflat[i]), 1e-6))
    return worst


# ---------------------------------------------------------------------------
# Shared small synthetic corpus and encoders (session-scoped: read-only).


SMALL_SPEC = SynthSpec(
    n_pretrain_classes=3, n_clips_per_class=8, keyword_pattern_seed=7, rng_seed=7
)


@pytest.fixture(scope="session")
def small_corpus():
    return generate_synthetic_corpus(SMALL_SPEC)


@pytest.fixture(scope="session")
def tiny_enc():
    return enc_mod.init_encoder("tiny", rng_seed=0)


@pytest.fixture(scope="session")
def trained_enc(small_corpus):
    pretrain_set, _, _ = small_corpus
    enc = enc_mod.init_encoder("tiny", rng_seed=0)
    return pretrain(enc, pretrain_set, PretrainConfig(epochs=4, rng_seed=0))


@pytest.fixture(scope="session")
def speaker(small_corpus):
    _, target, neg = small_corpus
    return split_synthetic_speaker(target, neg, rng_seed=7)


@pytest.fixture(scope="session")
def window():
    return FrameWindow(stride_s=0.125)
