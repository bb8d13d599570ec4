"""Triplet-loss training: desk-scale pretraining and incremental fine-tuning
on the pseudo-sample store.

Fine-tuning batches combine a group of pseudo-positives, random
pseudo-negatives and the user's enrollment clips; triplets enumerate all
(pseudo-positive, user-positive, pseudo-negative) combinations.  Training
runs a fixed number of epochs with Adam and returns the last weights, with
no validation-based selection.
"""

import json
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import encoder as enc_mod
from .calibrate import LabelerConfig, calibrate
from .encoder import EncoderState
from .frontend import FrameWindow, central_window_map
from .labeler import SampleStore

_DIST_EPS = 1e-12  # below this the euclidean gradient is treated as zero


class TrainingError(ValueError):
    pass


@dataclass
class TrainConfig:
    n_b_p: int = 20
    n_b_n: int = 120
    k_user: int = 3
    epochs: int = 20
    lr: float = 0.001
    margin: float = 0.5
    rng_seed: int = 0
    precision: str = "f32"

    def __post_init__(self):
        if self.n_b_p < 1 or self.lr <= 0 or self.margin <= 0:
            raise TrainingError("invalid training config")


def public_profile(**overrides) -> TrainConfig:
    return replace(TrainConfig(n_b_p=20, n_b_n=120, k_user=3, epochs=20), **overrides)


def recorded_profile(**overrides) -> TrainConfig:
    return replace(TrainConfig(n_b_p=10, n_b_n=60, k_user=3, epochs=8), **overrides)


@dataclass
class TripletBatch:
    """One fine-tuning mini-batch at the MFCC-map level."""

    pos_maps: list
    neg_maps: list
    user_maps: list

    @property
    def n_samples(self) -> int:
        return len(self.pos_maps) + len(self.neg_maps) + len(self.user_maps)

    @property
    def n_triplets(self) -> int:
        return len(self.pos_maps) * len(self.user_maps) * len(self.neg_maps)


def _pairwise_dist(a, b):
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt((diff**2).sum(axis=2)), diff


def triplet_loss(p1, p2, n, margin, exclude_diag=False):
    """Mean hinge loss over all (p1, p2, n) combinations, with analytic
    gradients w.r.t. every embedding.

    ``exclude_diag`` drops triplets where p1 and p2 are the same element of
    a shared sample set (pretraining case).
    Returns (loss, grad_p1, grad_p2, grad_n).
    """
    p1 = np.asarray(p1, dtype=np.float64)
    p2 = np.asarray(p2, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    d_ap, diff_ap = _pairwise_dist(p1, p2)
    d_an, diff_an = _pairwise_dist(p1, n)

    term = d_ap[:, :, None] - d_an[:, None, :] + margin
    valid = np.ones_like(term, dtype=bool)
    if exclude_diag:
        k = min(len(p1), len(p2))
        valid[np.arange(k), np.arange(k), :] = False
    n_tr = int(valid.sum())
    if n_tr == 0:
        z = np.zeros_like
        return 0.0, z(p1), z(p2), z(n)
    active = (term > 0) & valid
    loss = float(np.where(active, term, 0.0).sum() / n_tr)

    # unit direction vectors, zeroed at the d=0 singularity
    u_ap = diff_ap / np.maximum(d_ap, _DIST_EPS)[:, :, None]
    u_ap[d_ap < _DIST_EPS] = 0.0
    u_an = diff_an / np.maximum(d_an, _DIST_EPS)[:, :, None]
    u_an[d_an < _DIST_EPS] = 0.0

    count_ap = active.sum(axis=2)  # how many active triplets use pair (a, k)
    count_an = active.sum(axis=1)  # how many active triplets use pair (a, b)
    g_p1 = (count_ap[:, :, None] * u_ap).sum(axis=1) - (count_an[:, :, None] * u_an).sum(axis=1)
    g_p2 = -(count_ap[:, :, None] * u_ap).sum(axis=0)
    g_n = (count_an[:, :, None] * u_an).sum(axis=0)
    return loss, g_p1 / n_tr, g_p2 / n_tr, g_n / n_tr


def assemble_epoch(store: SampleStore, user_maps, cfg: TrainConfig, epoch_rng) -> list:
    """Split shuffled pseudo-positives into full groups of n_b_p and pair
    each with n_b_n pseudo-negatives, reusing negatives only once the whole
    negative store has been consumed within the epoch."""
    n_pos = len(store.positives)
    if n_pos < cfg.n_b_p:
        raise TrainingError(
            f"insufficient pseudo-positives: {n_pos} < {cfg.n_b_p}; training does not execute"
        )
    if not store.negatives:
        raise TrainingError("no pseudo-negatives in store")
    pos_order = epoch_rng.permutation(n_pos)
    n_batches = n_pos // cfg.n_b_p

    neg_pool = list(epoch_rng.permutation(len(store.negatives)))
    batches = []
    for b in range(n_batches):
        pos_idx = pos_order[b * cfg.n_b_p : (b + 1) * cfg.n_b_p]
        neg_idx = []
        while len(neg_idx) < cfg.n_b_n:
            if not neg_pool:
                neg_pool = list(epoch_rng.permutation(len(store.negatives)))
            neg_idx.append(neg_pool.pop())
        batches.append(
            TripletBatch(
                pos_maps=[store.positives[i].map for i in pos_idx],
                neg_maps=[store.negatives[i].map for i in neg_idx],
                user_maps=list(user_maps),
            )
        )
    return batches


class Adam:
    def __init__(self, n_params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(n_params, dtype=np.float64)
        self.v = np.zeros(n_params, dtype=np.float64)
        self.t = 0

    def step(self, weights, grad):
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad**2
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return (weights - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(np.float32)


def _cast_weights(weights, precision):
    if precision == "f16_emulated":
        return weights.astype(np.float16).astype(np.float32)
    return weights


def _write_log(log_path, record):
    if log_path is not None:
        with open(log_path, "a") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")


def finetune(enc: EncoderState, store: SampleStore, user_pos_clips, cfg: TrainConfig,
             log_path=None) -> EncoderState:
    """Incrementally fine-tune on the pseudo-sample store.  Deterministic per
    seed; returns the final weights after cfg.epochs epochs."""
    new = EncoderState(
        arch=enc.arch, weights=enc.weights.copy(), precision=cfg.precision, rng_seed=enc.rng_seed
    )
    if cfg.epochs == 0:
        return new
    user_maps = [central_window_map(c) for c in user_pos_clips]
    if len(user_maps) != cfg.k_user:
        user_maps = user_maps[: cfg.k_user]
    rng = np.random.default_rng(cfg.rng_seed)
    optimizer = Adam(enc.arch.param_count, cfg.lr)
    for epoch in range(cfg.epochs):
        t0 = time.monotonic()
        batches = assemble_epoch(store, user_maps, cfg, rng)
        losses = []
        for batch in batches:
            maps = batch.pos_maps + batch.neg_maps + batch.user_maps
            embs, tape = enc_mod.forward_training(new, maps)
            np_, nn = len(batch.pos_maps), len(batch.neg_maps)
            loss, g_p1, g_p2, g_n = triplet_loss(
                embs[:np_], embs[np_ + nn :], embs[np_ : np_ + nn], cfg.margin
            )
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            losses.append(loss)
            grad_embs = np.concatenate([g_p1, g_n, g_p2], axis=0)
            grad_w = enc_mod.backward(new, tape, grad_embs)
            new.weights = _cast_weights(optimizer.step(new.weights, grad_w), cfg.precision)
        _write_log(
            log_path,
            {
                "epoch": epoch,
                "mean_loss": float(np.mean(losses)),
                "n_batches": len(batches),
                "wall_time_s": time.monotonic() - t0,
            },
        )
    return new


@dataclass
class PretrainConfig:
    epochs: int = 30
    lr: float = 0.001
    margin: float = 0.5
    n_per_class: int = 4
    rng_seed: int = 0
    precision: str = "f32"


def pretrain(enc: EncoderState, clips, cfg: PretrainConfig, log_path=None) -> EncoderState:
    """Class-balanced triplet pretraining on a labeled multi-class corpus.

    Each clip contributes the embedding of its centered 1 s crop; triplets
    are formed within-batch with anchors and positives from the same class
    and negatives from the rest of the batch.
    """
    by_class = {}
    for clip in clips:
        if clip.class_id is None:
            raise TrainingError(f"clip {clip.clip_id!r} has no class_id")
        by_class.setdefault(clip.class_id, []).append(clip)
    if len(by_class) < 2:
        raise TrainingError("pretraining needs at least two classes")

    new = EncoderState(
        arch=enc.arch, weights=enc.weights.copy(), precision=cfg.precision, rng_seed=enc.rng_seed
    )
    if cfg.epochs == 0:
        return new

    classes = sorted(by_class)
    maps = {c: [central_window_map(clip) for clip in by_class[c]] for c in classes}
    rng = np.random.default_rng(cfg.rng_seed)
    optimizer = Adam(enc.arch.param_count, cfg.lr)

    min_count = min(len(v) for v in maps.values())
    batches_per_epoch = max(min_count // cfg.n_per_class, 1)

    for epoch in range(cfg.epochs):
        t0 = time.monotonic()
        order = {c: rng.permutation(len(maps[c])) for c in classes}
        losses = []
        for b in range(batches_per_epoch):
            batch_maps = []
            spans = []
            for c in classes:
                idx = order[c][b * cfg.n_per_class : (b + 1) * cfg.n_per_class]
                if len(idx) == 0:
                    continue
                spans.append((len(batch_maps), len(batch_maps) + len(idx)))
                batch_maps.extend(maps[c][i] for i in idx)
            embs, tape = enc_mod.forward_training(new, batch_maps)
            grad_embs = np.zeros_like(embs, dtype=np.float64)
            batch_loss = 0.0
            for lo, hi in spans:
                own = embs[lo:hi]
                others = np.concatenate([embs[:lo], embs[hi:]], axis=0)
                loss, g_p1, g_p2, g_n = triplet_loss(own, own, others, cfg.margin, exclude_diag=True)
                batch_loss += loss
                grad_embs[lo:hi] += g_p1 + g_p2
                grad_embs[:lo] += g_n[:lo]
                grad_embs[hi:] += g_n[lo:]
            if not np.isfinite(batch_loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            losses.append(batch_loss / len(spans))
            grad_w = enc_mod.backward(new, tape, grad_embs)
            new.weights = _cast_weights(optimizer.step(new.weights, grad_w), cfg.precision)
        _write_log(
            log_path,
            {
                "epoch": epoch,
                "mean_loss": float(np.mean(losses)),
                "n_batches": batches_per_epoch,
                "wall_time_s": time.monotonic() - t0,
            },
        )
    return new


def reinitialize_after_training(enc: EncoderState, user_pos, user_neg, tau_L, tau_H,
                                window: FrameWindow, map_cache=None) -> LabelerConfig:
    """Recompute the prototype and rerun calibration on the updated encoder."""
    return calibrate(enc, user_pos, user_neg, tau_L, tau_H, window, map_cache)
