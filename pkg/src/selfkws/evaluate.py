"""FAR-calibrated evaluation: operating-point selection, per-speaker
accuracy, the four experiment arms and the ablation sweeps.

A false alarm is one negative clip whose minimum filtered distance falls
below the score threshold (clip-level counting); accuracy is the fraction
of positive clips detected at the threshold chosen for the FAR budget.
"""

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .calibrate import LabelerConfig, calibrate, clip_score
from .corpus import AudioClip, augment_with_noise, generate_colored_noise
from .encoder import EncoderState
from .frontend import FrameWindow, central_window_map
from .labeler import LabelerStats, PseudoSample, SampleStore, run_stream
from .protoclass import Prototype
from .trainer import TrainConfig, TrainingError, finetune, reinitialize_after_training

ARMS = ("pretrained", "self", "oracle", "augment")


class EvalError(ValueError):
    pass


@dataclass
class EvalResult:
    speaker_id: str
    arm: str
    gamma_at_far: float
    accuracy: float
    n_pos_tested: int
    far_target_per_hour: float
    neg_hours: float


@dataclass
class SpeakerData:
    """Everything one simulated speaker contributes to an experiment."""

    speaker_id: str
    user_enroll: list  # K positive enrollment clips
    user_neg: list  # K negative calibration clips
    adaptation: list  # unlabeled stream consumed by the labeling task
    test_pos: list
    test_neg: list


def negative_hours(neg_clips) -> float:
    return sum(c.duration_s for c in neg_clips) / 3600.0


def select_gamma_at_far(neg_clips, model, proto: Prototype, alpha: int, window: FrameWindow,
                        far_per_hour: float, total_neg_hours: Optional[float] = None,
                        map_cache=None) -> float:
    """Largest threshold whose clip-level false-alarm count stays within the
    FAR budget floor(far_per_hour * hours), under the strict-< convention."""
    if not neg_clips:
        raise EvalError("empty negative set")
    if far_per_hour < 0:
        raise EvalError("far_per_hour must be >= 0")
    if total_neg_hours is None:
        total_neg_hours = negative_hours(neg_clips)
    scores = sorted(clip_score(c, model, proto, alpha, window, map_cache) for c in neg_clips)
    budget = math.floor(far_per_hour * total_neg_hours)
    if budget >= len(scores):
        return math.inf
    return float(scores[budget])


def speaker_accuracy(pos_clips, model, proto, alpha, window, gamma, map_cache=None) -> float:
    """Fraction of positive clips whose score falls strictly below gamma."""
    if not pos_clips:
        raise EvalError("empty positive set")
    hits = sum(clip_score(c, model, proto, alpha, window, map_cache) < gamma for c in pos_clips)
    return hits / len(pos_clips)


def _oracle_fill_store(clips, model, cfg: LabelerConfig, store: SampleStore, map_cache=None) -> LabelerStats:
    """Labeling with ground truth substituted for the threshold decision."""
    from .calibrate import get_window_maps, moving_average_filter, raw_distance_sequence

    stats = LabelerStats()
    for clip in clips:
        if clip.true_label is None:
            continue
        raw = raw_distance_sequence(clip, model, cfg.prototype, cfg.window, map_cache)
        filtered = moving_average_filter(raw, cfg.alpha)
        idx = int(np.argmin(filtered))
        maps = get_window_maps(clip, cfg.window, map_cache)
        store.add(
            PseudoSample(
                map=maps[idx],
                pseudo_label=clip.true_label,
                score=float(filtered[idx]),
                clip_id=clip.clip_id,
                window_start_s=maps[idx].window_start_s,
                true_label=clip.true_label,
            )
        )
        if clip.true_label == "positive":
            stats.n_pos += 1
        else:
            stats.n_neg += 1
    stats.false_pos_rate = 0.0
    stats.false_neg_rate = 0.0
    return stats


def _augment_store(data: SpeakerData, n_augment: int, rng_seed: int) -> SampleStore:
    """Noise-augmented copies of the user clips: n_augment per clip at a
    random SNR between 0 and 5 dB (uniform)."""
    rng = np.random.default_rng(rng_seed)
    noise = generate_colored_noise(duration_s=10.0, rng_seed=rng_seed)
    store = SampleStore(max_pos=10**9, max_neg=10**9)
    for label, clips in (("positive", data.user_enroll), ("negative", data.user_neg)):
        for clip in clips:
            for j in range(n_augment):
                snr = float(rng.uniform(0.0, 5.0))
                aug = augment_with_noise(clip, noise, snr, rng_seed=int(rng.integers(2**31)))
                store.add(
                    PseudoSample(
                        map=central_window_map(aug),
                        pseudo_label=label,
                        score=math.nan,
                        clip_id=aug.clip_id,
                        window_start_s=0.0,
                        true_label=label,
                    )
                )
    return store


def run_arm(arm: str, data: SpeakerData, enc: EncoderState, tau_L: float, tau_H: float,
            window: FrameWindow, train_cfg: TrainConfig, far_per_hour: float = 0.5,
            store_caps=(400, 2400), n_augment: int = 30, map_cache=None):
    """Run one experiment arm end to end for one speaker.

    Returns (EvalResult, details) where details holds the calibration
    config, labeling stats and the post-training config.
    """
    if arm not in ARMS:
        raise EvalError(f"unknown arm {arm!r}; choose from {ARMS}")
    cfg = calibrate(enc, data.user_enroll, data.user_neg, tau_L, tau_H, window, map_cache)

    stats = None
    trained = enc
    if arm == "pretrained":
        pass
    elif arm in ("self", "oracle"):
        store = SampleStore(max_pos=store_caps[0], max_neg=store_caps[1])
        if arm == "self":
            stats = run_stream(data.adaptation, enc, cfg, store, map_cache)
        else:
            stats = _oracle_fill_store(data.adaptation, enc, cfg, store, map_cache)
        if len(store.positives) >= train_cfg.n_b_p and store.negatives:
            trained = finetune(enc, store, data.user_enroll, train_cfg)
        # else: training does not execute and the arm equals pretrained
    elif arm == "augment":
        store = _augment_store(data, n_augment, train_cfg.rng_seed)
        trained = finetune(enc, store, data.user_enroll, train_cfg)

    post_cache = None if trained is not enc else map_cache
    post_cfg = reinitialize_after_training(
        trained, data.user_enroll, data.user_neg, tau_L, tau_H, window, post_cache
    )
    neg_hours = negative_hours(data.test_neg)
    gamma = select_gamma_at_far(
        data.test_neg, trained, post_cfg.prototype, post_cfg.alpha, window,
        far_per_hour, neg_hours, post_cache,
    )
    acc = speaker_accuracy(
        data.test_pos, trained, post_cfg.prototype, post_cfg.alpha, window, gamma, post_cache
    )
    result = EvalResult(
        speaker_id=data.speaker_id,
        arm=arm,
        gamma_at_far=gamma,
        accuracy=acc,
        n_pos_tested=len(data.test_pos),
        far_target_per_hour=far_per_hour,
        neg_hours=neg_hours,
    )
    details = {"calibration": cfg, "labeling_stats": stats, "post_calibration": post_cfg}
    return result, details


# ---------------------------------------------------------------------------
# Ablation sweeps


def sweep_tau_grid(data: SpeakerData, enc: EncoderState, window: FrameWindow,
                   train_cfg: TrainConfig, far_per_hour: float = 0.5,
                   tau_Ls=(0.1, 0.2, 0.3, 0.4, 0.5), tau_Hs=(0.7, 0.8, 0.9, 1.0, 1.1),
                   map_cache=None) -> list:
    """Self-arm accuracy for every (tau_L, tau_H) cell."""
    rows = []
    for tau_L in tau_Ls:
        for tau_H in tau_Hs:
            result, details = run_arm(
                "self", data, enc, tau_L, tau_H, window, train_cfg, far_per_hour,
                map_cache=map_cache,
            )
            stats = details["labeling_stats"]
            rows.append(
                {
                    "tau_L": tau_L,
                    "tau_H": tau_H,
                    "accuracy": result.accuracy,
                    "n_pseudo_pos": stats.n_pos,
                    "n_pseudo_neg": stats.n_neg,
                    "n_abstain": stats.n_abstain,
                }
            )
    return rows


def sweep_stride_filter(data: SpeakerData, enc: EncoderState, far_per_hour: float = 0.5,
                        strides=(0.0625, 0.125, 0.25, 0.5), alphas=(1, 2, 3),
                        map_cache=None) -> list:
    """Pretrained-arm accuracy for every (stride, alpha) cell."""
    rows = []
    for stride in strides:
        window = FrameWindow(stride_s=stride)
        cfg = calibrate(enc, data.user_enroll, data.user_neg, 0.4, 0.9, window, map_cache)
        for alpha in alphas:
            gamma = select_gamma_at_far(
                data.test_neg, enc, cfg.prototype, alpha, window, far_per_hour,
                map_cache=map_cache,
            )
            acc = speaker_accuracy(
                data.test_pos, enc, cfg.prototype, alpha, window, gamma, map_cache
            )
            rows.append({"stride_s": stride, "alpha": alpha, "accuracy": acc})
    return rows


def write_csv(path, rows):
    if not rows:
        raise EvalError("no rows to write")
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


def summarize(results) -> dict:
    """Mean and standard deviation of accuracy per arm."""
    by_arm = {}
    for r in results:
        by_arm.setdefault(r.arm, []).append(r.accuracy)
    return {
        arm: {"mean": float(np.mean(v)), "std": float(np.std(v)), "n": len(v)}
        for arm, v in sorted(by_arm.items())
    }
