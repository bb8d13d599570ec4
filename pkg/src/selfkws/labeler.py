"""Streaming pseudo-labeling task.

Each clip is one utterance: its windows are scored against the keyword
prototype, the filtered-distance minimum decides pseudo-positive /
pseudo-negative / abstain, and the window attaining the minimum is stored
as an MFCC map for later incremental training.
"""

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .calibrate import LabelerConfig, get_window_maps, moving_average_filter, raw_distance_sequence
from .corpus import AudioClip
from .frontend import FrontendError, MfccMap, load_mfcc_map, save_mfcc_map

logger = logging.getLogger(__name__)


class LabelerError(ValueError):
    pass


@dataclass
class PseudoSample:
    map: MfccMap
    pseudo_label: str  # "positive" | "negative"
    score: float
    clip_id: str
    window_start_s: float
    true_label: Optional[str] = None  # carried only for evaluation


@dataclass
class SampleStore:
    """Bounded FIFO store of accepted pseudo-samples."""

    max_pos: int = 400
    max_neg: int = 2400
    positives: list = field(default_factory=list)
    negatives: list = field(default_factory=list)

    def add(self, sample: PseudoSample):
        # maps are held at their on-disk float16 precision so that training
        # from a freshly filled store and from a reloaded one is bit-identical
        rounded = sample.map.values.astype(np.float16).astype(np.float32)
        if not np.array_equal(rounded, sample.map.values):
            sample = replace(
                sample,
                map=MfccMap(
                    values=rounded,
                    source_clip_id=sample.map.source_clip_id,
                    window_start_s=sample.map.window_start_s,
                ),
            )
        bucket = self.positives if sample.pseudo_label == "positive" else self.negatives
        cap = self.max_pos if sample.pseudo_label == "positive" else self.max_neg
        bucket.append(sample)
        while len(bucket) > cap:
            bucket.pop(0)


@dataclass
class LabelerStats:
    n_pos: int = 0
    n_neg: int = 0
    n_abstain: int = 0
    false_pos_rate: Optional[float] = None
    false_neg_rate: Optional[float] = None


def label_clip(clip: AudioClip, model, cfg: LabelerConfig, map_cache=None):
    """Decide one utterance: (decision, selected sample or None).

    The clip score is the minimum filtered distance; strictly below th_L the
    min-window is stored as pseudo-positive, strictly above th_H as
    pseudo-negative, otherwise no decision is taken.
    """
    raw = raw_distance_sequence(clip, model, cfg.prototype, cfg.window, map_cache)
    filtered = moving_average_filter(raw, cfg.alpha)
    idx = int(np.argmin(filtered))
    score = float(filtered[idx])
    if score < cfg.th_L:
        decision, label = "pseudo_positive", "positive"
    elif score > cfg.th_H:
        decision, label = "pseudo_negative", "negative"
    else:
        return "abstain", None
    maps = get_window_maps(clip, cfg.window, map_cache)
    sample = PseudoSample(
        map=maps[idx],
        pseudo_label=label,
        score=score,
        clip_id=clip.clip_id,
        window_start_s=maps[idx].window_start_s,
        true_label=clip.true_label,
    )
    return decision, sample


def run_stream(clips, model, cfg: LabelerConfig, store: SampleStore, map_cache=None) -> LabelerStats:
    """Label clips in stream order, filling the store (FIFO on overflow).

    Per-clip errors are logged and the clip skipped.  False-label rates are
    reported when ground truth is available on the stored samples.
    """
    stats = LabelerStats()
    for clip in clips:
        try:
            decision, sample = label_clip(clip, model, cfg, map_cache)
        except FrontendError as exc:
            logger.warning("skipping clip %s: %s", clip.clip_id, exc)
            continue
        if decision == "abstain":
            stats.n_abstain += 1
            continue
        if decision == "pseudo_positive":
            stats.n_pos += 1
        else:
            stats.n_neg += 1
        store.add(sample)

    pos_truth = [s.true_label for s in store.positives if s.true_label is not None]
    neg_truth = [s.true_label for s in store.negatives if s.true_label is not None]
    if pos_truth:
        stats.false_pos_rate = sum(t == "negative" for t in pos_truth) / len(pos_truth)
    if neg_truth:
        stats.false_neg_rate = sum(t == "positive" for t in neg_truth) / len(neg_truth)
    return stats


# ---------------------------------------------------------------------------
# Duty-cycle model of the always-on labeling loop.


@dataclass
class DutyReport:
    active_s_per_stride: float
    stride_s: float
    duty: float


def simulate_duty_cycle(stride_s: float, t_mfcc_s: float, t_nn_s: float, t_overhead_s: float = 0.0) -> DutyReport:
    """Active time per stride = MFCC + inference + overhead; duty is its
    fraction of the stride period."""
    active = t_mfcc_s + t_nn_s + t_overhead_s
    if active > stride_s:
        raise LabelerError(
            f"real-time violation: active {active * 1e3:.1f} ms > stride {stride_s * 1e3:.1f} ms"
        )
    return DutyReport(active_s_per_stride=active, stride_s=stride_s, duty=active / stride_s)


# ---------------------------------------------------------------------------
# Store persistence: a directory of MFCC map files plus an index JSON.


def save_store(directory, store: SampleStore):
    directory = Path(directory)
    (directory / "maps").mkdir(parents=True, exist_ok=True)
    index = {"max_pos": store.max_pos, "max_neg": store.max_neg, "samples": []}
    for i, sample in enumerate(store.positives + store.negatives):
        fname = f"maps/{i:06d}.mfcc"
        save_mfcc_map(directory / fname, sample.map)
        index["samples"].append(
            {
                "file": fname,
                "pseudo_label": sample.pseudo_label,
                "score": sample.score,
                "clip_id": sample.clip_id,
                "window_start_s": sample.window_start_s,
                "true_label": sample.true_label,
            }
        )
    with open(directory / "index.json", "w") as f:
        json.dump(index, f, indent=2, sort_keys=True)
        f.write("\n")


def load_store(directory) -> SampleStore:
    directory = Path(directory)
    index_path = directory / "index.json"
    if not index_path.exists():
        raise LabelerError(f"no sample store at {directory}")
    with open(index_path) as f:
        index = json.load(f)
    store = SampleStore(max_pos=int(index["max_pos"]), max_neg=int(index["max_neg"]))
    for rec in index["samples"]:
        sample = PseudoSample(
            map=load_mfcc_map(
                directory / rec["file"],
                source_clip_id=rec["clip_id"],
                window_start_s=float(rec["window_start_s"]),
            ),
            pseudo_label=rec["pseudo_label"],
            score=float(rec["score"]),
            clip_id=rec["clip_id"],
            window_start_s=float(rec["window_start_s"]),
            true_label=rec["true_label"],
        )
        store.add(sample)
    return store
