"""On-device threshold calibration.

From K positive and K negative user clips: build the keyword prototype,
pick the moving-average filter length that maximizes the positive/negative
score margin, and place the labeling thresholds on the line
Th(tau) = dist_p + tau * (dist_n - dist_p).
"""

import json
from dataclasses import dataclass, field

import numpy as np

from . import encoder as enc_mod
from . import quant as quant_mod
from .corpus import AudioClip
from .frontend import FrameWindow, central_window_map, clip_window_maps
from .protoclass import Prototype, compute_prototype, euclidean

ALPHA_CHOICES = (1, 2, 3, 4, 5)


class CalibrationError(ValueError):
    pass


@dataclass
class LabelerConfig:
    prototype: Prototype
    alpha: int
    tau_L: float
    tau_H: float
    th_L: float
    th_H: float
    dist_p: float
    dist_n: float
    window: FrameWindow
    degenerate_margin: bool = False

    def __post_init__(self):
        if self.alpha not in ALPHA_CHOICES:
            raise CalibrationError(f"alpha must be in {ALPHA_CHOICES}")
        if not self.tau_L < self.tau_H:
            raise CalibrationError("tau_L must be < tau_H")


def embed_maps(model, maps) -> np.ndarray:
    """Embeddings for a list of MFCC maps via the float or quantized path."""
    if isinstance(model, quant_mod.QuantizedEncoder):
        return quant_mod.forward_quantized_batch(model, maps)
    return enc_mod.forward_batch(model, maps)


def get_window_maps(clip: AudioClip, window: FrameWindow, map_cache=None):
    """Sliding-window MFCC maps with optional memoization by clip and stride."""
    if map_cache is None:
        return clip_window_maps(clip, window)
    key = (clip.clip_id, window.stride_s)
    if key not in map_cache:
        map_cache[key] = clip_window_maps(clip, window)
    return map_cache[key]


def moving_average_filter(raw, alpha: int) -> np.ndarray:
    """Trailing moving average of length alpha; early outputs average the
    values available so far."""
    raw = np.asarray(raw, dtype=np.float64)
    out = np.empty_like(raw)
    for i in range(len(raw)):
        lo = max(0, i - alpha + 1)
        out[i] = raw[lo : i + 1].mean()
    return out


def raw_distance_sequence(clip, model, proto: Prototype, window: FrameWindow, map_cache=None):
    maps = get_window_maps(clip, window, map_cache)
    embs = embed_maps(model, maps)
    return np.array([euclidean(e, proto.vector) for e in embs])


def filtered_distance_sequence(clip, model, proto, alpha, window, map_cache=None) -> np.ndarray:
    """Per-window prototype distances passed through the trailing filter."""
    return moving_average_filter(
        raw_distance_sequence(clip, model, proto, window, map_cache), alpha
    )


def clip_score(clip, model, proto, alpha, window, map_cache=None) -> float:
    """Minimum filtered distance over the clip's windows."""
    return float(filtered_distance_sequence(clip, model, proto, alpha, window, map_cache).min())


def enrollment_prototype(model, user_pos_clips, class_id: str = "keyword") -> Prototype:
    """Prototype from the centered 1 s crop of each enrollment clip."""
    maps = [central_window_map(c) for c in user_pos_clips]
    return compute_prototype(embed_maps(model, maps), class_id)


def thresholds_from_margin(dist_p, dist_n, tau_L, tau_H):
    th_L = dist_p + tau_L * (dist_n - dist_p)
    th_H = dist_p + tau_H * (dist_n - dist_p)
    return th_L, th_H


def calibrate(model, user_pos, user_neg, tau_L, tau_H, window: FrameWindow, map_cache=None) -> LabelerConfig:
    """Derive the full labeling configuration from the user's K+K clips.

    For each candidate filter length, dist_p / dist_n are the mean clip
    scores of the positive / negative clips; the chosen filter maximizes
    their margin (smallest filter wins ties).  A non-positive margin is
    flagged as degenerate but still returns a config.
    """
    if len(user_pos) < 1 or len(user_neg) < 1:
        raise CalibrationError("need at least one positive and one negative clip")
    if not tau_L < tau_H:
        raise CalibrationError("tau_L must be < tau_H")
    proto = enrollment_prototype(model, user_pos)

    raw_pos = [raw_distance_sequence(c, model, proto, window, map_cache) for c in user_pos]
    raw_neg = [raw_distance_sequence(c, model, proto, window, map_cache) for c in user_neg]

    best = None
    for alpha in ALPHA_CHOICES:
        dist_p = float(np.mean([moving_average_filter(r, alpha).min() for r in raw_pos]))
        dist_n = float(np.mean([moving_average_filter(r, alpha).min() for r in raw_neg]))
        margin = dist_n - dist_p
        if best is None or margin > best[0]:
            best = (margin, alpha, dist_p, dist_n)
    margin, alpha, dist_p, dist_n = best
    th_L, th_H = thresholds_from_margin(dist_p, dist_n, tau_L, tau_H)
    return LabelerConfig(
        prototype=proto,
        alpha=alpha,
        tau_L=tau_L,
        tau_H=tau_H,
        th_L=th_L,
        th_H=th_H,
        dist_p=dist_p,
        dist_n=dist_n,
        window=window,
        degenerate_margin=margin <= 0.0,
    )


# ---------------------------------------------------------------------------
# JSON round-trip for the CLI hand-off between `calibrate` and `label`.


def config_to_dict(cfg: LabelerConfig) -> dict:
    return {
        "prototype": {
            "vector": [float(v) for v in cfg.prototype.vector],
            "class_id": cfg.prototype.class_id,
            "k_used": cfg.prototype.k_used,
        },
        "alpha": cfg.alpha,
        "tau_L": cfg.tau_L,
        "tau_H": cfg.tau_H,
        "th_L": cfg.th_L,
        "th_H": cfg.th_H,
        "dist_p": cfg.dist_p,
        "dist_n": cfg.dist_n,
        "window": {"length_s": cfg.window.length_s, "stride_s": cfg.window.stride_s},
        "degenerate_margin": cfg.degenerate_margin,
    }


def config_from_dict(d: dict) -> LabelerConfig:
    return LabelerConfig(
        prototype=Prototype(
            vector=np.array(d["prototype"]["vector"], dtype=np.float32),
            class_id=d["prototype"]["class_id"],
            k_used=int(d["prototype"]["k_used"]),
        ),
        alpha=int(d["alpha"]),
        tau_L=float(d["tau_L"]),
        tau_H=float(d["tau_H"]),
        th_L=float(d["th_L"]),
        th_H=float(d["th_H"]),
        dist_p=float(d["dist_p"]),
        dist_n=float(d["dist_n"]),
        window=FrameWindow(
            length_s=float(d["window"]["length_s"]), stride_s=float(d["window"]["stride_s"])
        ),
        degenerate_margin=bool(d.get("degenerate_margin", False)),
    )


def save_config(path, cfg: LabelerConfig):
    with open(path, "w") as f:
        json.dump(config_to_dict(cfg), f, indent=2, sort_keys=True)
        f.write("\n")


def load_config(path) -> LabelerConfig:
    with open(path) as f:
        return config_from_dict(json.load(f))
