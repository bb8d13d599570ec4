"""MFCC frontend: 1 s frames to 47x10 feature maps, plus the moving-window
framing used by the streaming labeler.

Parameterization: 1024-sample (64 ms) Hann analysis window, 320-sample
(20 ms) hop -> floor((16000-1024)/320)+1 = 47 frames; 1024-point FFT;
40 triangular mel filters spanning 20 Hz - 8 kHz; log floored at 1e-10;
orthonormal DCT-II keeping coefficients 0-9.  No pre-emphasis filter is
applied, only mean subtraction.
"""

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.fft import dct

from .corpus import SAMPLE_RATE, AudioClip

FRAME_SAMPLES = SAMPLE_RATE  # 1 s analysis frame
MFCC_ROWS = 47
MFCC_COLS = 10

_WIN_LEN = 1024
_HOP = 320
_N_MELS = 40
_FMIN = 20.0
_FMAX = 8000.0
_LOG_FLOOR = 1e-10

_MAGIC = b"MFM1"
_HEADER = struct.Struct("<4sHHH")  # magic, rows, cols, dtype code (1 = f16)


class FrontendError(ValueError):
    pass


@dataclass
class MfccMap:
    """47x10 MFCC feature map for one 1 s frame."""

    values: np.ndarray
    source_clip_id: str = ""
    window_start_s: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.shape != (MFCC_ROWS, MFCC_COLS):
            raise FrontendError(f"MFCC map shape {self.values.shape} != (47, 10)")
        if not np.all(np.isfinite(self.values)):
            raise FrontendError("MFCC map contains non-finite values")


@dataclass
class FrameWindow:
    """Moving analysis window: fixed 1 s length, configurable stride."""

    length_s: float = 1.0
    stride_s: float = 0.125

    def __post_init__(self):
        if self.length_s != 1.0:
            raise FrontendError("window length is fixed at 1.0 s")
        if not (0.0 < self.stride_s < self.length_s):
            raise FrontendError("stride must satisfy 0 < stride < length")

    @property
    def stride_samples(self) -> int:
        return int(round(self.stride_s * SAMPLE_RATE))


def sliding_windows(clip: AudioClip, win: FrameWindow):
    """All (window_start_s, sample_slice) pairs at starts 0, T_S, 2*T_S, ...

    Windows are kept while start + 1 s fits inside the clip; every slice has
    exactly 16000 samples.
    """
    n = len(clip.samples)
    if n < FRAME_SAMPLES:
        raise FrontendError(f"clip {clip.clip_id!r} shorter than 1 s")
    stride = win.stride_samples
    out = []
    start = 0
    while start + FRAME_SAMPLES <= n:
        out.append((start / SAMPLE_RATE, clip.samples[start : start + FRAME_SAMPLES]))
        start += stride
    return out


def pre_emphasize_and_center(frame: np.ndarray) -> np.ndarray:
    """Subtract the mean and cast to the pipeline's 32-bit working precision."""
    frame = np.asarray(frame, dtype=np.float32)
    if frame.shape != (FRAME_SAMPLES,):
        raise FrontendError(f"expected {FRAME_SAMPLES} samples, got {frame.shape}")
    centered = frame.astype(np.float64) - np.mean(frame.astype(np.float64))
    return centered.astype(np.float32)


def _mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz) / 700.0)


def _mel_inv(mel):
    return 700.0 * (10.0 ** (np.asarray(mel) / 2595.0) - 1.0)


def _mel_filterbank() -> np.ndarray:
    edges_hz = _mel_inv(np.linspace(_mel(_FMIN), _mel(_FMAX), _N_MELS + 2))
    fft_freqs = np.fft.rfftfreq(_WIN_LEN, 1.0 / SAMPLE_RATE)
    fb = np.zeros((_N_MELS, len(fft_freqs)))
    for m in range(_N_MELS):
        lo, mid, hi = edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]
        up = (fft_freqs - lo) / (mid - lo)
        down = (hi - fft_freqs) / (hi - mid)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    return fb.astype(np.float64)


_FILTERBANK = _mel_filterbank()
_HANN = np.hanning(_WIN_LEN)


def compute_mfcc(frame: np.ndarray, source_clip_id: str = "", window_start_s: float = 0.0) -> MfccMap:
    """MFCC feature map of one mean-subtracted 1 s frame."""
    frame = np.asarray(frame)
    if frame.shape != (FRAME_SAMPLES,):
        raise FrontendError(f"expected {FRAME_SAMPLES} samples, got {frame.shape}")
    if not np.all(np.isfinite(frame)):
        raise FrontendError("non-finite samples in frame")
    frame = frame.astype(np.float64)
    idx = np.arange(MFCC_ROWS)[:, None] * _HOP + np.arange(_WIN_LEN)[None, :]
    frames = frame[idx] * _HANN
    power = np.abs(np.fft.rfft(frames, _WIN_LEN, axis=1)) ** 2 / _WIN_LEN
    mel_energy = power @ _FILTERBANK.T
    log_mel = np.log(np.maximum(mel_energy, _LOG_FLOOR))
    cepstra = dct(log_mel, type=2, axis=1, norm="ortho")[:, :MFCC_COLS]
    return MfccMap(
        values=cepstra.astype(np.float32),
        source_clip_id=source_clip_id,
        window_start_s=window_start_s,
    )


def clip_window_maps(clip: AudioClip, win: FrameWindow):
    """MFCC maps of every sliding window of a clip, in stream order."""
    maps = []
    for start_s, sl in sliding_windows(clip, win):
        frame = pre_emphasize_and_center(sl)
        maps.append(compute_mfcc(frame, source_clip_id=clip.clip_id, window_start_s=start_s))
    return maps


def central_window_map(clip: AudioClip) -> MfccMap:
    """MFCC map of the centered 1 s crop; used for enrollment clips."""
    n = len(clip.samples)
    if n < FRAME_SAMPLES:
        raise FrontendError(f"clip {clip.clip_id!r} shorter than 1 s")
    off = (n - FRAME_SAMPLES) // 2
    frame = pre_emphasize_and_center(clip.samples[off : off + FRAME_SAMPLES])
    return compute_mfcc(frame, source_clip_id=clip.clip_id, window_start_s=off / SAMPLE_RATE)


# ---------------------------------------------------------------------------
# On-disk format: 10-byte header + float16 row-major payload (940 bytes).


def save_mfcc_map(path, m: MfccMap):
    payload = m.values.astype("<f2").tobytes()
    with open(path, "wb") as f:
        f.write(_HEADER.pack(_MAGIC, MFCC_ROWS, MFCC_COLS, 1))
        f.write(payload)


def load_mfcc_map(path, source_clip_id: str = "", window_start_s: float = 0.0) -> MfccMap:
    with open(path, "rb") as f:
        header = f.read(_HEADER.size)
        payload = f.read()
    if len(header) < _HEADER.size:
        raise FrontendError(f"{path}: truncated header")
    magic, rows, cols, dtype_code = _HEADER.unpack(header)
    if magic != _MAGIC or dtype_code != 1:
        raise FrontendError(f"{path}: not an MFCC map file")
    if rows != MFCC_ROWS or cols != MFCC_COLS or len(payload) != rows * cols * 2:
        raise FrontendError(f"{path}: bad shape or truncated payload")
    values = np.frombuffer(payload, dtype="<f2").reshape(rows, cols).astype(np.float32)
    return MfccMap(values=values, source_clip_id=source_clip_id, window_start_s=window_start_s)
