"""Audio ingestion, synthetic corpus generation and noise augmentation.

Audio enters the system either from 16 kHz mono PCM WAV files referenced by a
JSON-lines manifest, or from the seeded synthetic generator used for
desk-scale experiments.  All generation is a pure function of its inputs and
seeds.
"""

import json
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

SAMPLE_RATE = 16000

VALID_LABELS = ("positive", "negative")
VALID_SPLITS = ("adaptation", "test", "user_enroll", "user_neg")


class CorpusError(ValueError):
    """Raised on malformed manifests, unsupported audio or bad generator specs."""


@dataclass
class AudioClip:
    """Mono PCM audio at 16 kHz, amplitude-normalized to [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE
    true_label: Optional[str] = None
    speaker_id: Optional[str] = None
    clip_id: str = ""
    class_id: Optional[str] = None  # multi-class identity for pretraining corpora

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise CorpusError(f"clip {self.clip_id!r}: samples must be a non-empty 1-D array")
        if self.sample_rate != SAMPLE_RATE:
            raise CorpusError(
                f"clip {self.clip_id!r}: sample rate {self.sample_rate} != {SAMPLE_RATE}"
            )
        if self.true_label is not None and self.true_label not in VALID_LABELS:
            raise CorpusError(f"clip {self.clip_id!r}: bad label {self.true_label!r}")

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class ManifestEntry:
    path: str
    label: str
    speaker_id: str
    split: str
    sample_rate: int = SAMPLE_RATE


@dataclass
class Manifest:
    entries: list


@dataclass
class SynthSpec:
    """Parameters for the seeded synthetic keyword corpus."""

    n_pretrain_classes: int = 6
    n_clips_per_class: int = 30
    keyword_pattern_seed: int = 0
    noise_floor_db: float = -30.0
    clip_duration_range_s: tuple = (1.0, 1.5)
    rng_seed: int = 0

    def validate(self):
        if self.n_pretrain_classes < 1 or self.n_clips_per_class < 1:
            raise CorpusError("class and clip counts must be >= 1")
        lo, hi = self.clip_duration_range_s
        if lo < 1.0 or hi < lo:
            raise CorpusError("clip durations must be >= 1.0 s and the range ordered")


# ---------------------------------------------------------------------------
# WAV I/O.  Only 16-bit PCM mono at 16 kHz is accepted; anything else is
# rejected rather than resampled so that runs are bit-reproducible.


def read_wav(path, clip_id="", label=None, speaker_id=None) -> AudioClip:
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"missing file: {path}")
    with wave.open(str(path), "rb") as wf:
        if wf.getnchannels() != 1:
            raise CorpusError(f"{path}: expected mono, got {wf.getnchannels()} channels")
        if wf.getsampwidth() != 2:
            raise CorpusError(f"{path}: expected 16-bit PCM, got {8 * wf.getsampwidth()}-bit")
        if wf.getframerate() != SAMPLE_RATE:
            raise CorpusError(f"{path}: expected {SAMPLE_RATE} Hz, got {wf.getframerate()}")
        raw = wf.readframes(wf.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32768.0
    return AudioClip(
        samples=samples,
        true_label=label,
        speaker_id=speaker_id,
        clip_id=clip_id or path.stem,
    )


def write_wav(path, clip: AudioClip):
    pcm = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(SAMPLE_RATE)
        wf.writeframes(pcm.tobytes())


# ---------------------------------------------------------------------------
# Manifests: JSON lines, one entry per line.


def load_manifest(path, k_enroll: int = 3) -> Manifest:
    """Load and validate a JSON-lines manifest.

    Referenced audio files must exist; paths must be unique; each speaker
    with user_enroll entries must have exactly ``k_enroll`` of them.
    """
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"missing file: {path}")
    entries = []
    base = path.parent
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorpusError(f"{path}:{lineno}: parse error: {exc}") from exc
        try:
            entry = ManifestEntry(
                path=rec["path"],
                label=rec["label"],
                speaker_id=rec["speaker_id"],
                split=rec["split"],
                sample_rate=int(rec.get("sample_rate", SAMPLE_RATE)),
            )
        except KeyError as exc:
            raise CorpusError(f"{path}:{lineno}: missing field {exc}") from exc
        if entry.label not in VALID_LABELS:
            raise CorpusError(f"{path}:{lineno}: bad label {entry.label!r}")
        if entry.split not in VALID_SPLITS:
            raise CorpusError(f"{path}:{lineno}: bad split {entry.split!r}")
        if entry.sample_rate != SAMPLE_RATE:
            raise CorpusError(
                f"{path}:{lineno}: declared sample rate {entry.sample_rate} != {SAMPLE_RATE}"
            )
        entries.append(entry)

    seen = set()
    for entry in entries:
        if entry.path in seen:
            raise CorpusError(f"duplicate clip path: {entry.path}")
        seen.add(entry.path)
        if not (base / entry.path).exists():
            raise CorpusError(f"missing file: {entry.path}")

    enroll_counts = {}
    for entry in entries:
        if entry.split == "user_enroll":
            enroll_counts[entry.speaker_id] = enroll_counts.get(entry.speaker_id, 0) + 1
    for speaker, count in enroll_counts.items():
        if count != k_enroll:
            raise CorpusError(
                f"speaker {speaker!r} has {count} user_enroll entries, expected {k_enroll}"
            )
    return Manifest(entries=entries)


def save_manifest(path, manifest: Manifest):
    lines = []
    for e in manifest.entries:
        lines.append(
            json.dumps(
                {
                    "path": e.path,
                    "label": e.label,
                    "speaker_id": e.speaker_id,
                    "split": e.split,
                    "sample_rate": e.sample_rate,
                },
                sort_keys=True,
            )
        )
    Path(path).write_text("\n".join(lines) + "\n")


def load_manifest_clips(manifest: Manifest, base_dir) -> list:
    """Read every manifest entry into an AudioClip, preserving order."""
    base = Path(base_dir)
    clips = []
    for e in manifest.entries:
        clip = read_wav(base / e.path, clip_id=e.path, label=e.label, speaker_id=e.speaker_id)
        clips.append(clip)
    return clips


# ---------------------------------------------------------------------------
# Synthetic corpus.  Each class is a fixed sequence of 3-5 FM tone bursts
# with class-specific frequencies and timing, rendered over white noise.
# Class separability in MFCC space comes from the burst frequencies.


def _class_pattern(pattern_rng) -> np.ndarray:
    """Render one class signature: a sequence of windowed FM tone bursts."""
    n_bursts = int(pattern_rng.integers(3, 6))
    pieces = []
    for _ in range(n_bursts):
        f0 = float(pattern_rng.uniform(300.0, 3200.0))
        f1 = f0 * float(pattern_rng.uniform(0.6, 1.7))
        dur = float(pattern_rng.uniform(0.08, 0.18))
        gap = float(pattern_rng.uniform(0.02, 0.06))
        amp = float(pattern_rng.uniform(0.35, 0.6))
        n = int(round(dur * SAMPLE_RATE))
        t = np.arange(n) / SAMPLE_RATE
        freq = f0 + (f1 - f0) * t / max(dur, 1e-9)
        phase = 2.0 * np.pi * np.cumsum(freq) / SAMPLE_RATE
        burst = amp * np.sin(phase) * np.hanning(n)
        pieces.append(burst.astype(np.float32))
        pieces.append(np.zeros(int(round(gap * SAMPLE_RATE)), dtype=np.float32))
    pattern = np.concatenate(pieces[:-1])
    # keep the signature comfortably inside a 1 s analysis window
    max_len = int(0.9 * SAMPLE_RATE)
    return pattern[:max_len]


def _render_clip(pattern, duration_s, noise_std, rng, clip_id, **clip_kwargs) -> AudioClip:
    n = int(round(duration_s * SAMPLE_RATE))
    samples = rng.normal(0.0, noise_std, size=n).astype(np.float32)
    if pattern is not None:
        max_off = max(n - len(pattern), 0)
        off = int(rng.integers(0, max_off + 1))
        samples[off : off + len(pattern)] += pattern[: n - off]
    return AudioClip(samples=samples, clip_id=clip_id, **clip_kwargs)


def generate_synthetic_corpus(spec: SynthSpec):
    """Generate (pretrain_set, target_keyword_set, negative_set).

    The target keyword class is disjoint from the pretrain classes.  The
    negative set mixes noise-only clips with clips carrying a distractor
    pattern never seen in pretraining, so open-set rejection is non-trivial.
    Output is deterministic for fixed seeds.
    """
    spec.validate()
    pattern_rng = np.random.default_rng(spec.keyword_pattern_seed)
    # patterns drawn in a fixed order: pretrain classes, target, distractor
    patterns = [_class_pattern(pattern_rng) for _ in range(spec.n_pretrain_classes + 2)]
    target_pattern = patterns[spec.n_pretrain_classes]
    distractor_pattern = patterns[spec.n_pretrain_classes + 1]

    noise_std = 10.0 ** (spec.noise_floor_db / 20.0)
    lo, hi = spec.clip_duration_range_s
    rng = np.random.default_rng(spec.rng_seed)

    pretrain = []
    for ci in range(spec.n_pretrain_classes):
        for k in range(spec.n_clips_per_class):
            dur = float(rng.uniform(lo, hi))
            pretrain.append(
                _render_clip(
                    patterns[ci], dur, noise_std, rng,
                    clip_id=f"pre_c{ci:02d}_{k:03d}", class_id=f"class_{ci:02d}",
                )
            )

    target = []
    for k in range(spec.n_clips_per_class):
        dur = float(rng.uniform(lo, hi))
        target.append(
            _render_clip(
                target_pattern, dur, noise_std, rng,
                clip_id=f"pos_{k:03d}", true_label="positive", class_id="target",
            )
        )

    negative = []
    for k in range(2 * spec.n_clips_per_class):
        dur = float(rng.uniform(lo, hi))
        pattern = distractor_pattern if k % 2 else None
        negative.append(
            _render_clip(
                pattern, dur, noise_std, rng,
                clip_id=f"neg_{k:03d}", true_label="negative",
            )
        )
    return pretrain, target, negative


def generate_colored_noise(duration_s: float, rng_seed: int, level_db: float = -20.0) -> AudioClip:
    """Pink-ish noise clip usable as an augmentation source when no recorded
    noise is supplied."""
    n = int(round(duration_s * SAMPLE_RATE))
    rng = np.random.default_rng(rng_seed)
    white = rng.normal(0.0, 1.0, n)
    spectrum = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n, 1.0 / SAMPLE_RATE)
    spectrum[1:] /= np.sqrt(freqs[1:])
    noise = np.fft.irfft(spectrum, n)
    noise *= 10.0 ** (level_db / 20.0) / max(np.sqrt(np.mean(noise**2)), 1e-12)
    return AudioClip(samples=noise.astype(np.float32), clip_id=f"noise_{rng_seed}")


def augment_with_noise(clip: AudioClip, noise: AudioClip, snr_db: float, rng_seed: int) -> AudioClip:
    """Mix a seeded noise segment into the clip at an exact SNR.

    The noise segment start is chosen by the seeded RNG; the segment is
    scaled so the resulting signal-to-noise power ratio equals ``snr_db``.
    """
    if not np.isfinite(snr_db):
        raise CorpusError("snr_db must be finite")
    if len(noise.samples) < len(clip.samples):
        raise CorpusError("noise too short for clip")
    p_signal = float(np.mean(clip.samples.astype(np.float64) ** 2))
    if p_signal <= 0.0:
        raise CorpusError("zero-power signal")
    rng = np.random.default_rng(rng_seed)
    max_off = len(noise.samples) - len(clip.samples)
    off = int(rng.integers(0, max_off + 1))
    segment = noise.samples[off : off + len(clip.samples)].astype(np.float64)
    p_noise = float(np.mean(segment**2))
    if p_noise <= 0.0:
        raise CorpusError("zero-power noise segment")
    gain = np.sqrt(p_signal / (p_noise * 10.0 ** (snr_db / 10.0)))
    mixed = clip.samples.astype(np.float64) + gain * segment
    return AudioClip(
        samples=mixed.astype(np.float32),
        true_label=clip.true_label,
        speaker_id=clip.speaker_id,
        clip_id=f"{clip.clip_id}_aug{rng_seed}",
        class_id=clip.class_id,
    )
