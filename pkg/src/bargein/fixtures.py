"""Desk-scale synthetic corpus: 10 keyword classes plus interferer clips.

Keywords are harmonic tone patterns (class-specific pitch and 3-segment
contour, per-speaker jitter) laid out in a speech-commands style tree with
validation/testing list files. Interferers deliberately embed the same
keyword patterns ("tts") or are arpeggiated notes ("music"), so playback at
low SIR genuinely confuses a classifier that cannot see the reference.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import dsp
from .dsp import SAMPLE_RATE

KEYWORDS10 = ("down", "go", "left", "no", "off", "on", "right", "stop", "up", "yes")

# distinct 3-segment pitch contours, one per class index
_CONTOURS = (
    (1.00, 1.30, 1.65), (1.00, 0.75, 0.58), (1.00, 1.30, 0.75),
    (1.00, 0.75, 1.30), (1.00, 1.00, 1.45), (1.00, 1.00, 0.66),
    (1.00, 1.45, 1.00), (1.00, 0.66, 1.00), (1.00, 1.18, 1.40),
    (1.00, 0.85, 0.70),
)
_HARMONIC_AMPS = (1.0, 0.6, 0.4, 0.25)
_SEGMENT_SEC = 0.24
_GAP_SEC = 0.03


def class_f0(class_idx: int) -> float:
    return 120.0 + 35.0 * class_idx


def _tone(freq: float, n: int, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n) / SAMPLE_RATE
    phase = rng.uniform(0, 2 * np.pi)
    x = np.zeros(n)
    for h, amp in enumerate(_HARMONIC_AMPS, start=1):
        x += amp * np.sin(2 * np.pi * freq * h * t + phase * h)
    # 10 ms raised-cosine fade at both ends
    edge = min(160, n // 2)
    ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(edge) / edge)
    x[:edge] *= ramp
    x[-edge:] *= ramp[::-1]
    return x


def keyword_pattern(class_idx: int, rng: np.random.Generator,
                    f0_mult: float = 1.0) -> np.ndarray:
    """The tone sequence for one class, before padding to clip length."""
    f0 = class_f0(class_idx) * f0_mult
    seg = int(_SEGMENT_SEC * SAMPLE_RATE)
    gap = int(_GAP_SEC * SAMPLE_RATE)
    parts = []
    for mult in _CONTOURS[class_idx % len(_CONTOURS)]:
        parts.append(_tone(f0 * mult, seg, rng))
        parts.append(np.zeros(gap))
    return np.concatenate(parts[:-1])


def _normalize(x: np.ndarray, peak: float) -> np.ndarray:
    m = np.max(np.abs(x))
    return x * (peak / m) if m > 0 else x


def make_keyword_clip(class_idx: int, rng: np.random.Generator,
                      clip_len: int = SAMPLE_RATE) -> np.ndarray:
    f0_mult = rng.uniform(0.93, 1.07)
    pattern = keyword_pattern(class_idx, rng, f0_mult)
    pattern = pattern + rng.normal(0.0, 0.002, size=pattern.size)
    out = np.zeros(clip_len)
    if pattern.size >= clip_len:
        out[:] = pattern[:clip_len]
    else:
        start = int(rng.integers(0, clip_len - pattern.size + 1))
        out[start : start + pattern.size] = pattern
    return _normalize(out, rng.uniform(0.25, 0.5))


def make_tts_clip(rng: np.random.Generator, n_classes: int = len(KEYWORDS10),
                  clip_len: int = 2 * SAMPLE_RATE) -> np.ndarray:
    """Speech-like interferer: a run of keyword patterns with babble gaps."""
    parts = []
    for _ in range(int(rng.integers(2, 4))):
        cls = int(rng.integers(0, n_classes))
        parts.append(keyword_pattern(cls, rng, rng.uniform(0.9, 1.1)))
        gap = int(rng.uniform(0.06, 0.12) * SAMPLE_RATE)
        babble = rng.normal(0.0, 1.0, size=gap)
        babble = np.convolve(babble, np.ones(8) / 8.0, mode="same")
        env = np.abs(np.sin(2 * np.pi * rng.uniform(3, 6) * np.arange(gap) / SAMPLE_RATE))
        parts.append(0.08 * babble * env)
    x = np.concatenate(parts)
    if x.size < clip_len:
        x = np.concatenate([x, np.zeros(clip_len - x.size)])
    return _normalize(x[:clip_len], rng.uniform(0.25, 0.5))


def make_music_clip(rng: np.random.Generator,
                    clip_len: int = 2 * SAMPLE_RATE) -> np.ndarray:
    """Arpeggiated pentatonic notes with plucked decay envelopes."""
    scale = 220.0 * 2.0 ** (np.array([0, 3, 5, 7, 10, 12, 15, 17]) / 12.0)
    note_len = int(0.25 * SAMPLE_RATE)
    t = np.arange(note_len) / SAMPLE_RATE
    env = np.exp(-t / 0.08)
    parts = []
    while sum(p.size for p in parts) < clip_len:
        f = scale[int(rng.integers(0, scale.size))]
        note = np.sin(2 * np.pi * f * t) + 0.4 * np.sin(2 * np.pi * 2 * f * t)
        parts.append(note * env)
    return _normalize(np.concatenate(parts)[:clip_len], rng.uniform(0.25, 0.5))


def make_fixture_corpus(out_dir, n_train_per_class: int = 8,
                        n_dev_per_class: int = 2, n_test_per_class: int = 4,
                        n_interferers: int = 20, seed: int = 0,
                        keywords: tuple = KEYWORDS10) -> dict:
    """Write the corpus tree; returns paths {corpus, tts, music}.

    Layout matches the speech-commands convention: one directory per keyword,
    validation_list.txt / testing_list.txt with relative paths, interferer
    clips under _interferers/ (the leading underscore keeps them out of
    class discovery).
    """
    out_dir = Path(out_dir)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    dev_list, test_list = [], []
    per_class = n_train_per_class + n_dev_per_class + n_test_per_class
    for ci, kw in enumerate(keywords):
        kw_dir = out_dir / kw
        kw_dir.mkdir(parents=True, exist_ok=True)
        for i in range(per_class):
            clip = make_keyword_clip(ci, rng)
            name = f"{ci:02d}{i:03d}{int(rng.integers(0, 16**4)):04x}_nohash_0.wav"
            dsp.write_wav(kw_dir / name, dsp.AudioBuffer(clip))
            rel = f"{kw}/{name}"
            if i < n_dev_per_class:
                dev_list.append(rel)
            elif i < n_dev_per_class + n_test_per_class:
                test_list.append(rel)
    (out_dir / "validation_list.txt").write_text("\n".join(dev_list) + "\n")
    (out_dir / "testing_list.txt").write_text("\n".join(test_list) + "\n")

    tts_dir = out_dir / "_interferers" / "tts"
    music_dir = out_dir / "_interferers" / "music"
    tts_dir.mkdir(parents=True, exist_ok=True)
    music_dir.mkdir(parents=True, exist_ok=True)
    for i in range(n_interferers):
        dsp.write_wav(tts_dir / f"tts_{i:03d}.wav",
                      dsp.AudioBuffer(make_tts_clip(rng, len(keywords))))
        dsp.write_wav(music_dir / f"music_{i:03d}.wav",
                      dsp.AudioBuffer(make_music_clip(rng)))
    return {"corpus": out_dir, "tts": tts_dir, "music": music_dir}
