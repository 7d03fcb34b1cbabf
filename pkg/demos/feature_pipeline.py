"""Walk a clip through the front end: frames, spectrogram, log-mel features.

Run: python3 demos/feature_pipeline.py
"""
import numpy as np

from bargein import dsp, fixtures
from bargein.dsp import AudioBuffer

rng = np.random.default_rng(0)
audio = AudioBuffer(fixtures.make_keyword_clip(1, rng))
print(f"clip: {len(audio)} samples @ {dsp.SAMPLE_RATE} Hz "
      f"({len(audio) / dsp.SAMPLE_RATE:.2f} s)")

spec = dsp.stft(audio, window_len=512, hop=128)
print(f"stft 512/128 sqrt-hann: {spec.n_frames} frames x {spec.n_bins} bins")

# analysis-synthesis is transparent away from the edges
back = dsp.istft(spec)
n = min(len(audio), len(back))
err = np.linalg.norm(back.samples[512:n - 512] - audio.samples[512:n - 512])
err /= np.linalg.norm(audio.samples[512:n - 512])
print(f"istft(stft(x)) interior rel err: {err:.2e}")

# the classifier front end uses a 25 ms / 10 ms grid and 64 mel bands
feats = dsp.lfbe(audio)
print(f"lfbe: {feats.n_frames} frames x {feats.values.shape[1]} mel bands")
print(f"value range: [{feats.values.min():.2f}, {feats.values.max():.2f}] "
      f"(log power, floored at log {dsp.ENERGY_FLOOR:g})")

fb = dsp.mel_filterbank()
print(f"filterbank: {fb.shape[0]} triangles x {fb.shape[1]} bins, "
      f"rows sum to {fb.sum(axis=1).min():.3f}..{fb.sum(axis=1).max():.3f}")
