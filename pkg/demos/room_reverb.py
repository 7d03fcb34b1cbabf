"""Render a room impulse response and check the decay matches the request.

Run: python3 demos/room_reverb.py
"""
import numpy as np

from bargein import fixtures
from bargein.dsp import AudioBuffer
from bargein.roomsim import (apply_playback_path, image_source_rir, measure_t60,
                             sample_room_config)

rng = np.random.default_rng(4)
cfg = sample_room_config(rng)
print(f"room: {cfg.length:.2f} x {cfg.width:.2f} x {cfg.height:.2f} m "
      f"({cfg.area:.1f} m2), requested T60 {cfg.t60:.3f} s")
print(f"source {np.round(cfg.source_pos, 2)}, mic {np.round(cfg.mic_pos, 2)} "
      f"({cfg.mic_pattern}, facing {np.round(cfg.mic_orientation, 2)})")

rir = image_source_rir(cfg)
print(f"rir: {rir.taps.size} taps, direct path at tap {rir.direct_path_delay}")
measured = measure_t60(rir)
print(f"measured T60 {measured:.3f} s ({(measured / cfg.t60 - 1) * 100:+.1f}% "
      f"of request)")

# run a dry clip through the playback path; the tail keeps the reverb decay
dry = AudioBuffer(fixtures.make_tts_clip(rng))
wet = apply_playback_path(dry, rir)
print(f"playback path: {len(dry)} dry samples -> {len(wet)} wet samples")
# the sampled mic faces away from the loudspeaker, so the cardioid null eats
# most of the direct energy and reflections dominate what is left
print(f"wet/dry energy: {np.sum(wet.samples ** 2) / np.sum(dry.samples ** 2):.4f}")
