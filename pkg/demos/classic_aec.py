"""Cancel a synthetic linear echo with the two classical reference methods.

Run: python3 demos/classic_aec.py
"""
import numpy as np

from bargein.aec import erle_db, nlms_cancel, wiener_oracle_cancel
from bargein.dsp import AudioBuffer

rng = np.random.default_rng(2)
n = 80_000  # 5 s
reference = rng.normal(size=n) * 0.1

# a decaying 200-tap echo path, well inside both methods' filter spans
h = rng.normal(size=200) * np.exp(-np.arange(200) / 60.0)
h *= 0.5 / np.max(np.abs(h))
echo = np.convolve(reference, h)[:n]
speech = rng.normal(size=n) * 0.02
mixture = speech + echo

print(f"echo-to-speech ratio: {10 * np.log10(np.sum(echo**2) / np.sum(speech**2)):.1f} dB")

out = nlms_cancel(AudioBuffer(mixture), AudioBuffer(reference))
print(f"nlms   ERLE: full {erle_db(mixture, out.samples):5.1f} dB, "
      f"second half {erle_db(mixture, out.samples, start=n // 2):5.1f} dB "
      f"(adapts as it goes)")

out = wiener_oracle_cancel(AudioBuffer(mixture), AudioBuffer(reference),
                           AudioBuffer(speech))
print(f"wiener ERLE: full {erle_db(mixture, out.samples):5.1f} dB "
      f"(one shot, needs the clean target to fit against)")

resid = out.samples - speech
print(f"wiener residual echo energy: "
      f"{np.sum(resid**2) / np.sum(echo**2):.2e} of the original echo")
