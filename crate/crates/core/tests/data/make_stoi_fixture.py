"""Regenerates the STOI reference pair with pystoi as the oracle.

    python3 make_stoi_fixture.py
"""
import json

import numpy as np
from pystoi import stoi
from scipy.io import wavfile

RATE = 16000
rng = np.random.default_rng(2024)
t = np.arange(3 * RATE) / RATE
f0 = 120 + 25 * np.sin(2 * np.pi * 0.5 * t)
phase = 2 * np.pi * np.cumsum(f0) / RATE
voiced = sum(np.sin(h * phase) / h for h in range(1, 15))
envelope = np.maximum(np.sin(2 * np.pi * 2.5 * t), 0) ** 2
clean = 0.3 * voiced * envelope
noise = rng.standard_normal(len(t))
noise *= np.sqrt(np.sum(clean**2) / np.sum(noise**2))  # 0 dB
degraded = clean + noise

clean = clean.astype(np.float32)
degraded = degraded.astype(np.float32)
wavfile.write("stoi_clean.wav", RATE, clean)
wavfile.write("stoi_degraded.wav", RATE, degraded)
ref = {
    "rate": RATE,
    "stoi": float(stoi(clean.astype(np.float64), degraded.astype(np.float64), RATE)),
    "stoi_self": float(stoi(clean.astype(np.float64), clean.astype(np.float64), RATE)),
}
with open("stoi_reference.json", "w") as f:
    json.dump(ref, f, indent=2)
    f.write("\n")
print(ref)
