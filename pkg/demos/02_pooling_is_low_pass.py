"""
Max pooling acts as a low-pass filter on spike maps
===================================================

Spike maps are sparse and binary, so most of their Fourier energy sits at
high spatial frequencies. A 3x3 max pool dilates every spike into a small
block, which moves energy toward the centre of the spectrum. The relative
log amplitude (RLA) summarises this: log amplitude at the highest sampled
frequency minus log amplitude at DC.
"""

import numpy as np

from spikepool.autodiff import Tensor
from spikepool.layers import avgpool2d, maxpool2d
from spikepool.spectral import fft2_logamp, radial_frequency, rla_profile

rng = np.random.default_rng(0)
maps = (rng.random((200, 32, 32)) < 0.05).astype(float)
pooled = maxpool2d(Tensor(maps), 3, 1, 1).data
smoothed = avgpool2d(Tensor(maps), 3, 1, 1).data

high = radial_frequency((32, 32)) >= 0.75
for name, x in (("input", maps), ("max pool", pooled), ("avg pool", smoothed)):
    band = fft2_logamp(x)[:, high].mean()
    print(f"{name:>9}: density {x.astype(bool).mean():.3f}  high-band log-amp {band:.3f}  "
          f"RLA {rla_profile(x).rla:.3f}")

###############################################################################
# A radial profile shows where the energy moved. Radii are in units of pi,
# sampled along the spectrum's diagonal.

prof_in, prof_out = rla_profile(maps), rla_profile(pooled)
for r, a, b in zip(prof_in.radii[::3], prof_in.log_amp[::3], prof_out.log_amp[::3]):
    print(f"r={r:.2f}pi  input {a:6.2f}  pooled {b:6.2f}")

###############################################################################
# Two extremes make the sign convention concrete: a constant map has all of
# its energy at DC, and a checkerboard has all of it at the corner.

i, j = np.indices((16, 16))
print("constant map RLA:", round(rla_profile(np.ones((16, 16))).rla, 1))
print("checkerboard RLA:", round(rla_profile((i + j) % 2 - 0.5).rla, 1))
