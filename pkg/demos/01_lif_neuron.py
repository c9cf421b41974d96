"""
Leaky integrate-and-fire neurons
================================

A LIF neuron keeps a membrane potential that leaks by a factor ``tau`` each
step, adds the input current, fires when it crosses ``v_th`` and then resets
to zero. The forward pass is a hard threshold, so training uses a smooth
stand-in for its derivative.
"""

import numpy as np

from spikepool.autodiff import GradTape, Tensor, backward
from spikepool.neuron import LifConfig, SpikeState, lif_sequence, lif_step

# A constant input of 0.6 needs three steps to push the membrane past 1.0:
# 0.6, then 0.5 * 0.6 + 0.6 = 0.9, then 0.5 * 0.9 + 0.6 = 1.05.
cfg = LifConfig(tau=0.5, v_th=1.0)
state = SpikeState.zeros(())
for t in range(6):
    spike, state = lif_step(state, Tensor(0.6), cfg)
    print(f"step {t}: spike={spike.item():.0f} membrane after reset={state.membrane.item():.3f}")

###############################################################################
# The whole sequence can be run at once along the time axis. ``lif_sequence``
# records one tape node and unrolls the recurrence in its backward pass.

currents = Tensor(np.linspace(0.2, 1.4, 8)[:, None] * np.ones((8, 3)), requires_grad=True)
with GradTape():
    spikes = lif_sequence(currents, cfg)
    backward(spikes.sum())
print("spikes per step:", spikes.data[:, 0])
print("surrogate gradient wrt input current:", np.round(currents.grad[:, 0], 4))

###############################################################################
# The surrogate is ``(w / pi) / (w^2 + (u - v_th)^2)``: largest right at the
# threshold and fading away from it. A narrower width sharpens it.

from spikepool.neuron import lif_surrogate_backward  # noqa: E402

u = np.linspace(-1.0, 3.0, 9)
for w in (0.5, 1.0, 2.0):
    print(f"w={w}:", np.round(lif_surrogate_backward(u, LifConfig(surrogate_width=w)), 3))

###############################################################################
# Soft mode replaces the hard spike with the surrogate's own integral so the
# forward pass is smooth. It exists for gradient checks against finite
# differences and is not meant for training.

soft = lif_sequence(Tensor(np.linspace(0.2, 1.4, 8)), cfg.with_soft())
print("soft spikes:", np.round(soft.data, 3))
