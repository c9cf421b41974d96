"""Leaky integrate-and-fire dynamics with an arctan surrogate gradient.

One step of the neuron::

    u_new    = tau * u_prev + current
    spike    = 1 if u_new > v_th else 0
    membrane = u_new * (1 - spike)          # hard reset to zero

Backward replaces d(spike)/du with the arctan-family surrogate and treats the
reset path as detached. ``LifConfig(soft=True)`` swaps the forward spike for
its smooth primitive (and keeps the reset attached) so that whole networks can
be checked against finite differences; it is a diagnostic mode only.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .autodiff import Tensor, as_tensor, elementwise, record

__all__ = [
    "LifConfig", "SpikeState", "lif_step", "lif_sequence", "spike_fn",
    "lif_surrogate_backward", "soft_spike",
]


@dataclass(frozen=True)
class LifConfig:
    tau: float = 0.5
    v_th: float = 1.0
    surrogate_width: float = 1.0
    soft: bool = False

    def __post_init__(self):
        if not 0.0 < self.tau <= 1.0:
            raise ValueError(f"tau must lie in (0, 1], got {self.tau}")
        if self.v_th <= 0:
            raise ValueError(f"v_th must be positive, got {self.v_th}")
        if self.surrogate_width <= 0:
            raise ValueError(f"surrogate_width must be positive, got {self.surrogate_width}")

    def with_soft(self, soft: bool = True) -> "LifConfig":
        return replace(self, soft=soft)


@dataclass
class SpikeState:
    membrane: Tensor

    @classmethod
    def zeros(cls, shape) -> "SpikeState":
        return cls(Tensor(np.zeros(shape)))


def lif_surrogate_backward(u, cfg: LifConfig) -> np.ndarray:
    """d(spike)/du stand-in: (1/pi) * w / (w^2 + (u - v_th)^2)."""
    w = cfg.surrogate_width
    d = np.asarray(u, dtype=np.float64) - cfg.v_th
    return (w / np.pi) / (w * w + d * d)


def soft_spike(u, cfg: LifConfig) -> np.ndarray:
    """Smooth primitive of the surrogate, 1/2 + arctan((u - v_th)/w)/pi."""
    return 0.5 + np.arctan((np.asarray(u, dtype=np.float64) - cfg.v_th) / cfg.surrogate_width) / np.pi


def spike_fn(u: Tensor, cfg: LifConfig) -> Tensor:
    u = as_tensor(u)
    out = soft_spike(u.data, cfg) if cfg.soft else (u.data > cfg.v_th).astype(np.float64)
    return record(Tensor(out), (u,), lambda g: (g * lif_surrogate_backward(u.data, cfg),))


def lif_step(state: SpikeState, current: Tensor, cfg: LifConfig) -> tuple[Tensor, SpikeState]:
    """Advance one timestep; returns ``(spikes, new_state)``."""
    current = as_tensor(current)
    if state.membrane.shape != current.shape:
        raise ValueError(f"membrane shape {state.membrane.shape} != input shape {current.shape}")
    u = elementwise("add", elementwise("mul", state.membrane, cfg.tau), current)
    spikes = spike_fn(u, cfg)
    gate = spikes if cfg.soft else spikes.detach()
    membrane = elementwise("mul", u, elementwise("sub", 1.0, gate))
    return spikes, SpikeState(membrane)


def lif_sequence(x: Tensor, cfg: LifConfig) -> Tensor:
    """Run LIF over axis 0 of ``x`` (time) from a zero membrane.

    Numerically identical to chaining :func:`lif_step`, but recorded as a
    single tape node whose backward unrolls the recurrence (BPTT).
    """
    x = as_tensor(x)
    xd = x.data
    steps = xd.shape[0]
    u_hist = np.empty_like(xd)
    s_hist = np.empty_like(xd)
    m = np.zeros(xd.shape[1:])
    for t in range(steps):
        u = m * cfg.tau + xd[t]
        s = soft_spike(u, cfg) if cfg.soft else (u > cfg.v_th).astype(np.float64)
        m = u * (1.0 - s)
        u_hist[t] = u
        s_hist[t] = s

    def fn(g):
        sg = lif_surrogate_backward(u_hist, cfg)
        if cfg.soft:
            dm_du = (1.0 - s_hist) - u_hist * sg
        else:
            dm_du = 1.0 - s_hist
        gx = np.empty_like(g)
        gm = np.zeros(xd.shape[1:])
        for t in range(steps - 1, -1, -1):
            gu = g[t] * sg[t] + gm * dm_du[t]
            gx[t] = gu
            gm = gu * cfg.tau
        return (gx,)

    return record(Tensor(s_hist), (x,), fn)
