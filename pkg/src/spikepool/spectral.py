"""Fourier-domain tools: log-amplitude spectra, RLA profiles, band-limited noise.

Frequencies are expressed in units of pi: the DC bin sits at 0 and the
Nyquist bin at 1. Spectra are centred (``fftshift``) so that DC lies at
index ``(H // 2, W // 2)``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .autodiff import Tensor

__all__ = [
    "AMPLITUDE_FLOOR", "fft2_logamp", "SpectrumProfile", "rla_profile", "diagonal_profile",
    "radial_frequency", "FreqMask", "perturb", "layer_rla_sweep", "write_csv",
    "DEFAULT_BANDS",
]

AMPLITUDE_FLOOR = 1e-12
DEFAULT_BANDS = tuple(round(0.1 * i, 1) for i in range(1, 10))


def _array(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


def fft2_logamp(x) -> np.ndarray:
    """Centred ``log(|F(x)| + floor)`` over the last two axes."""
    x = _array(x)
    if x.shape[-1] < 2 or x.shape[-2] < 2:
        raise ValueError(f"spectrum needs H, W >= 2, got {x.shape[-2:]}")
    amp = np.abs(np.fft.fftshift(np.fft.fft2(x), axes=(-2, -1)))
    return np.log(amp + AMPLITUDE_FLOOR)


@dataclass
class SpectrumProfile:
    radii: np.ndarray
    log_amp: np.ndarray

    @property
    def rla(self) -> float:
        """Log amplitude at 1.0 pi minus log amplitude at 0.0 pi."""
        return float(self.log_amp[-1] - self.log_amp[0])


def diagonal_profile(logamp: np.ndarray, radii: np.ndarray) -> np.ndarray:
    """Sample a centred square spectrum along its main diagonal.

    The two points at equal distance from the centre are averaged (indices
    wrap, so the corner at +pi is the -pi bin), then values between integer
    diagonal steps are interpolated linearly.
    """
    n = logamp.shape[-1]
    c = n // 2
    steps = np.arange(c + 1)
    lo = logamp[..., c - steps, c - steps]
    hi = logamp[..., (c + steps) % n, (c + steps) % n]
    diag = 0.5 * (lo + hi)
    pos = np.asarray(radii) * c
    flat = diag.reshape(-1, c + 1)
    out = np.stack([np.interp(pos, steps, row) for row in flat])
    return out.reshape(diag.shape[:-1] + (len(pos),))


def rla_profile(feature_map, k: int = 16) -> SpectrumProfile:
    """RLA profile of ``feature_map[C, H, W]``: per-channel diagonal samples, channel mean."""
    fm = _array(feature_map)
    if fm.ndim == 2:
        fm = fm[None]
    if fm.ndim != 3:
        raise ValueError(f"expected [C,H,W] feature map, got shape {fm.shape}")
    if fm.shape[-1] != fm.shape[-2]:
        raise ValueError(f"RLA needs square maps, got {fm.shape[-2]}x{fm.shape[-1]}")
    if k < 2:
        raise ValueError("need at least two radial samples")
    radii = np.linspace(0.0, 1.0, k)
    samples = diagonal_profile(fft2_logamp(fm), radii)
    return SpectrumProfile(radii, samples.mean(axis=0))


def radial_frequency(shape: tuple[int, int]) -> np.ndarray:
    """Centred grid of radial frequency (units of pi) for an ``H x W`` spectrum."""
    fy = np.fft.fftshift(np.fft.fftfreq(shape[0])) * 2.0
    fx = np.fft.fftshift(np.fft.fftfreq(shape[1])) * 2.0
    return np.hypot(fy[:, None], fx[None, :])


@dataclass
class FreqMask:
    center: float
    half_width: float
    grid: np.ndarray

    @classmethod
    def band(cls, shape: tuple[int, int], center: float, half_width: float = 0.05) -> "FreqMask":
        r = radial_frequency(shape)
        grid = (np.abs(r - center) <= half_width + 1e-12).astype(np.float64)
        return cls(center, half_width, grid)

    @classmethod
    def full(cls, shape: tuple[int, int]) -> "FreqMask":
        return cls(0.5, np.inf, np.ones(shape))


def perturb(x0, mask: FreqMask, sigma: float, seed: int | np.random.Generator) -> np.ndarray:
    """``x0 + ifft(fft(n) * mask)`` with i.i.d. Gaussian ``n`` of std ``sigma``.

    Works on any ``[..., H, W]`` stack; each map gets its own noise draw.
    """
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    x0 = _array(x0)
    if sigma == 0:
        return x0.copy()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    noise = rng.normal(0.0, sigma, size=x0.shape)
    m = np.fft.ifftshift(mask.grid)
    filtered = np.fft.ifft2(np.fft.fft2(noise) * m)
    return x0 + filtered.real


def layer_rla_sweep(model, inputs, k: int = 16, training: bool = False) -> list[dict]:
    """Mean/std RLA per tapped layer over a batch ``inputs[T, B, C, H, W]``.

    Each sample's map ``[T, D, h, w]`` is treated as ``T*D`` channels.
    """
    x = _array(inputs)
    if x.ndim != 5 or x.shape[1] == 0:
        raise ValueError("layer_rla_sweep needs a non-empty [T,B,C,H,W] batch")
    taps: list = []
    model(Tensor(x), training=training, taps=taps)
    rows = []
    for layer, (tag, fmap) in enumerate(taps, start=1):
        fm = fmap.data
        T, B = fm.shape[:2]
        values = [rla_profile(fm[:, b].reshape((-1,) + fm.shape[-2:]), k).rla for b in range(B)]
        rows.append(dict(layer=layer, tag=tag, mean_rla=float(np.mean(values)),
                         std_rla=float(np.std(values))))
    return rows


def write_csv(path, rows: Sequence[dict], columns: Iterable[str] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = list(columns) if columns is not None else list(rows[0]) if rows else []
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=columns)
        w.writeheader()
        for row in rows:
            w.writerow({c: row[c] for c in columns})
    return path
