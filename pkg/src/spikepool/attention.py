"""Token mixers: spiking self-attention (SSA) and pooling attention.

Both mixers sit behind :class:`AttentionBlock`, which takes and returns the
membrane-valued residual stream ``y[T, B, D, H, W]``:

* pooling kinds:  ``ConvBN(pool(LIF(y))) + y``
* SSA:            ``proj(SSA(LIF(y) as tokens)) + y`` where
  ``SSA = LIF(Q K^T V * alpha)`` with ``Q, K, V = LIF(BN(W x))``.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import GradTape, Tensor, as_tensor, backward
from .layers import BatchNorm, ConvBN, Linear, Module, avgpool2d, maxpool2d, maxpool3d
from .neuron import LifConfig, lif_sequence

__all__ = [
    "ATTENTION_KINDS", "AttentionVariant", "SsaParams", "AttentionBlock",
    "ssa_core", "ssa_forward", "pooling_attention_forward", "pool_tokens",
    "BenchReport", "bench_attention", "token_grid",
]

ATTENTION_KINDS = ("ssa", "pool_max2d", "pool_avg2d", "pool_max3d")


@dataclass(frozen=True)
class AttentionVariant:
    kind: str = "pool_max2d"
    ssa_scale: float = 0.125
    pool_kernel: int = 3
    pool_stride: int = 1
    pool_padding: int = 1
    temporal_kernel: int = 2

    def __post_init__(self):
        if self.kind not in ATTENTION_KINDS:
            raise ValueError(f"unknown attention kind {self.kind!r}; choose from {ATTENTION_KINDS}")

    @property
    def is_pool(self) -> bool:
        return self.kind != "ssa"

    @property
    def shape_preserving(self) -> bool:
        return self.pool_stride == 1 and 2 * self.pool_padding == self.pool_kernel - 1


class SsaParams(Module):
    """Q/K/V and output projections, each a bias-free D x D map followed by BN."""

    def __init__(self, dim: int, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        for name in ("q", "k", "v", "proj"):
            setattr(self, f"{name}_lin", Linear(dim, dim, bias=False, rng=rng))
            setattr(self, f"{name}_bn", BatchNorm(dim))

    def project(self, name: str, x: Tensor, training: bool) -> Tensor:
        lin, bn = getattr(self, f"{name}_lin"), getattr(self, f"{name}_bn")
        lead = x.shape[:-1]
        y = bn(lin(x.reshape(-1, x.shape[-1])), training)
        return y.reshape(lead + (x.shape[-1],))


def ssa_core(q: Tensor, k: Tensor, v: Tensor, alpha: float, lif: LifConfig) -> Tensor:
    """``LIF(Q K^T V * alpha)`` over ``[T, B, N, D]`` with LIF running along T."""
    scores = as_tensor(q) @ as_tensor(k).transpose(0, 1, 3, 2)
    return lif_sequence((scores @ as_tensor(v)) * alpha, lif)


def ssa_forward(x: Tensor, p: SsaParams, lif: LifConfig, alpha: float = 0.125,
                training: bool = True, trace: dict | None = None) -> Tensor:
    """Spiking self-attention on token layout ``x[T, B, N, D]``.

    ``trace``, if given, receives the binary ``q``, ``k``, ``v`` and the
    pre-projection attention output ``attn``.
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise ValueError(f"ssa_forward expects [T,B,N,D], got {x.shape}")
    dim = p.q_lin.weight.shape[1]
    if x.shape[-1] != dim:
        raise ValueError(f"token dim {x.shape[-1]} does not match projection dim {dim}")
    q = lif_sequence(p.project("q", x, training), lif)
    k = lif_sequence(p.project("k", x, training), lif)
    v = lif_sequence(p.project("v", x, training), lif)
    attn = ssa_core(q, k, v, alpha, lif)
    if trace is not None:
        trace.update(q=q, k=k, v=v, attn=attn)
    return p.project("proj", attn, training)


def pool_tokens(z: Tensor, variant: AttentionVariant) -> Tensor:
    """Spatial (or spatio-temporal) pooling of ``z[T, B, D, H, W]``."""
    k, s, pad = variant.pool_kernel, variant.pool_stride, variant.pool_padding
    if variant.kind == "pool_max2d":
        return maxpool2d(z, k, s, pad)
    if variant.kind == "pool_avg2d":
        return avgpool2d(z, k, s, pad)
    if variant.kind == "pool_max3d":
        kt = variant.temporal_kernel
        return maxpool3d(z, (kt, k, k), (1, s, s), ((kt - 1, 0), (pad, pad), (pad, pad)))
    raise ValueError(f"{variant.kind!r} is not a pooling variant")


def pooling_attention_forward(y: Tensor, variant: AttentionVariant, p: ConvBN, lif: LifConfig,
                              training: bool = True, trace: dict | None = None) -> Tensor:
    """``ConvBN(pool(LIF(y))) + y`` on ``y[T, B, D, H, W]``."""
    y = as_tensor(y)
    if y.ndim != 5:
        raise ValueError(f"pooling attention expects [T,B,D,H,W], got {y.shape}")
    if not variant.shape_preserving:
        raise ValueError(
            f"pool geometry k={variant.pool_kernel}, s={variant.pool_stride}, "
            f"p={variant.pool_padding} changes spatial shape; residual add needs it preserved")
    z_lif = lif_sequence(y, lif)
    z_pool = pool_tokens(z_lif, variant)
    branch = p(z_pool, training)
    if trace is not None:
        trace.update(z_lif=z_lif, z_pool=z_pool, branch=branch)
    return branch + y


class AttentionBlock(Module):
    """Residual token mixer over the spatial stream ``[T, B, D, H, W]``."""

    def __init__(self, dim: int, variant: AttentionVariant, lif: LifConfig,
                 rng: np.random.Generator | None = None):
        super().__init__()
        self.variant, self.lif = variant, lif
        if variant.is_pool:
            self.mixer = ConvBN(dim, dim, kernel=1, rng=rng)
        else:
            self.mixer = SsaParams(dim, rng=rng)

    def __call__(self, y: Tensor, training: bool = True, trace: dict | None = None) -> Tensor:
        if self.variant.is_pool:
            return pooling_attention_forward(y, self.variant, self.mixer, self.lif, training, trace)
        T, B, D, H, W = y.shape
        x_b = lif_sequence(y, self.lif)
        tokens = x_b.reshape(T, B, D, H * W).transpose(0, 1, 3, 2)
        out = ssa_forward(tokens, self.mixer, self.lif, self.variant.ssa_scale, training, trace)
        branch = out.transpose(0, 1, 3, 2).reshape(T, B, D, H, W)
        if trace is not None:
            trace["branch"] = branch
        return branch + y


# -- timing ----------------------------------------------------------------

def token_grid(n: int) -> tuple[int, int]:
    """Factor ``n`` tokens into the most square (h, w) grid."""
    h = int(np.sqrt(n))
    while n % h:
        h -= 1
    return h, n // h


@dataclass
class BenchReport:
    n_tokens: int
    dim: int
    timesteps: int
    batch: int
    trials: int
    scope: str
    # kind -> {"forward": (mean_ms, std_ms), "forward_backward": (mean_ms, std_ms)}
    timings: dict = field(default_factory=dict)

    def mean(self, kind: str, phase: str = "forward_backward") -> float:
        return self.timings[kind][phase][0]

    def rows(self) -> list[dict]:
        out = []
        for kind, phases in self.timings.items():
            for phase, (mean, std) in phases.items():
                out.append(dict(variant=kind, scope=self.scope, phase=phase, n=self.n_tokens,
                                d=self.dim, t=self.timesteps, mean_ms=mean, std_ms=std))
        return out


def _mixer_fn(variant: AttentionVariant, dim: int, lif: LifConfig, scope: str, rng):
    """Return ``(inputs, fn)`` where ``fn(*inputs)`` runs the chosen mixer."""
    if scope == "block":
        block = AttentionBlock(dim, variant, lif, rng=rng)
        return block.parameters(), lambda y: block(y, training=True)
    if scope != "core":
        raise ValueError(f"scope must be 'block' or 'core', got {scope!r}")
    if variant.is_pool:
        return [], lambda y: pool_tokens(lif_sequence(y, lif), variant)

    def core(y):
        T, B, D, H, W = y.shape
        tok = lif_sequence(y, lif).reshape(T, B, D, H * W).transpose(0, 1, 3, 2)
        return ssa_core(tok, tok, tok, variant.ssa_scale, lif)

    return [], core


def bench_attention(variant_a: AttentionVariant, variant_b: AttentionVariant,
                    shape: tuple[int, int, int, int], trials: int = 10, warmup: int = 2,
                    seed: int = 0, lif: LifConfig | None = None, scope: str = "block") -> BenchReport:
    """Wall-clock both mixers on identical inputs of shape ``(T, B, N, D)``.

    ``scope="block"`` times the full residual block with its projections;
    ``scope="core"`` times only the token-mixing step (LIF + pool, or
    LIF + Q K^T V), which is where the O(N k^2 D) vs O(N^2 D) gap lives.
    """
    lif = lif or LifConfig()
    T, B, N, D = shape
    h, w = token_grid(N)
    report = BenchReport(N, D, T, B, trials, scope)
    for variant in (variant_a, variant_b):
        rng = np.random.default_rng(seed)
        y = Tensor(rng.normal(0.0, 1.5, size=(T, B, D, h, w)), requires_grad=True)
        params, fn = _mixer_fn(variant, D, lif, scope, np.random.default_rng(seed + 1))
        fwd, fwd_bwd = [], []
        for i in range(warmup + trials):
            t0 = time.perf_counter()
            fn(y)
            t1 = time.perf_counter()
            with GradTape():
                out = fn(y)
                backward(out.sum())
            t2 = time.perf_counter()
            if i >= warmup:
                fwd.append((t1 - t0) * 1e3)
                fwd_bwd.append((t2 - t1) * 1e3)
        label = variant.kind
        report.timings[label] = {
            "forward": (float(np.mean(fwd)), float(np.std(fwd))),
            "forward_backward": (float(np.mean(fwd_bwd)), float(np.std(fwd_bwd))),
        }
    return report
