"""Spiking transformers with pooling attention, in plain numpy.

The package is a small stack: :mod:`.autodiff` (tensors and a gradient
tape), :mod:`.neuron` (LIF dynamics), :mod:`.layers`, :mod:`.attention`,
:mod:`.model`, plus :mod:`.spectral`, :mod:`.events` and :mod:`.training`
for the experiments around it. ``spikepool.cli`` is the command line.
"""
from .attention import AttentionVariant, bench_attention
from .autodiff import GradTape, Tensor, backward
from .events import EventStream, SyntheticSpec, gen_synthetic, load_voxels, voxelize
from .model import ModelConfig, SpikePool, count_params, load_checkpoint, preset, save_checkpoint
from .neuron import LifConfig, SpikeState, lif_sequence, lif_step
from .spectral import FreqMask, layer_rla_sweep, perturb, rla_profile
from .training import TrainConfig, evaluate, robustness_sweep, train

__version__ = "0.1.0"

__all__ = [
    "AttentionVariant", "bench_attention", "GradTape", "Tensor", "backward", "EventStream",
    "SyntheticSpec", "gen_synthetic", "load_voxels", "voxelize", "ModelConfig", "SpikePool",
    "count_params", "load_checkpoint", "preset", "save_checkpoint", "LifConfig", "SpikeState",
    "lif_sequence", "lif_step", "FreqMask", "layer_rla_sweep", "perturb", "rla_profile",
    "TrainConfig", "evaluate", "robustness_sweep", "train",
]
