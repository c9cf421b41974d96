"""SpikePool / SSA-baseline classifiers, named presets and checkpoints."""
from __future__ import annotations

import io
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .attention import AttentionBlock, AttentionVariant
from .autodiff import Tensor, as_tensor, read_tensor, tensor_to_bytes
from .layers import ConvBN, Linear, Module, maxpool2d
from .neuron import LifConfig, lif_sequence

__all__ = [
    "ModelConfig", "PRESETS", "preset", "SpikePool", "SMLP", "Embedding",
    "count_params", "save_checkpoint", "load_checkpoint", "Checkpoint",
]


@dataclass(frozen=True)
class ModelConfig:
    name: str = "custom"
    depth: int = 2
    dim: int = 128
    timesteps: int = 16
    attention: AttentionVariant = field(default_factory=AttentionVariant)
    in_channels: int = 2
    height: int = 64
    width: int = 64
    num_classes: int = 10
    mlp_ratio: float = 4.0
    lif: LifConfig = field(default_factory=LifConfig)

    def __post_init__(self):
        if self.height % 16 or self.width % 16:
            raise ValueError(f"input {self.height}x{self.width} must be divisible by 16")
        if self.dim % 8:
            raise ValueError(f"dim {self.dim} must be divisible by 8")
        if self.depth < 1 or self.timesteps < 1 or self.num_classes < 1:
            raise ValueError("depth, timesteps and num_classes must be positive")

    @property
    def hidden(self) -> int:
        return int(round(self.mlp_ratio * self.dim))

    @property
    def tokens(self) -> int:
        return (self.height // 16) * (self.width // 16)

    def to_dict(self) -> dict[str, str]:
        """Flat ``key -> str`` view, nested fields as ``attention.kind`` etc."""
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name in ("attention", "lif"):
                for k, v in asdict(value).items():
                    out[f"{f.name}.{k}"] = repr(v) if isinstance(v, float) else str(v)
            else:
                out[f.name] = repr(value) if isinstance(value, float) else str(value)
        return out

    @classmethod
    def from_dict(cls, d: dict[str, str]) -> "ModelConfig":
        d = dict(d)
        nested = {"attention": {}, "lif": {}}
        for key in [k for k in d if "." in k]:
            head, sub = key.split(".", 1)
            if head not in nested:
                raise KeyError(f"unknown config key {key!r}")
            nested[head][sub] = d.pop(key)
        kw = {}
        types = {f.name: f.type for f in fields(cls)}
        for key, value in d.items():
            if key not in types or key in nested:
                raise KeyError(f"unknown config key {key!r}")
            kw[key] = _coerce(value, cls.__dataclass_fields__[key].default)
        attn_defaults = AttentionVariant()
        kw["attention"] = AttentionVariant(**{
            k: _coerce(v, getattr(attn_defaults, k)) for k, v in nested["attention"].items()})
        lif_defaults = LifConfig()
        kw["lif"] = LifConfig(**{k: _coerce(v, getattr(lif_defaults, k)) for k, v in nested["lif"].items()})
        return cls(**kw)


def _coerce(value, like):
    if not isinstance(value, str):
        return value
    if isinstance(like, bool):
        if value.lower() in ("1", "true", "yes"):
            return True
        if value.lower() in ("0", "false", "no"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    return value


PRESETS: dict[str, ModelConfig] = {
    "spikepool-s": ModelConfig("spikepool-s", depth=2, dim=128, timesteps=16),
    "spikepool-b": ModelConfig("spikepool-b", depth=2, dim=256, timesteps=16),
    "spikepool-tiny": ModelConfig("spikepool-tiny", depth=2, dim=64, timesteps=4),
    "ssa-s": ModelConfig("ssa-s", depth=2, dim=128, timesteps=16, attention=AttentionVariant("ssa")),
    "ssa-b": ModelConfig("ssa-b", depth=2, dim=256, timesteps=16, attention=AttentionVariant("ssa")),
    "ssa-tiny": ModelConfig("ssa-tiny", depth=2, dim=64, timesteps=4, attention=AttentionVariant("ssa")),
}


def preset(name: str, **overrides) -> ModelConfig:
    try:
        cfg = PRESETS[name.lower()]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; known: {', '.join(PRESETS)}") from None
    return replace(cfg, **overrides) if overrides else cfg


def _embedding_channels(cfg: ModelConfig) -> list[int]:
    d = cfg.dim
    return [cfg.in_channels, d // 8, d // 4, d // 2, d]


def count_params(cfg: ModelConfig) -> int:
    """Trainable parameter count, computed from the config alone."""
    def conv_bn(cin, cout, k):
        return cin * cout * k * k + 2 * cout

    ch = _embedding_channels(cfg)
    total = sum(conv_bn(a, b, 3) for a, b in zip(ch[:-1], ch[1:]))
    total += conv_bn(cfg.dim, cfg.dim, 3)  # relative position embedding
    d, h = cfg.dim, cfg.hidden
    attn = 4 * (d * d + 2 * d) if cfg.attention.kind == "ssa" else conv_bn(d, d, 1)
    total += cfg.depth * (attn + conv_bn(d, h, 1) + conv_bn(h, d, 1))
    total += d * cfg.num_classes + cfg.num_classes
    return total


def _fold(x: Tensor) -> tuple[Tensor, tuple[int, int]]:
    T, B = x.shape[:2]
    return x.reshape((T * B,) + x.shape[2:]), (T, B)


def _unfold(x: Tensor, tb: tuple[int, int]) -> Tensor:
    return x.reshape(tb + x.shape[1:])


class Embedding(Module):
    """Three Conv-BN-LIF-MaxPool stages, one Conv-BN-MaxPool stage, then RPE."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.lif = cfg.lif
        ch = _embedding_channels(cfg)
        for i in range(4):
            setattr(self, f"stage{i + 1}", ConvBN(ch[i], ch[i + 1], kernel=3, rng=rng))
        self.rpe = ConvBN(cfg.dim, cfg.dim, kernel=3, rng=rng)

    def __call__(self, x: Tensor, training: bool = True) -> Tensor:
        y = as_tensor(x)
        for i in range(3):
            stage = getattr(self, f"stage{i + 1}")
            y = lif_sequence(stage(y, training), self.lif)
            flat, tb = _fold(y)
            y = _unfold(maxpool2d(flat, 2, 2), tb)
        flat, tb = _fold(self.stage4(y, training))
        y2 = _unfold(maxpool2d(flat, 2, 2), tb)
        return self.rpe(y2, training) + y2


class SMLP(Module):
    """``H2 + z`` with ``H1 = ConvBN(LIF(z))`` (D -> hidden), ``H2 = ConvBN(LIF(H1))``."""

    def __init__(self, dim: int, hidden: int, lif: LifConfig, rng: np.random.Generator):
        super().__init__()
        self.lif = lif
        self.fc1 = ConvBN(dim, hidden, kernel=1, rng=rng)
        self.fc2 = ConvBN(hidden, dim, kernel=1, rng=rng)

    def __call__(self, z: Tensor, training: bool = True, trace: dict | None = None) -> Tensor:
        h1 = self.fc1(lif_sequence(z, self.lif), training)
        h2 = self.fc2(lif_sequence(h1, self.lif), training)
        if trace is not None:
            trace.update(h1=h1, h2=h2)
        return h2 + z


class SpikePool(Module):
    """Embedding, ``depth`` x (attention block, S-MLP), rate-decoded linear head.

    Works for every attention kind; ``ModelConfig.attention.kind == "ssa"``
    gives the spiking self-attention baseline.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.config, self.seed = cfg, seed
        rng = np.random.default_rng(seed)
        self.embed = Embedding(cfg, rng)
        for i in range(cfg.depth):
            setattr(self, f"attn{i + 1}", AttentionBlock(cfg.dim, cfg.attention, cfg.lif, rng=rng))
            setattr(self, f"mlp{i + 1}", SMLP(cfg.dim, cfg.hidden, cfg.lif, rng))
        self.head = Linear(cfg.dim, cfg.num_classes, rng=rng)

    def set_soft(self, soft: bool = True) -> None:
        """Switch every LIF in the model to the smooth diagnostic forward."""
        lif = self.config.lif.with_soft(soft)
        self.config = replace(self.config, lif=lif)
        for mod in self._modules():
            if hasattr(mod, "lif"):
                object.__setattr__(mod, "lif", lif)

    def _modules(self):
        stack = [self]
        while stack:
            m = stack.pop()
            yield m
            stack.extend(m._children.values())

    def __call__(self, x: Tensor, training: bool = True, taps: list | None = None) -> Tensor:
        return self.forward(x, training, taps)

    def forward(self, x: Tensor, training: bool = True, taps: list | None = None) -> Tensor:
        """``x[T, B, C, H, W]`` -> logits ``[B, num_classes]``.

        ``taps`` (a list) collects ``(tag, feature_map)`` after the embedding
        and after every attention and MLP block.
        """
        cfg = self.config
        x = as_tensor(x)
        expected = (cfg.timesteps, cfg.in_channels, cfg.height, cfg.width)
        if x.ndim != 5 or (x.shape[0],) + x.shape[2:] != expected:
            raise ValueError(f"input shape {x.shape} does not match config [T,B,C,H,W] = "
                             f"[{expected[0]},B,{expected[1]},{expected[2]},{expected[3]}]")
        y = self.embed(x, training)
        if taps is not None:
            taps.append(("embed", y))
        for i in range(cfg.depth):
            y = getattr(self, f"attn{i + 1}")(y, training)
            if taps is not None:
                taps.append((f"attn{i + 1}", y))
            y = getattr(self, f"mlp{i + 1}")(y, training)
            if taps is not None:
                taps.append((f"mlp{i + 1}", y))
        rates = self.rates(y)
        return self.head(rates)

    def rates(self, y: Tensor) -> Tensor:
        """LIF, then mean over (h, w) and over T: ``[T,B,D,h,w] -> [B, D]``."""
        return lif_sequence(y, self.config.lif).mean(axis=(0, 3, 4))


# -- checkpoints ---------------------------------------------------------------

_CKPT_MAGIC = "SPIKEPOOL-CHECKPOINT 1"


@dataclass
class Checkpoint:
    model: SpikePool
    seed: int
    step: int
    meta: dict


def save_checkpoint(path, model: SpikePool, step: int = 0, extra: dict | None = None) -> Path:
    """Key-value text header, a blank line, then TNSR blobs in header order."""
    path = Path(path)
    names, blobs = [], []
    for name, p in model.named_parameters():
        names.append(name)
        blobs.append(tensor_to_bytes(p.data))
    for name, b in model.named_buffers():
        names.append("buffer:" + name)
        blobs.append(tensor_to_bytes(b))
    header = {"seed": str(model.seed), "step": str(step)}
    header.update({f"config.{k}": v for k, v in model.config.to_dict().items()})
    for k, v in (extra or {}).items():
        header[f"meta.{k}"] = str(v)
    header["tensors"] = ",".join(names)
    text = _CKPT_MAGIC + "\n" + "".join(f"{k}={v}\n" for k, v in header.items()) + "\n"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(text.encode("utf-8"))
        for blob in blobs:
            f.write(blob)
    return path


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    split = raw.find(b"\n\n")
    if not raw.startswith(_CKPT_MAGIC.encode()) or split < 0:
        raise ValueError(f"{path} is not a spikepool checkpoint")
    lines = raw[:split].decode("utf-8").splitlines()[1:]
    header = dict(line.split("=", 1) for line in lines)
    cfg = ModelConfig.from_dict({k[7:]: v for k, v in header.items() if k.startswith("config.")})
    model = SpikePool(cfg, seed=int(header["seed"]))
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    stream = io.BytesIO(raw[split + 2:])
    for name in header["tensors"].split(","):
        arr = read_tensor(stream).data
        if name.startswith("buffer:"):
            target = buffers[name[7:]]
        else:
            target = params[name].data
        if target.shape != arr.shape:
            raise ValueError(f"checkpoint tensor {name} has shape {arr.shape}, model expects {target.shape}")
        target[...] = arr
    meta = {k[5:]: v for k, v in header.items() if k.startswith("meta.")}
    return Checkpoint(model, int(header["seed"]), int(header["step"]), meta)
