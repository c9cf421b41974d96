"""Event streams: binary file format, synthetic generators, voxelization, augmentation."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "EventStream", "VoxelGrid", "SyntheticSpec", "FAMILIES",
    "events_to_bytes", "events_from_bytes", "write_events", "read_events",
    "voxelize", "gen_synthetic", "augment", "random_augment",
    "write_dataset", "read_dataset", "load_voxels", "bar_position",
]

_MAGIC = b"EVTS"
_VERSION = 1
_NO_LABEL = 0xFFFFFFFF
_RECORD = np.dtype([("t", "<u4"), ("x", "<u2"), ("y", "<u2"), ("p", "u1"), ("pad", "u1")])


@dataclass
class EventStream:
    width: int
    height: int
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray
    label: int | None = None

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.int64)
        self.x = np.asarray(self.x, dtype=np.int64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.p = np.asarray(self.p, dtype=np.int64)
        n = len(self.t)
        if not len(self.x) == len(self.y) == len(self.p) == n:
            raise ValueError("event field arrays differ in length")

    def __len__(self) -> int:
        return len(self.t)

    @classmethod
    def empty(cls, width: int, height: int, label: int | None = None) -> "EventStream":
        z = np.zeros(0, dtype=np.int64)
        return cls(width, height, z, z, z, z, label)

    def validate(self) -> None:
        if len(self) == 0:
            return
        if np.any(np.diff(self.t) < 0):
            raise ValueError("event timestamps must be non-decreasing")
        if self.t.min() < 0:
            raise ValueError("negative timestamp")
        if self.x.min() < 0 or self.x.max() >= self.width or self.y.min() < 0 or self.y.max() >= self.height:
            raise ValueError(f"event coordinates fall outside the {self.width}x{self.height} sensor")
        if not np.all((self.p == 0) | (self.p == 1)):
            raise ValueError("polarity must be 0 or 1")

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventStream):
            return NotImplemented
        return (self.width, self.height, self.label) == (other.width, other.height, other.label) and all(
            np.array_equal(getattr(self, f), getattr(other, f)) for f in "txyp")


def events_to_bytes(s: EventStream) -> bytes:
    s.validate()
    label = _NO_LABEL if s.label is None else int(s.label)
    head = _MAGIC + struct.pack("<IHHIQ", _VERSION, s.width, s.height, label, len(s))
    rec = np.zeros(len(s), dtype=_RECORD)
    rec["t"], rec["x"], rec["y"], rec["p"] = s.t, s.x, s.y, s.p
    return head + rec.tobytes()


def events_from_bytes(buf: bytes) -> EventStream:
    if buf[:4] != _MAGIC:
        raise ValueError(f"bad event-file magic {buf[:4]!r}")
    version, width, height, label, count = struct.unpack_from("<IHHIQ", buf, 4)
    if version != _VERSION:
        raise ValueError(f"unsupported event-file version {version}")
    offset = 4 + struct.calcsize("<IHHIQ")
    if len(buf) - offset != count * _RECORD.itemsize:
        raise ValueError("event file length does not match its record count")
    rec = np.frombuffer(buf, dtype=_RECORD, count=count, offset=offset)
    return EventStream(width, height, rec["t"], rec["x"], rec["y"], rec["p"],
                       None if label == _NO_LABEL else label)


def write_events(path, s: EventStream) -> Path:
    path = Path(path)
    path.write_bytes(events_to_bytes(s))
    return path


def read_events(path) -> EventStream:
    return events_from_bytes(Path(path).read_bytes())


# -- voxelization --------------------------------------------------------------

@dataclass
class VoxelGrid:
    """``data[T, 2, H, W]``; channel 0 holds OFF (p=0) events, channel 1 ON."""

    data: np.ndarray
    bin_width: int


def voxelize(s: EventStream, timesteps: int, binarize: bool = True) -> VoxelGrid:
    if timesteps < 1:
        raise ValueError("timesteps must be >= 1")
    grid = np.zeros((timesteps, 2, s.height, s.width))
    if len(s) == 0:
        return VoxelGrid(grid, 1)
    if s.x.min() < 0 or s.x.max() >= s.width or s.y.min() < 0 or s.y.max() >= s.height:
        raise ValueError(f"event coordinates fall outside the {s.width}x{s.height} sensor")
    t0 = int(s.t[0])
    duration = int(s.t[-1]) - t0
    bin_width = max(1, -(-duration // timesteps))
    bins = np.minimum((s.t - t0) // bin_width, timesteps - 1)
    np.add.at(grid, (bins, s.p, s.y, s.x), 1.0)
    if binarize:
        grid = (grid > 0).astype(np.float64)
    return VoxelGrid(grid, bin_width)


# -- synthetic data ------------------------------------------------------------

FAMILIES = {
    "bars4": ("right", "left", "down", "up"),
    "dots-speed": ("slow", "medium", "fast"),
}
_DIRECTIONS = {"right": (1, 0), "left": (-1, 0), "down": (0, 1), "up": (0, -1)}
_SPEEDS = {"slow": 0.25, "medium": 0.5, "fast": 1.0}


@dataclass(frozen=True)
class SyntheticSpec:
    """Built-in synthetic event families.

    ``bars4``: a 1-pixel bar sweeping in one of four directions (class =
    direction). ON events mark the pixel the bar enters, OFF events the pixel
    it leaves. ``dots-speed``: a small square crossing the sensor at one of
    three speeds. ``noise_rate`` adds uniform background events at this many
    events per pixel per bin, for ``timesteps`` bins.
    """

    family: str = "bars4"
    width: int = 64
    height: int = 64
    duration_us: int = 100_000
    noise_rate: float = 0.0
    timesteps: int = 16
    jitter_us: int = 200

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; choose from {sorted(FAMILIES)}")
        if self.noise_rate < 0 or self.duration_us <= 0 or self.timesteps < 1:
            raise ValueError("invalid synthetic spec")

    @property
    def classes(self) -> tuple[str, ...]:
        return FAMILIES[self.family]


def bar_position(t_us, start: float, speed_px_per_us: float, sign: int):
    """Analytic leading-edge coordinate of a bar at time ``t_us``."""
    return start + sign * speed_px_per_us * np.asarray(t_us, dtype=np.float64)


def _bar_events(spec: SyntheticSpec, direction: str, rng: np.random.Generator):
    dx, dy = _DIRECTIONS[direction]
    horizontal = dx != 0
    extent = spec.width if horizontal else spec.height
    across = spec.height if horizontal else spec.width
    sign = dx if horizontal else dy
    travel = int(rng.integers(extent // 2, extent - 4))
    start = int(rng.integers(1, extent - travel)) if sign > 0 else int(rng.integers(travel, extent - 1))
    lo = int(rng.integers(0, across // 3))
    hi = int(rng.integers(2 * across // 3, across))
    speed = travel / spec.duration_us
    ts, xs, ys, ps = [], [], [], []
    rows = np.arange(lo, hi)
    for step in range(1, travel + 1):
        t_nominal = step / speed
        new = start + sign * step
        old = new - sign
        jitter = rng.integers(-spec.jitter_us, spec.jitter_us + 1, size=(2, len(rows)))
        for pos, pol, jit in ((new, 1, jitter[0]), (old, 0, jitter[1])):
            t = np.clip(t_nominal + jit, 0, spec.duration_us - 1)
            ts.append(t)
            ps.append(np.full(len(rows), pol))
            if horizontal:
                xs.append(np.full(len(rows), pos)); ys.append(rows)
            else:
                xs.append(rows); ys.append(np.full(len(rows), pos))
    meta = dict(start=start, speed=speed, sign=sign, horizontal=horizontal, rows=(lo, hi))
    return ts, xs, ys, ps, meta


def _dot_events(spec: SyntheticSpec, speed_class: str, rng: np.random.Generator):
    size = 3
    frac = _SPEEDS[speed_class]
    travel = max(4, int(frac * (spec.width - size - 2)))
    speed = travel / spec.duration_us
    x0 = int(rng.integers(0, spec.width - size - travel))
    y0 = int(rng.integers(0, spec.height - size))
    ts, xs, ys, ps = [], [], [], []
    rows = np.arange(y0, y0 + size)
    for step in range(1, travel + 1):
        t_nominal = step / speed
        jitter = rng.integers(-spec.jitter_us, spec.jitter_us + 1, size=(2, size))
        for col, pol, jit in ((x0 + size - 1 + step, 1, jitter[0]), (x0 + step - 1, 0, jitter[1])):
            ts.append(np.clip(t_nominal + jit, 0, spec.duration_us - 1))
            xs.append(np.full(size, col)); ys.append(rows); ps.append(np.full(size, pol))
    return ts, xs, ys, ps, dict(start=x0, speed=speed)


def _sample(spec: SyntheticSpec, label: int, rng: np.random.Generator) -> EventStream:
    name = spec.classes[label]
    if spec.family == "bars4":
        ts, xs, ys, ps, _ = _bar_events(spec, name, rng)
    else:
        ts, xs, ys, ps, _ = _dot_events(spec, name, rng)
    if spec.noise_rate > 0:
        lam = spec.noise_rate * spec.timesteps * spec.width * spec.height
        k = int(rng.poisson(lam))
        ts.append(rng.integers(0, spec.duration_us, size=k))
        xs.append(rng.integers(0, spec.width, size=k))
        ys.append(rng.integers(0, spec.height, size=k))
        ps.append(rng.integers(0, 2, size=k))
    t = np.concatenate(ts).astype(np.int64) if ts else np.zeros(0, np.int64)
    order = np.argsort(t, kind="stable")
    cat = lambda parts: np.concatenate(parts).astype(np.int64)[order]
    return EventStream(spec.width, spec.height, t[order], cat(xs), cat(ys), cat(ps), label)


def gen_synthetic(spec: SyntheticSpec, n_samples: int, seed: int) -> list[EventStream]:
    """``n_samples`` streams with labels cycling over the classes (exact balance
    when ``n_samples`` is a multiple of the class count)."""
    if n_samples < 0:
        raise ValueError("n_samples must be non-negative")
    n_cls = len(spec.classes)
    children = np.random.SeedSequence(seed).spawn(n_samples)
    return [_sample(spec, i % n_cls, np.random.default_rng(children[i])) for i in range(n_samples)]


# -- augmentation ----------------------------------------------------------------

def augment(grid: VoxelGrid, ops) -> VoxelGrid:
    """Apply ``ops`` in order: ``("hflip",)``, ``("roll", dx, dy)``, ``("rotate90", k)``.

    Every op permutes pixel positions, so event mass is conserved exactly.
    """
    data = grid.data
    for op in ops:
        name = op[0]
        if name == "hflip":
            data = data[..., ::-1]
        elif name == "roll":
            data = np.roll(data, (int(op[2]), int(op[1])), axis=(-2, -1))
        elif name == "rotate90":
            if data.shape[-1] != data.shape[-2]:
                raise ValueError("rotate90 needs a square grid")
            data = np.rot90(data, int(op[1]), axes=(-2, -1))
        else:
            raise ValueError(f"unknown augmentation {name!r}")
    return VoxelGrid(np.ascontiguousarray(data), grid.bin_width)


def random_augment(grid: VoxelGrid, seed: int | np.random.Generator, max_roll: int = 5) -> VoxelGrid:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    ops = []
    if rng.random() < 0.5:
        ops.append(("hflip",))
    dx, dy = rng.integers(-max_roll, max_roll + 1, size=2)
    ops.append(("roll", int(dx), int(dy)))
    if grid.data.shape[-1] == grid.data.shape[-2]:
        ops.append(("rotate90", int(rng.integers(0, 4))))
    return augment(grid, ops)


# -- dataset directories ---------------------------------------------------------

INDEX_NAME = "index.txt"


def write_dataset(directory, streams) -> Path:
    """One ``.evts`` file per sample plus ``index.txt`` of ``<relpath> <label>``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, s in enumerate(streams):
        name = f"sample_{i:05d}.evts"
        write_events(directory / name, s)
        lines.append(f"{name} {-1 if s.label is None else s.label}\n")
    (directory / INDEX_NAME).write_text("".join(lines))
    return directory


def read_dataset(directory) -> list[EventStream]:
    directory = Path(directory)
    index = directory / INDEX_NAME
    if not index.exists():
        raise FileNotFoundError(f"no {INDEX_NAME} in {directory}")
    out = []
    for line in index.read_text().splitlines():
        if not line.strip():
            continue
        rel, label = line.rsplit(maxsplit=1)
        s = read_events(directory / rel)
        if s.label is None and int(label) >= 0:
            s.label = int(label)
        out.append(s)
    return out


def load_voxels(streams, timesteps: int, binarize: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Stack streams into ``X[n, T, 2, H, W]`` and labels ``y[n]``."""
    X = np.stack([voxelize(s, timesteps, binarize).data for s in streams]) if streams else np.zeros((0,))
    y = np.array([-1 if s.label is None else s.label for s in streams], dtype=np.int64)
    return X, y
