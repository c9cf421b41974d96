"""Loss, AdamW, BPTT training loop, evaluation and the robustness sweep."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import GradTape, Tensor, as_tensor, backward, record
from .model import ModelConfig, SpikePool, save_checkpoint
from .spectral import DEFAULT_BANDS, FreqMask, perturb

__all__ = [
    "TrainConfig", "RunRecord", "EpochStats", "cross_entropy", "AdamW", "AdamState",
    "adamw_step", "lr_at", "train", "evaluate", "predict", "robustness_sweep",
    "confusion_matrix", "time_iterations",
]

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 0.01
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    epochs: int = 30
    batch_size: int = 16
    seed: int = 0
    lr_schedule: str = "cosine"

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not all(0 <= b < 1 for b in self.betas):
            raise ValueError("betas must lie in [0, 1)")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean of ``-log softmax(logits)[label]`` over the batch."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    B, K = logits.shape
    if labels.shape != (B,):
        raise ValueError(f"expected {B} labels, got shape {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= K:
        raise ValueError(f"labels must lie in [0, {K})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(B)
    loss = np.mean(logsum - z[rows, labels])

    def fn(g):
        p = np.exp(z - logsum[:, None])
        p[rows, labels] -= 1.0
        return (g * p / B,)

    return record(Tensor(loss), (logits,), fn)


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adamw_step(params, grads, state: AdamState, lr: float, betas=(0.9, 0.999),
               eps: float = 1e-8, weight_decay: float = 0.0) -> AdamState:
    """One decoupled-weight-decay Adam update, in place on ``params``' data."""
    params = list(params)
    grads = list(grads)
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ValueError(f"grad shape {g.shape} does not match param shape {p.data.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


class AdamW:
    def __init__(self, params, cfg: TrainConfig):
        self.params = list(params)
        self.cfg = cfg
        self.state = AdamState()

    def step(self, lr: float | None = None) -> None:
        cfg = self.cfg
        adamw_step(self.params, [p.grad for p in self.params], self.state,
                   cfg.lr if lr is None else lr, cfg.betas, cfg.eps, cfg.weight_decay)


def lr_at(cfg: TrainConfig, step: int, total_steps: int) -> float:
    if cfg.lr_schedule == "constant" or total_steps <= 1:
        return cfg.lr
    return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_acc: float
    test_acc: float
    iter_time_ms: float


@dataclass
class RunRecord:
    epochs: list[EpochStats] = field(default_factory=list)
    first_batch_loss: float = float("nan")
    checkpoint: Path | None = None
    model: SpikePool | None = None

    @property
    def final_test_acc(self) -> float:
        return self.epochs[-1].test_acc if self.epochs else float("nan")

    @property
    def best_test_acc(self) -> float:
        return max((e.test_acc for e in self.epochs), default=float("nan"))

    def write_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "train_loss", "train_acc", "test_acc", "iter_time_ms"])
            for e in self.epochs:
                w.writerow([e.epoch, repr(e.train_loss), repr(e.train_acc), repr(e.test_acc),
                            f"{e.iter_time_ms:.3f}"])
        return path


def predict(model: SpikePool, X: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Arg-max class per sample of ``X[n, T, C, H, W]`` (inference-mode BN)."""
    preds = []
    for i in range(0, len(X), batch_size):
        xb = np.ascontiguousarray(np.swapaxes(X[i:i + batch_size], 0, 1))
        preds.append(model(Tensor(xb), training=False).data.argmax(axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate(model: SpikePool, X: np.ndarray, y: np.ndarray, batch_size: int = 32) -> float:
    if len(X) == 0:
        raise ValueError("cannot evaluate on an empty set")
    return float(np.mean(predict(model, X, batch_size) == y))


def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return cm


def train(model_cfg: ModelConfig, train_data, test_data, cfg: TrainConfig,
          out_dir=None, target_accuracy: float | None = None,
          model: SpikePool | None = None) -> RunRecord:
    """BPTT training: each batch unrolls all T steps on one tape, one backward.

    ``train_data``/``test_data`` are ``(X[n,T,C,H,W], y[n])`` arrays. With
    ``target_accuracy`` set, training stops after the first epoch whose test
    accuracy reaches it. Writes ``run_record.csv`` and ``model.ckpt`` when
    ``out_dir`` is given.
    """
    X, y = train_data
    Xt, yt = test_data
    expected = (model_cfg.timesteps, model_cfg.in_channels, model_cfg.height, model_cfg.width)
    for name, arr in (("train", X), ("test", Xt)):
        if arr.ndim != 5 or arr.shape[1:] != expected:
            raise ValueError(f"{name} data shape {arr.shape[1:]} does not match model input {expected}")
    if len(X) == 0:
        raise ValueError("empty training set")

    model = model if model is not None else SpikePool(model_cfg, seed=cfg.seed)
    opt = AdamW(model.parameters(), cfg)
    rng = np.random.default_rng(cfg.seed)
    n_batches = math.ceil(len(X) / cfg.batch_size)
    total_steps = n_batches * cfg.epochs
    record_ = RunRecord(model=model)
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(X))
        losses, correct, times = [], 0, []
        for b in range(n_batches):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            xb = Tensor(np.ascontiguousarray(np.swapaxes(X[idx], 0, 1)))
            t0 = time.perf_counter()
            model.zero_grad()
            with GradTape():
                logits = model(xb, training=True)
                loss = cross_entropy(logits, y[idx])
                backward(loss)
            opt.step(lr_at(cfg, step, total_steps))
            times.append(time.perf_counter() - t0)
            step += 1
            if epoch == 1 and b == 0:
                record_.first_batch_loss = loss.item()
            losses.append(loss.item() * len(idx))
            correct += int(np.sum(logits.data.argmax(axis=1) == y[idx]))
        test_acc = evaluate(model, Xt, yt) if len(Xt) else float("nan")
        stats = EpochStats(epoch, float(np.sum(losses) / len(X)), correct / len(X), test_acc,
                           1e3 * float(np.mean(times)))
        record_.epochs.append(stats)
        log.info("epoch %d loss %.4f train %.3f test %.3f (%.0f ms/iter)", epoch,
                 stats.train_loss, stats.train_acc, stats.test_acc, stats.iter_time_ms)
        if target_accuracy is not None and test_acc >= target_accuracy:
            break
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        record_.write_csv(out_dir / "run_record.csv")
        record_.checkpoint = save_checkpoint(out_dir / "model.ckpt", model, step=step)
    return record_


def time_iterations(model: SpikePool, X: np.ndarray, y: np.ndarray, iterations: int = 50,
                    warmup: int = 5, batch_size: int = 16) -> tuple[float, float]:
    """Mean and std (ms) of forward+backward iterations after ``warmup`` untimed ones."""
    xb = Tensor(np.ascontiguousarray(np.swapaxes(X[:batch_size], 0, 1)))
    yb = y[:batch_size]
    times = []
    for i in range(warmup + iterations):
        t0 = time.perf_counter()
        with GradTape():
            backward(cross_entropy(model(xb, training=True), yb))
        if i >= warmup:
            times.append((time.perf_counter() - t0) * 1e3)
    return float(np.mean(times)), float(np.std(times))


def robustness_sweep(model: SpikePool, X: np.ndarray, y: np.ndarray, band_centers=DEFAULT_BANDS,
                     sigma: float = 0.5, seed: int = 0, half_width: float = 0.05) -> list[dict]:
    """Accuracy under band-limited Gaussian noise added to every frame.

    One row per band: ``band_center, sigma, accuracy`` (plus clean accuracy).
    """
    clean = evaluate(model, X, y)
    rows = []
    for i, center in enumerate(band_centers):
        mask = FreqMask.band(X.shape[-2:], center, half_width)
        Xp = perturb(X, mask, sigma, np.random.default_rng([seed, i]))
        rows.append(dict(band_center=float(center), sigma=float(sigma),
                         accuracy=evaluate(model, Xp, y), clean_accuracy=clean))
    return rows
