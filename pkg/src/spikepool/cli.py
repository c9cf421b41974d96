"""``spikepool`` command line: data generation, training, evaluation, analysis."""
from __future__ import annotations

import argparse
import configparser
import logging
import os
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from .attention import AttentionVariant, bench_attention
from .events import SyntheticSpec, gen_synthetic, load_voxels, read_dataset, write_dataset
from .model import ModelConfig, count_params, load_checkpoint, preset
from .spectral import DEFAULT_BANDS, layer_rla_sweep, write_csv
from .training import TrainConfig, confusion_matrix, predict, robustness_sweep, train

log = logging.getLogger("spikepool")

SECTIONS = {
    "model": {"preset", "name", "depth", "dim", "timesteps", "attention", "num_classes", "mlp_ratio",
              "height", "width", "in_channels", "tau", "v_th", "surrogate_width", "ssa_scale",
              "pool_kernel", "pool_stride", "pool_padding", "temporal_kernel"},
    "data": {"spec", "n_samples", "n_train", "noise", "seed", "train_dir", "test_dir"},
    "train": {f.name for f in fields(TrainConfig)} | {"target_accuracy"},
    "analysis": {"bands", "sigma", "radii", "half_width"},
}


class ConfigError(ValueError):
    pass


def _env_seed(default: int) -> int:
    value = os.environ.get("SPIKEPOOL_SEED")
    return int(value) if value not in (None, "") else default


def load_experiment(path) -> configparser.ConfigParser:
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise FileNotFoundError(f"config file {path} not found")
    for section in cp.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        unknown = set(cp[section]) - SECTIONS[section]
        if unknown:
            raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")
    return cp


def model_config_from(section, num_classes: int | None = None) -> ModelConfig:
    s = dict(section) if section is not None else {}
    base = preset(s.pop("preset")) if "preset" in s else ModelConfig()
    attn_keys = {"ssa_scale", "pool_kernel", "pool_stride", "pool_padding", "temporal_kernel"}
    lif_keys = {"tau", "v_th", "surrogate_width"}
    attn = {"kind": s.pop("attention")} if "attention" in s else {}
    attn.update({k: s.pop(k) for k in list(s) if k in attn_keys})
    lif = {k: s.pop(k) for k in list(s) if k in lif_keys}
    flat = base.to_dict()
    flat.update({f"attention.{k}": v for k, v in attn.items()})
    flat.update({f"lif.{k}": v for k, v in lif.items()})
    flat.update(s)
    if num_classes is not None and "num_classes" not in s:
        flat["num_classes"] = str(num_classes)
    return ModelConfig.from_dict(flat)


def train_config_from(section, seed: int) -> tuple[TrainConfig, float | None]:
    s = dict(section) if section is not None else {}
    target = float(s.pop("target_accuracy")) if "target_accuracy" in s else None
    kw = {}
    for key, value in s.items():
        if key == "betas":
            kw[key] = tuple(float(v) for v in value.replace(",", " ").split())
        elif key == "lr_schedule":
            kw[key] = value
        elif key in ("epochs", "batch_size", "seed"):
            kw[key] = int(value)
        else:
            kw[key] = float(value)
    kw["seed"] = _env_seed(kw.get("seed", seed))
    return TrainConfig(**kw), target


def _model_section(cfg: ModelConfig) -> dict[str, str]:
    """Inverse of :func:`model_config_from` (explicit fields, no preset)."""
    out = {}
    for key, value in cfg.to_dict().items():
        if key == "lif.soft":
            continue
        if key == "attention.kind":
            key = "attention"
        out[key.split(".")[-1]] = value
    return out


def _parse_bands(text: str) -> tuple[float, ...]:
    return tuple(float(b) for b in text.replace(",", " ").split())


# -- commands --------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    spec = SyntheticSpec(args.spec, width=args.width, height=args.height, noise_rate=args.noise,
                         timesteps=args.timesteps)
    seed = _env_seed(args.seed)
    streams = gen_synthetic(spec, args.n, seed)
    out = write_dataset(args.workdir / args.out, streams)
    print(f"wrote {len(streams)} samples to {out}")
    return 0


def _data_from_config(cp, model_cfg: ModelConfig):
    timesteps = model_cfg.timesteps
    d = cp["data"] if cp.has_section("data") else {}
    if "train_dir" in d:
        train_s = read_dataset(d["train_dir"])
        test_s = read_dataset(d["test_dir"]) if "test_dir" in d else []
    else:
        spec = SyntheticSpec(d.get("spec", "bars4"), width=model_cfg.width, height=model_cfg.height,
                             noise_rate=float(d.get("noise", 0.0)), timesteps=timesteps)
        n = int(d.get("n_samples", 300))
        n_train = int(d.get("n_train", 2 * n // 3))
        streams = gen_synthetic(spec, n, _env_seed(int(d.get("seed", 1))))
        train_s, test_s = streams[:n_train], streams[n_train:]
    n_cls = int(max(s.label for s in train_s + test_s)) + 1
    return load_voxels(train_s, timesteps), load_voxels(test_s, timesteps), n_cls


def cmd_train(args) -> int:
    cp = load_experiment(args.config)
    pre = model_config_from(cp["model"] if cp.has_section("model") else None)
    train_xy, test_xy, n_cls = _data_from_config(cp, pre)
    model_cfg = model_config_from(cp["model"] if cp.has_section("model") else None, n_cls)
    tcfg, target = train_config_from(cp["train"] if cp.has_section("train") else None, 0)
    out = args.workdir / (args.out or f"runs/{model_cfg.name}")
    out.mkdir(parents=True, exist_ok=True)

    resolved = configparser.ConfigParser()
    resolved["model"] = _model_section(model_cfg)
    resolved["data"] = dict(cp["data"]) if cp.has_section("data") else {}
    if "train_dir" not in resolved["data"]:
        resolved["data"]["seed"] = str(_env_seed(int(resolved["data"].get("seed", 1))))
    resolved["train"] = {f.name: (" ".join(map(repr, tcfg.betas)) if f.name == "betas"
                                  else str(getattr(tcfg, f.name))) for f in fields(TrainConfig)}
    if target is not None:
        resolved["train"]["target_accuracy"] = str(target)
    if cp.has_section("analysis"):
        resolved["analysis"] = dict(cp["analysis"])
    with open(out / "config.resolved.ini", "w") as f:
        resolved.write(f)

    record = train(model_cfg, train_xy, test_xy, tcfg, out_dir=out, target_accuracy=target)
    last = record.epochs[-1] if record.epochs else None
    if last is not None:
        print(f"epochs={len(record.epochs)} train_loss={last.train_loss:.4f} "
              f"train_acc={last.train_acc:.4f} test_acc={last.test_acc:.4f}")
    print(f"run directory: {out}")
    return 0


def _load(args):
    ckpt = load_checkpoint(args.workdir / args.checkpoint)
    streams = read_dataset(args.workdir / args.data)
    X, y = load_voxels(streams, ckpt.model.config.timesteps)
    return ckpt.model, X, y


def cmd_eval(args) -> int:
    model, X, y = _load(args)
    pred = predict(model, X)
    acc = float(np.mean(pred == y))
    cm = confusion_matrix(y, pred, model.config.num_classes)
    out = args.workdir / (args.out or Path(args.checkpoint).parent / "confusion.csv")
    rows = [{"true": i, **{f"pred_{j}": int(cm[i, j]) for j in range(cm.shape[1])}}
            for i in range(cm.shape[0])]
    write_csv(out, rows)
    print(f"accuracy={acc:.6f}")
    return 0


def _analysis(args) -> dict:
    """``[analysis]`` values from ``--config``; explicit flags win."""
    if not getattr(args, "config", None):
        return {}
    cp = load_experiment(args.workdir / args.config)
    return dict(cp["analysis"]) if cp.has_section("analysis") else {}


def cmd_rla(args) -> int:
    model, X, _ = _load(args)
    radii = args.radii if args.radii is not None else int(_analysis(args).get("radii", 16))
    rows = layer_rla_sweep(model, np.ascontiguousarray(np.swapaxes(X, 0, 1)), k=radii)
    path = write_csv(args.workdir / args.out, rows, ["layer", "tag", "mean_rla", "std_rla"])
    for r in rows:
        print(f"{r['layer']} {r['tag']} {r['mean_rla']:.4f}")
    print(f"wrote {path}")
    return 0


def cmd_perturb_sweep(args) -> int:
    model, X, y = _load(args)
    a = _analysis(args)
    bands = _parse_bands(args.bands if args.bands is not None else
                         a.get("bands", " ".join(map(str, DEFAULT_BANDS))))
    sigma = args.sigma if args.sigma is not None else float(a.get("sigma", 0.5))
    half_width = args.half_width if args.half_width is not None else float(a.get("half_width", 0.05))
    rows = robustness_sweep(model, X, y, bands, sigma, _env_seed(args.seed), half_width)
    path = write_csv(args.workdir / args.out, rows, ["band_center", "sigma", "accuracy"])
    for r in rows:
        print(f"band={r['band_center']:.2f} sigma={r['sigma']:g} accuracy={r['accuracy']:.4f} "
              f"(clean {r['clean_accuracy']:.4f})")
    print(f"wrote {path}")
    return 0


def cmd_bench_attn(args) -> int:
    report = bench_attention(AttentionVariant("ssa"), AttentionVariant(args.pool),
                             (args.t, args.b, args.n, args.d), trials=args.trials,
                             seed=_env_seed(0), scope=args.scope)
    rows = report.rows()
    for r in rows:
        print(f"{r['variant']:<11} {r['phase']:<17} N={r['n']} D={r['d']} T={r['t']} "
              f"mean={r['mean_ms']:.3f}ms std={r['std_ms']:.3f}ms")
    if args.out:
        write_csv(args.workdir / args.out, rows)
    return 0


def cmd_param_count(args) -> int:
    cfg = preset(args.preset)
    if args.num_classes is not None:
        cfg = replace(cfg, num_classes=args.num_classes)
    n = count_params(cfg)
    print(f"{cfg.name}: {n} parameters ({n / 1e6:.2f}M)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spikepool", description=__doc__)
    p.add_argument("--workdir", type=Path, default=Path("."), help="base directory for relative paths")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic event dataset")
    g.add_argument("--spec", default="bars4")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=100)
    g.add_argument("--noise", type=float, default=0.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--timesteps", type=int, default=16, help="bins used to scale --noise")
    g.add_argument("--width", type=int, default=64)
    g.add_argument("--height", type=int, default=64)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--out", help="run directory (default runs/<model name>)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="accuracy and confusion matrix of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("rla", help="layer-wise relative log amplitude")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--out", default="layer_rla.csv")
    r.add_argument("--radii", type=int, help="radial samples K (default 16)")
    r.add_argument("--config", help="experiment file whose [analysis] section supplies defaults")
    r.set_defaults(func=cmd_rla)

    s = sub.add_parser("perturb-sweep", help="accuracy under band-limited noise")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--bands", help="band centres in units of pi (default 0.1 ... 0.9)")
    s.add_argument("--sigma", type=float, help="noise std (default 0.5)")
    s.add_argument("--half-width", type=float, help="band half-width (default 0.05)")
    s.add_argument("--config", help="experiment file whose [analysis] section supplies defaults")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="perturb_sweep.csv")
    s.set_defaults(func=cmd_perturb_sweep)

    b = sub.add_parser("bench-attn", help="time SSA against pooling attention")
    b.add_argument("--n", type=int, default=256)
    b.add_argument("--d", type=int, default=256)
    b.add_argument("--t", type=int, default=4)
    b.add_argument("--b", type=int, default=1)
    b.add_argument("--trials", type=int, default=10)
    b.add_argument("--pool", default="pool_max2d", choices=["pool_max2d", "pool_avg2d", "pool_max3d"])
    b.add_argument("--scope", default="block", choices=["block", "core"])
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench_attn)

    c = sub.add_parser("param-count", help="parameter count of a preset")
    c.add_argument("--preset", required=True)
    c.add_argument("--num-classes", type=int)
    c.set_defaults(func=cmd_param_count)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # one-line diagnostic, nonzero exit
        print(f"spikepool {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
