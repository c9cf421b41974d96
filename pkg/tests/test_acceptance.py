"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line in ``RESULTS``; the summary is printed at
the end of the pytest session (see ``conftest.py``) and when this file is run
directly with ``python tests/test_acceptance.py``. Measured magnitudes
(timings, RLA values, accuracies) are written as CSV under
``$SPIKEPOOL_ACCEPTANCE_OUT`` (default: a pytest temp directory).
"""
import math
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from oracles import dft2, numeric_grad, rel_err, scalar_lif  # noqa: E402

from spikepool.attention import AttentionVariant, bench_attention  # noqa: E402
from spikepool.autodiff import (  # noqa: E402
    GradTape, Tensor, backward, elementwise, exp, log, matmul, reduce, relu, stack,
)
from spikepool.events import (  # noqa: E402
    SyntheticSpec, events_from_bytes, events_to_bytes, gen_synthetic, load_voxels,
)
from spikepool.layers import (  # noqa: E402
    avgpool2d, batchnorm, conv2d, linear, maxpool2d, maxpool3d,
)
from spikepool.model import SpikePool, count_params, preset  # noqa: E402
from spikepool.neuron import LifConfig, SpikeState, lif_sequence, lif_step  # noqa: E402
from spikepool.spectral import (  # noqa: E402
    FreqMask, fft2_logamp, layer_rla_sweep, perturb, radial_frequency, write_csv,
)
from spikepool.training import TrainConfig, cross_entropy, robustness_sweep, train  # noqa: E402

RESULTS: dict[int, str] = {}


def report(n: int, ok: bool, detail: str) -> None:
    RESULTS[n] = f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}"
    print(RESULTS[n])


@pytest.fixture(scope="session")
def out_dir(tmp_path_factory):
    path = os.environ.get("SPIKEPOOL_ACCEPTANCE_OUT")
    d = Path(path) if path else tmp_path_factory.mktemp("acceptance")
    d.mkdir(parents=True, exist_ok=True)
    return d


# -- 1 ---------------------------------------------------------------------------

def test_criterion_1_param_counts():
    t0 = time.perf_counter()
    s, b = count_params(preset("spikepool-s")), count_params(preset("spikepool-b"))
    dt = time.perf_counter() - t0
    ok = 0.495e6 <= s <= 0.605e6 and 1.97e6 <= b <= 2.41e6 and dt < 1.0
    report(1, ok, f"SpikePool-S {s / 1e6:.3f}M, SpikePool-B {b / 1e6:.3f}M ({dt * 1e3:.1f} ms)")
    assert ok


# -- 2 ---------------------------------------------------------------------------

def _op_cases(rng):
    """``name -> (inputs, fn)`` generators: ``fn`` maps Tensors to a Tensor."""
    pos = lambda *s: rng.uniform(0.5, 2.0, size=s)
    nrm = lambda *s: rng.normal(size=s)
    rm, rv = nrm(3), pos(3)
    return {
        "add": lambda: ([nrm(3, 4), nrm(4)], lambda a, b: elementwise("add", a, b)),
        "sub": lambda: ([nrm(3, 4), nrm(3, 1)], lambda a, b: elementwise("sub", a, b)),
        "mul": lambda: ([nrm(3, 4), nrm(4)], lambda a, b: elementwise("mul", a, b)),
        "div": lambda: ([nrm(3, 4), pos(3, 4)], lambda a, b: elementwise("div", a, b)),
        "matmul": lambda: ([nrm(2, 3, 4), nrm(4, 2)], matmul),
        "sum": lambda: ([nrm(3, 4)], lambda a: reduce("sum", a, 1)),
        "mean": lambda: ([nrm(3, 4)], lambda a: reduce("mean", a, 0)),
        "max": lambda: ([nrm(3, 4)], lambda a: reduce("max", a, 1)),
        "exp": lambda: ([nrm(3, 4)], exp),
        "log": lambda: ([pos(3, 4)], log),
        "relu": lambda: ([nrm(3, 4)], relu),
        "reshape_transpose": lambda: ([nrm(2, 6)], lambda a: a.reshape(3, 4).transpose(1, 0)),
        "stack": lambda: ([nrm(2, 3), nrm(2, 3)], lambda a, b: stack([a, b], 1)),
        "conv2d": lambda: ([nrm(1, 2, 4, 4), nrm(3, 2, 3, 3)], lambda x, w: conv2d(x, w, padding=1)),
        "batchnorm_train": lambda: ([nrm(4, 3, 2), pos(3), nrm(3)],
                                    lambda x, g, b: batchnorm(x, g, b, rm.copy(), rv.copy(), True)),
        "batchnorm_eval": lambda: ([nrm(4, 3, 2), pos(3), nrm(3)],
                                   lambda x, g, b: batchnorm(x, g, b, rm.copy(), rv.copy(), False)),
        "maxpool2d": lambda: ([nrm(2, 5, 5)], lambda x: maxpool2d(x, 3, 1, 1)),
        "avgpool2d": lambda: ([nrm(2, 4, 4)], lambda x: avgpool2d(x, 2, 2)),
        "maxpool3d": lambda: ([nrm(3, 1, 2, 3, 3)], maxpool3d),
        "linear": lambda: ([nrm(3, 4), nrm(5, 4), nrm(5)], linear),
        "lif_soft": lambda: ([nrm(4, 3) + 0.8], lambda x: lif_sequence(x, LifConfig(soft=True))),
        "cross_entropy": lambda: ([nrm(4, 5) * 3], lambda z: cross_entropy(z, [0, 4, 2, 2]).reshape(1)),
    }


def _end_to_end_soft(kind: str) -> float:
    rng = np.random.default_rng(3)
    cfg = preset("spikepool-tiny", timesteps=2, height=32, width=32, num_classes=4,
                 attention=AttentionVariant(kind=kind))
    model = SpikePool(cfg, seed=1)
    model.set_soft()
    x = Tensor(rng.random((2, 2, 2, 32, 32)))
    y = np.array([0, 3])
    params = model.parameters()
    with GradTape():
        backward(cross_entropy(model(x, training=True), y))
    worst = 0.0
    for p in params:
        g = p.grad.copy()
        idx = rng.choice(p.size, size=min(p.size, 4), replace=False)
        num = numeric_grad(lambda: cross_entropy(model(x, training=True), y).item(), p.data, index=idx)
        worst = max(worst, rel_err(g.reshape(-1)[idx], num.reshape(-1)[idx]))
    return worst


def test_criterion_2_gradient_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_op, worst_name = 0.0, ""
    cases = _op_cases(rng)
    for name, make in cases.items():
        for _ in range(50):
            arrays, fn = make()
            tensors = [Tensor(a, requires_grad=True) for a in arrays]
            up = rng.normal(size=fn(*[Tensor(a) for a in arrays]).shape)
            with GradTape():
                backward((fn(*tensors) * up).sum())
            for t in tensors:
                g = t.grad.copy()
                num = numeric_grad(lambda: (fn(*[Tensor(tt.data) for tt in tensors]).data * up).sum(), t.data)
                err = rel_err(g, num)
                if err > worst_op:
                    worst_op, worst_name = err, name
    e2e = max(_end_to_end_soft("pool_max2d"), _end_to_end_soft("ssa"))
    dt = time.perf_counter() - t0
    ok = worst_op < 1e-4 and e2e < 1e-3 and dt < 300
    report(2, ok, f"{len(cases)} ops x 50 cases, worst per-op rel err {worst_op:.2e} ({worst_name}); "
                  f"soft-mode end-to-end {e2e:.2e} ({dt:.1f} s)")
    assert ok


# -- 3 ---------------------------------------------------------------------------

def test_criterion_3_lif_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    mismatches, resets = 0, 0
    for _ in range(10_000):
        tau, v_th = rng.uniform(0.05, 1.0), rng.uniform(0.1, 2.0)
        n = int(rng.integers(1, 17))
        seq = rng.uniform(-0.5 * v_th, 1.5 * v_th, size=n)
        ref_s, _, ref_final = scalar_lif(seq.tolist(), tau, v_th)
        cfg = LifConfig(tau=tau, v_th=v_th)
        state = SpikeState.zeros(())
        got = []
        for x in seq:
            s, state = lif_step(state, Tensor(x), cfg)
            got.append(float(s.data))
        fused = lif_sequence(Tensor(seq), cfg).data.tolist()
        resets += int(sum(ref_s))
        if got != ref_s or fused != ref_s or float(state.membrane.data) != ref_final:
            mismatches += 1
    dt = time.perf_counter() - t0
    ok = mismatches == 0 and dt < 60
    report(3, ok, f"10000 cases, {mismatches} mismatches, {resets} resets exercised ({dt:.1f} s)")
    assert ok


# -- 4 ---------------------------------------------------------------------------

def test_criterion_4_spectral_identities():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    rt, pv = 0.0, 0.0
    for _ in range(20):
        x = rng.normal(size=(8, 8))
        rt = max(rt, np.max(np.abs(np.fft.ifft2(np.fft.fft2(x)).real - x)) / np.max(np.abs(x)))
        F = dft2(x)
        pv = max(pv, abs(np.sum(np.abs(F) ** 2) / 64 - np.sum(x ** 2)) / np.sum(x ** 2))
        # the library's spectrum agrees with the direct transform too
        ref = np.log(np.abs(np.fft.fftshift(F)) + 1e-12)
        rt = max(rt, np.max(np.abs(fft2_logamp(x) - ref)) / np.max(np.abs(ref)))
    x0 = rng.normal(size=(2, 16, 16))
    leak = 0.0
    for center in (0.2, 0.5, 0.8):
        mask = FreqMask.band((16, 16), center, 0.1)
        delta = perturb(x0, mask, 1.0, 11) - x0
        for c in range(2):
            P = np.abs(np.fft.fftshift(dft2(delta[c]))) ** 2
            leak = max(leak, P[mask.grid == 0].sum() / P.sum())
    ident = np.array_equal(perturb(x0, FreqMask.band((16, 16), 0.5), 0.0, 11), x0)
    dt = time.perf_counter() - t0
    ok = rt < 1e-10 and pv < 1e-10 and leak < 1e-9 and ident and dt < 60
    report(4, ok, f"round trip {rt:.1e}, Parseval {pv:.1e}, band leakage {leak:.1e}, "
                  f"sigma=0 identity {ident} ({dt:.1f} s)")
    assert ok


# -- 5 ---------------------------------------------------------------------------

def test_criterion_5_pooling_low_pass():
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    high = radial_frequency((32, 32)) >= 0.75
    a_in, a_out = [], []
    for _ in range(200):
        x = (rng.random((32, 32)) < 0.05).astype(float)
        y = maxpool2d(Tensor(x), 3, 1, 1).data
        a_in.append(fft2_logamp(x)[high].mean())
        a_out.append(fft2_logamp(y)[high].mean())
    a_in, a_out = np.array(a_in), np.array(a_out)
    frac = float(np.mean(a_out < a_in))
    dt = time.perf_counter() - t0
    ok = a_out.mean() < a_in.mean() and frac >= 0.95 and dt < 60
    report(5, ok, f"high-band mean log-amp in {a_in.mean():.3f} -> out {a_out.mean():.3f}, "
                  f"{frac:.1%} of maps lower ({dt:.1f} s)")
    assert ok


# -- 6 and 8 share the trained models ----------------------------------------------

TARGET = 0.90


@pytest.fixture(scope="session")
def toy_runs(out_dir):
    streams = gen_synthetic(SyntheticSpec("bars4", timesteps=4, noise_rate=0.0), 300, seed=1)
    X, y = load_voxels(streams, 4)
    data = ((X[:200], y[:200]), (X[200:], y[200:]))
    runs = {}
    for name in ("spikepool-tiny", "ssa-tiny"):
        cfg = preset(name, num_classes=4)
        t0 = time.perf_counter()
        rec = train(cfg, *data, TrainConfig(epochs=30, seed=1), out_dir=out_dir / name,
                    target_accuracy=TARGET)
        runs[name] = (rec, time.perf_counter() - t0)
    return runs, data


def test_criterion_6_toy_training(toy_runs):
    runs, _ = toy_runs
    sp, sp_t = runs["spikepool-tiny"]
    ssa, ssa_t = runs["ssa-tiny"]
    ok = sp.best_test_acc >= 0.90 and sp_t < 600 and ssa.best_test_acc >= 0.85
    report(6, ok, f"SpikePool-tiny test acc {sp.final_test_acc:.2f} after {len(sp.epochs)} epoch(s) "
                  f"in {sp_t:.0f} s; SSA-tiny {ssa.final_test_acc:.2f} after {len(ssa.epochs)} epoch(s) "
                  f"in {ssa_t:.0f} s (first-batch loss {sp.first_batch_loss:.3f}, ln 4 = {math.log(4):.3f})")
    assert ok


def test_criterion_8_rla_contrast(toy_runs, out_dir):
    runs, (_, (Xt, _)) = toy_runs
    inputs = np.ascontiguousarray(np.swapaxes(Xt, 0, 1))
    means = {}
    for name, (rec, _) in runs.items():
        rows = layer_rla_sweep(rec.model, inputs)
        write_csv(out_dir / f"layer_rla_{name}.csv", rows, ["layer", "tag", "mean_rla", "std_rla"])
        means[name] = float(np.mean([r["mean_rla"] for r in rows if r["tag"].startswith("attn")]))
    ok = means["spikepool-tiny"] < means["ssa-tiny"]
    report(8, ok, f"mean attention-tap RLA SpikePool-tiny {means['spikepool-tiny']:.3f} vs "
                  f"SSA-tiny {means['ssa-tiny']:.3f} (lower expected for SpikePool)")
    assert ok


# -- 7 ---------------------------------------------------------------------------

def test_criterion_7_speed_direction(out_dir):
    t0 = time.perf_counter()
    ssa, pool = AttentionVariant("ssa"), AttentionVariant("pool_max2d")
    at256 = bench_attention(ssa, pool, (4, 1, 256, 256), trials=10, warmup=3, scope="block")
    faster = at256.mean("pool_max2d") < at256.mean("ssa")
    ns = (64, 128, 256, 512)
    reports = [bench_attention(ssa, pool, (4, 1, n, 256), trials=20, warmup=5, scope="core") for n in ns]
    rows = at256.rows() + [r for rep in reports for r in rep.rows()]
    write_csv(out_dir / "bench_attn.csv", rows)
    logn = np.log(ns)
    slope = {k: float(np.polyfit(logn, np.log([r.mean(k) for r in reports]), 1)[0])
             for k in ("ssa", "pool_max2d")}
    gap = slope["ssa"] - slope["pool_max2d"]
    dt = time.perf_counter() - t0
    ok = faster and gap >= 0.5 and dt < 300
    report(7, ok, f"N=256 block fwd+bwd pool {at256.mean('pool_max2d'):.1f} ms vs SSA "
                  f"{at256.mean('ssa'):.1f} ms; core log-log slope SSA {slope['ssa']:.2f}, "
                  f"pool {slope['pool_max2d']:.2f}, gap {gap:.2f} ({dt:.0f} s)")
    assert ok


# -- 9 ---------------------------------------------------------------------------

def test_criterion_9_harness_identities(toy_runs, tmp_path):
    runs, (_, (Xt, yt)) = toy_runs
    model = runs["spikepool-tiny"][0].model
    sweep = robustness_sweep(model, Xt, yt, sigma=0.0)
    sweep_ok = all(r["accuracy"] == r["clean_accuracy"] for r in sweep)

    streams = gen_synthetic(SyntheticSpec("bars4", noise_rate=0.01), 20, seed=9)
    rt_ok = all(events_to_bytes(events_from_bytes(events_to_bytes(s))) == events_to_bytes(s)
                and events_from_bytes(events_to_bytes(s)) == s for s in streams)

    small = gen_synthetic(SyntheticSpec("bars4", width=32, height=32, timesteps=4), 24, seed=2)
    X, y = load_voxels(small, 4)
    cfg = preset("spikepool-tiny", height=32, width=32, num_classes=4)
    blobs = []
    for run in ("a", "b"):
        train(cfg, (X[:16], y[:16]), (X[16:], y[16:]), TrainConfig(epochs=2, batch_size=8, seed=5),
              out_dir=tmp_path / run)
        blobs.append((tmp_path / run / "model.ckpt").read_bytes())
    repro_ok = blobs[0] == blobs[1]
    ok = sweep_ok and rt_ok and repro_ok
    report(9, ok, f"sigma=0 sweep equals clean on {len(sweep)} bands: {sweep_ok}; event round trip "
                  f"bit-exact: {rt_ok}; two fixed-seed trainings bit-identical: {repro_ok}")
    assert ok


if __name__ == "__main__":
    code = pytest.main([__file__, "-q", "-p", "no:cacheprovider"])
    sys.exit(code)
