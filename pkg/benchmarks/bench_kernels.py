"""Compare the numba and numpy kernel backends.

Times each fused kernel on desk-sized rows, then one full training step of
the desk flow model, under both backends. Run from the repo root:

    python3 benchmarks/bench_kernels.py [--repeat 50]

``FLOWER_DESK_KERNELS`` only picks the start-up backend; this script switches
explicitly so both appear in one table.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from flower_desk.numerics import kernels


def _kernel_cases(rows, dim, rng):
    x = rng.standard_normal((rows, dim)).astype(np.float32)
    g = rng.standard_normal((rows, dim)).astype(np.float32)
    gain = np.ones(dim, np.float32)
    _, inv = kernels._np_rms_norm_fwd(x, gain, 1e-6)
    y = kernels._np_softmax_fwd(x)
    _, s = kernels._np_silu_fwd(x)
    p = rng.standard_normal(rows * dim).astype(np.float32)
    m, v = np.zeros_like(p), np.zeros_like(p)
    flat_g = g.ravel()
    return {
        "rms_norm_fwd": lambda: kernels.rms_norm_fwd(x, gain, 1e-6),
        "rms_norm_bwd": lambda: kernels.rms_norm_bwd(g, x, gain, inv),
        "softmax_bwd": lambda: kernels.softmax_bwd(g, y),
        "silu_bwd": lambda: kernels.silu_bwd(g, x, s),
        "adamw": lambda: kernels.adamw(p, flat_g, m, v, 1e-4, 0.9, 0.95, 1e-8, 0.01, 0.5, 0.5),
    }


def _train_step_case():
    from flower_desk.rectified_flow import TrainingBatch, sample_time
    from flower_desk.trainer.experiment import load_config
    from flower_desk.trainer.loop import train_step
    from flower_desk.trainer.optim import AdamW, ScheduleSpec
    from flower_desk.context import tokenize_batch
    from flower_desk.flow_transformer import FlowModel
    from flower_desk.numerics import SeededRng
    from flower_desk.toybench import EMBODIMENTS, generate_dataset
    from pathlib import Path

    cfg = load_config(Path(__file__).resolve().parents[1] / "configs" / "desk.toml")
    emb = EMBODIMENTS["A"]
    ds = generate_dataset(0, 4, ("A",))
    arr = ds.arrays("A")
    batch = 32
    idx = np.arange(batch) % len(arr.prompts)
    model = FlowModel(cfg.model, cfg.encoder, [emb.descriptor], seed=0).train()
    opt = AdamW(model.param_groups(), cfg.optim, ScheduleSpec(10_000))
    seq = tokenize_batch([arr.prompts[i] for i in idx], arr.grids[idx], model.enc_cfg)
    actions = ds.stats["A"].normalize(arr.chunks[idx]).astype(np.float32)
    rng = SeededRng(0)

    def step():
        bundle = model.context(seq, emb.name, None)
        noise = rng.normal(actions.shape).astype(np.float32)
        tb = TrainingBatch(actions, None, noise, sample_time("logit_normal", rng, batch), emb.name)
        train_step(model, tb, opt, "flow", bundle)

    return step


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=32 * 64)
    ap.add_argument("--dim", type=int, default=128)
    ap.add_argument("--repeat", type=int, default=50)
    ap.add_argument("--steps", type=int, default=5, help="train steps timed per backend")
    args = ap.parse_args(argv)

    backends = ["numpy"] + (["numba"] if kernels.HAVE_NUMBA else [])
    results = {}
    for name in backends:
        kernels.set_backend(name)
        cases = _kernel_cases(args.rows, args.dim, np.random.default_rng(0))
        for label, fn in cases.items():
            fn()  # compile / warm caches
            results[(label, name)] = min(timeit.repeat(fn, number=args.repeat, repeat=3)) / args.repeat
        step = _train_step_case()
        step()
        results[("train_step(desk, B=32)", name)] = min(timeit.repeat(step, number=args.steps, repeat=2)) / args.steps

    labels = list(dict.fromkeys(k[0] for k in results))
    print(f"rows={args.rows} dim={args.dim}")
    print(f"{'kernel':<24}" + "".join(f"{b:>12}" for b in backends) + ("     speedup" if len(backends) > 1 else ""))
    for label in labels:
        times = [results[(label, b)] for b in backends]
        line = f"{label:<24}" + "".join(f"{t * 1e3:>10.3f}ms" for t in times)
        if len(times) > 1:
            line += f"{times[0] / times[1]:>11.2f}x"
        print(line)


if __name__ == "__main__":
    main()
