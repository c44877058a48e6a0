"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .errors import ConfigError, FlowerError, FormatError, IntegrityError, StageError
from .threads import ENV_VAR, configured_threads

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
log = logging.getLogger("flower_desk")


class UsageError(Exception):
    pass


def _positive(name):
    def parse(text):
        try:
            v = int(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{name} must be an integer, got {text!r}") from None
        if v < 1:
            raise argparse.ArgumentTypeError(f"{name} must be positive, got {v}")
        return v
    return parse


def _announce(**resolved):
    print("resolved: " + json.dumps(resolved, sort_keys=True, default=str), flush=True)


# ----------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    from .toybench import generate_dataset, save_dataset

    keys = tuple(args.embodiments)
    _announce(command="gen-data", seed=args.seed, episodes=args.episodes, out=args.out, embodiments=keys)
    ds = generate_dataset(args.seed, args.episodes, keys)
    path = save_dataset(ds, args.out)
    man = ds.manifest()
    print(f"wrote {path} ({man['total_episodes']} episodes; "
          f"embodiments {', '.join(e['key'] for e in man['embodiments'])})")
    return EXIT_OK


def _experiment_config(args):
    from .trainer.experiment import load_config

    cfg = load_config(args.config)
    if getattr(args, "data", None):
        if not Path(args.data).is_file():
            raise ConfigError(f"dataset file not found: {args.data}")
        cfg.data.path = args.data
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        cfg.train.seed = args.seed
    if getattr(args, "steps", None) is not None:
        cfg.train.steps = args.steps
    return cfg.validate()


def cmd_train(args) -> int:
    from .trainer.experiment import run_experiment

    cfg = _experiment_config(args)
    if args.resume and not Path(args.resume).is_file():
        raise ConfigError(f"checkpoint not found: {args.resume}")
    _announce(command="train", seed=cfg.seed, out_dir=args.out_dir, resume=args.resume, config=cfg.to_dict())
    res = run_experiment(cfg, args.out_dir, resume=args.resume, log=print)
    print(f"final loss {res.final_loss:.6f} after step {res.trainer.step}; "
          f"checkpoint {res.checkpoint}; metrics {res.metrics_path}")
    return EXIT_OK


def _load_ckpt_model(path):
    from .trainer.checkpoint import load_checkpoint

    if not Path(path).is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    ckpt = load_checkpoint(path)
    return ckpt, ckpt.build_model().eval()


def cmd_eval(args) -> int:
    from .toybench.evaluate import ModelPolicy, evaluate

    ckpt, model = _load_ckpt_model(args.ckpt)
    head = args.head or ckpt.manifest.get("train_config", {}).get("head", "flow")
    keys = tuple(args.embodiments)
    _announce(command="eval", seed=args.seed, ckpt=args.ckpt, n=args.n, head=head, embodiments=keys,
              steps=args.steps)
    rep = evaluate(ModelPolicy(model, head, args.steps), keys, args.n, args.seed,
                   args.coverage, args.chain_length, args.chains)
    print(json.dumps(rep.to_dict(), indent=1, sort_keys=True))
    if args.out:
        with open(args.out, "w", newline="") as fh:
            row = rep.flat()
            w = csv.DictWriter(fh, fieldnames=list(row), lineterminator="\n")
            w.writeheader()
            w.writerow(row)
    return EXIT_OK


def cmd_sample(args) -> int:
    import numpy as np

    from .numerics import SeededRng
    from .toybench.evaluate import START_CENTER, ModelPolicy, Observation, mode_coverage
    from .toybench.world import ToyWorld, embodiment

    emb = embodiment(args.embodiment)
    ckpt, model = _load_ckpt_model(args.ckpt)
    desc = model.registry.resolve(emb.name)
    steps = args.steps or desc.default_steps
    _announce(command="sample", seed=args.seed, ckpt=args.ckpt, task=args.task, embodiment=emb.key,
              n=args.n, steps=steps, out=args.out)
    policy = ModelPolicy(model, "flow", steps)
    world = ToyWorld(emb, args.n)
    world.reset(np.tile(START_CENTER, (args.n, 1)))
    obs = Observation(world, np.arange(args.n), [args.task] * args.n, world.observe(), world.proprio())
    chunks = policy.plan(obs, SeededRng(args.seed, 401))
    out = Path(args.out)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample", "t"] + [f"a{i}" for i in range(desc.action_dim)])
        for i in range(chunks.shape[0]):
            for t in range(chunks.shape[1]):
                w.writerow([i, t] + [f"{v:.9g}" for v in chunks[i, t]])
    print(f"wrote {out} ({args.n} chunks of {desc.chunk_len} x {desc.action_dim})")
    if args.n >= 50:
        hist = mode_coverage(policy, emb, args.task, args.n, SeededRng(args.seed, 402))
        print("mode histogram: " + json.dumps({"over": hist["over"], "under": hist["under"]}))
        print(f"collisions {hist['collision']}, unclassified {hist['none']}")
    return EXIT_OK


def cmd_audit(args) -> int:
    from .audit import (
        PAPER_FLOW_BLOCKS,
        compare_adaln,
        controller_projection_count,
        count_model,
        flop_estimate,
        paper_scale_model,
    )

    if args.paper_scale:
        _announce(command="audit", paper_scale=True)
        model = paper_scale_model()
        budget = count_model(model)
        print(budget.table("paper-scale flow side (shape-only instantiation)"))
        print()
        print(f"Global-AdaLN shared projection: {controller_projection_count(model):,}")
        cmp = compare_adaln(model.cfg.n_layers, model.cfg.dim, len(model.registry.descriptors),
                            model.cfg.lora_rank, model.cfg.heads, blocks_params=PAPER_FLOW_BLOCKS)
        print(cmp.table())
        verdict = "meets" if cmp.relative_savings >= 0.20 else "misses"
        print(f"savings {100 * cmp.relative_savings:.2f}% {verdict} the 20% bar")
        csv_text = budget.csv()
    else:
        if not args.config:
            raise UsageError("audit needs --config or --paper-scale")
        from .trainer.experiment import audit_config, load_config

        cfg = load_config(args.config)
        _announce(command="audit", seed=cfg.seed, config=args.config)
        live, closed = audit_config(cfg)
        print(live.table("desk model (introspection)"))
        match = live.components == closed.components
        print(f"closed form total {closed.total:,}: {'matches' if match else 'DIFFERS FROM'} introspection")
        fl = flop_estimate(cfg.encoder)
        print(f"encoder depth {fl.depth}/{fl.n_layers}, multiply ratio {fl.ratio:.4f}")
        csv_text = live.csv()
        if not match:
            return EXIT_RUNTIME
    if args.csv:
        Path(args.csv).write_text(csv_text)
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .trainer.experiment import run_sweep

    cfg = _experiment_config(args)
    if not cfg.sweep:
        raise ConfigError(f"{args.config} has no [sweep] section")
    _announce(command="sweep", seed=cfg.seed, out_dir=args.out_dir, config=cfg.to_dict())
    rows = run_sweep(cfg, args.out_dir, log=print)
    for r in rows:
        print(f"arm {r['arm']}: {r['axis']}={r['value']} loss {r['final_loss']:.5f} flop_ratio {r['flop_ratio']:.3f}")
    print(f"wrote {Path(args.out_dir) / 'sweep.csv'}")
    return EXIT_OK


# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flower-desk", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate an expert dataset (FTOY)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--episodes", type=_positive("--episodes"), default=200, help="episodes per embodiment")
    g.add_argument("--out", default="toybench.ftoy")
    g.add_argument("--embodiments", nargs="+", default=["A", "B", "C"], choices=["A", "B", "C"])
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train from a TOML config")
    t.add_argument("--config", required=True)
    t.add_argument("--data", help="FTOY dataset; overrides [data] in the config")
    t.add_argument("--out-dir", default="runs/train")
    t.add_argument("--resume", help="FLWR checkpoint to continue from")
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=_positive("--steps"))
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="roll out a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--n", type=_positive("--n"), default=50, help="rollouts per embodiment")
    e.add_argument("--embodiments", nargs="+", default=["A", "B", "C"], choices=["A", "B", "C"])
    e.add_argument("--head", choices=["flow", "l1_regression"])
    e.add_argument("--steps", type=_positive("--steps"))
    e.add_argument("--coverage", type=int, default=0, help="mode-coverage samples (0 to skip)")
    e.add_argument("--chain-length", type=int, default=0)
    e.add_argument("--chains", type=int, default=0)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", help="write the flat report as CSV")
    e.set_defaults(fn=cmd_eval)

    s = sub.add_parser("sample", help="sample action chunks and a mode histogram")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--task", choices=["red", "blue"], default="red")
    s.add_argument("--embodiment", choices=["A", "B", "C"], default="A")
    s.add_argument("--n", type=_positive("--n"), default=200)
    s.add_argument("--steps", type=_positive("--steps"), help="Euler steps (default 4, or 8 for bimanual)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="samples.csv")
    s.set_defaults(fn=cmd_sample)

    a = sub.add_parser("audit", help="parameter budget tables")
    a.add_argument("--config")
    a.add_argument("--paper-scale", action="store_true")
    a.add_argument("--csv", help="also write the budget as CSV")
    a.set_defaults(fn=cmd_audit)

    w = sub.add_parser("sweep", help="run one experiment per value of an ablation axis")
    w.add_argument("--config", required=True)
    w.add_argument("--data")
    w.add_argument("--out-dir", default="runs/sweep")
    w.add_argument("--seed", type=int)
    w.add_argument("--steps", type=_positive("--steps"))
    w.set_defaults(fn=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        threads = configured_threads()
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if threads is not None:
        log.info("%s=%d", ENV_VAR, threads)
    try:
        return args.fn(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (FormatError, IntegrityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except FlowerError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
