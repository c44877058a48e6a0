"""Config-driven experiments: dataset, training, evaluation and reports.

Config files are TOML with the sections ``[data]``, ``[model]``,
``[encoder]``, ``[train]``, ``[optim]`` (with ``[optim.flow]`` and
``[optim.encoder]``), ``[eval]`` and optionally ``[sweep]``. Every key is
optional; unknown keys are rejected. See ``configs/`` for examples.
"""
from __future__ import annotations

import copy
import csv
import dataclasses
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from ..audit import closed_form_budget, count_model, flop_estimate
from ..context import ContextEncoderConfig
from ..errors import ConfigError, FlowerError, StageError
from ..flow_transformer import FlowModel, FlowTransformerConfig
from ..toybench import dataset as toydata
from ..toybench.evaluate import ModelPolicy, evaluate
from ..toybench.world import EMBODIMENTS, embodiment
from .checkpoint import load_checkpoint, restore_trainer, save_checkpoint
from .loop import TrainConfig, Trainer
from .optim import GroupConfig, OptimizerConfig

METRIC_FIELDS = [
    "step", "embodiment", "loss", "grad_norm", "lr_flow", "lr_enc",
    "success_A", "success_B", "success_C", "accuracy_A", "accuracy_B", "accuracy_C",
    "mode_over", "mode_under", "mode_collision", "chain_length",
]
SWEEP_FIELDS = [
    "arm", "axis", "value", "steps", "final_loss", "params", "encoder_depth", "flop_ratio",
    "success_A", "success_B", "success_C", "accuracy_A", "accuracy_B", "accuracy_C",
    "mode_over", "mode_under", "mode_collision", "seconds",
]
SWEEP_AXES = {
    "fusion_mode": ("encoder", "fusion_mode"),
    "prune_fraction": ("encoder", "prune_fraction"),
    "rho": ("encoder", "prune_fraction"),
    "head": ("train", "head"),
    "adaln": ("model", "adaln"),
    "freeze_encoder": ("train", "freeze_encoder"),
}


@dataclass
class DataConfig:
    episodes: int = 200
    path: str = ""
    embodiments: list = field(default_factory=lambda: ["A", "B", "C"])


@dataclass
class EvalConfig:
    rollouts: int = 50
    coverage_samples: int = 0
    chain_length: int = 0
    n_chains: int = 0
    steps: int = 0  # Euler steps; 0 selects the per-type default


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: FlowTransformerConfig = field(default_factory=FlowTransformerConfig)
    encoder: ContextEncoderConfig = field(default_factory=ContextEncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    optim: OptimizerConfig = field(default_factory=OptimizerConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    sweep: dict = field(default_factory=dict)

    def validate(self) -> "ExperimentConfig":
        self.model.validate()
        self.encoder.validate()
        self.train.validate()
        self.optim.validate()
        if self.data.episodes < 1 and not self.data.path:
            raise ConfigError("data.episodes must be positive")
        for k in self.data.embodiments:
            try:
                embodiment(k)
            except KeyError:
                raise ConfigError(f"unknown embodiment {k!r}") from None
        if self.sweep:
            axis = self.sweep.get("axis")
            if axis not in SWEEP_AXES:
                raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {sorted(SWEEP_AXES)}")
            if not self.sweep.get("values"):
                raise ConfigError("sweep.values must list at least one value")
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["train"] = self.train.to_dict()
        return d


def _build(cls, section: dict, where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(section) - names)
    if unknown:
        raise ConfigError(f"[{where}] unknown keys: {', '.join(unknown)}")
    try:
        return cls(**section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}] {exc}") from None


def config_from_dict(raw: dict) -> ExperimentConfig:
    raw = copy.deepcopy(raw)
    top = {"name", "seed", "data", "model", "encoder", "train", "optim", "eval", "sweep"}
    unknown = sorted(set(raw) - top)
    if unknown:
        raise ConfigError(f"unknown top-level keys: {', '.join(unknown)}")
    optim = raw.get("optim", {})
    groups = {}
    for g, default in (("flow", OptimizerConfig().flow), ("encoder", OptimizerConfig().encoder)):
        merged = dataclasses.asdict(default)
        merged.update(optim.pop(g, {}))
        groups[g] = _build(GroupConfig, merged, f"optim.{g}")
    if "betas" in optim:
        optim["betas"] = tuple(optim["betas"])
    opt = _build(OptimizerConfig, {**optim, **groups}, "optim")
    train = raw.get("train", {})
    if "phases" in train:
        train["phases"] = tuple(train["phases"])
    seed = int(raw.get("seed", 0))
    train.setdefault("seed", seed)
    cfg = ExperimentConfig(
        name=str(raw.get("name", "experiment")),
        seed=seed,
        data=_build(DataConfig, raw.get("data", {}), "data"),
        model=_build(FlowTransformerConfig, raw.get("model", {}), "model"),
        encoder=_build(ContextEncoderConfig, raw.get("encoder", {}), "encoder"),
        train=_build(TrainConfig, train, "train"),
        optim=opt,
        eval=_build(EvalConfig, raw.get("eval", {}), "eval"),
        sweep=dict(raw.get("sweep", {})),
    )
    return cfg.validate()


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = tomllib.loads(path.read_text(encoding="utf-8"))
    except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"{path}: cannot parse config ({exc})") from None
    return config_from_dict(raw)


def with_override(cfg: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    section, key = SWEEP_AXES[axis]
    out = copy.deepcopy(cfg)
    out.sweep = {}
    target = getattr(out, section)
    if not hasattr(target, key):
        raise ConfigError(f"sweep axis {axis!r} does not map to a config field")
    setattr(target, key, value)
    return out.validate()


# ----------------------------------------------------------------------------
# running


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    model: FlowModel
    trainer: Trainer
    report: object
    final_loss: float
    checkpoint: Path | None
    metrics_path: Path | None
    seconds: float


def build_model(cfg: ExperimentConfig, keys) -> FlowModel:
    descs = [EMBODIMENTS[embodiment(k).key].descriptor for k in keys]
    return FlowModel(cfg.model, cfg.encoder, descs, seed=cfg.seed)


def _stage(name, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except StageError:
        raise
    except ConfigError:
        raise
    except (FlowerError, ValueError, KeyError, OSError, ArithmeticError, RuntimeError) as exc:
        raise StageError(name, exc) from exc


def _load_data(cfg: ExperimentConfig, dataset=None):
    if dataset is not None:
        return dataset
    if cfg.data.path:
        ds = toydata.load_dataset(cfg.data.path)
        keep = [embodiment(k).key for k in cfg.data.embodiments]
        if set(keep) != set(ds.keys):
            ds = toydata.ToyDataset(ds.seed, ds.episodes_per_embodiment,
                                    [e for e in ds.episodes if e.embodiment in keep],
                                    {k: ds.stats[k] for k in keep}, tuple(keep))
        return ds
    return toydata.generate_dataset(cfg.seed, cfg.data.episodes, tuple(cfg.data.embodiments))


def run_experiment(cfg: ExperimentConfig | str | Path, out_dir=None, dataset=None, resume=None,
                   log=None, evaluate_policy: bool = True) -> ExperimentResult:
    """dataset -> train -> eval -> reports. Writes metrics.csv and checkpoint.flwr to ``out_dir``."""
    if not isinstance(cfg, ExperimentConfig):
        cfg = load_config(cfg)
    log = log or (lambda msg: None)
    t0 = time.perf_counter()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    ds = _stage("data", _load_data, cfg, dataset)
    model = _stage("model", build_model, cfg, ds.keys)
    trainer = _stage("model", Trainer, model, ds, cfg.train, cfg.optim)
    if resume is not None:
        _stage("resume", lambda: restore_trainer(trainer, load_checkpoint(resume)))
        log(f"resumed from {resume} at step {trainer.step}")

    rows = []
    window = []

    def on_step(rec):
        window.append(rec.loss)
        if rec.step % cfg.train.log_every == 0 or rec.step == cfg.train.steps:
            rows.append({"step": rec.step, "embodiment": rec.embodiment, "loss": sum(window) / len(window),
                         "grad_norm": rec.grad_norm, "lr_flow": rec.lr_flow, "lr_enc": rec.lr_enc})
            log(f"step {rec.step:>6}  loss {rows[-1]['loss']:.5f}  lr_flow {rec.lr_flow:.3g}")
            window.clear()

    _stage("train", trainer.run, None, on_step)
    final_loss = trainer.recent_loss(50)

    report = None
    if evaluate_policy and cfg.eval.rollouts > 0:
        policy = ModelPolicy(model, cfg.train.head, cfg.eval.steps or None, cfg.train.time_dist)
        report = _stage("eval", evaluate, policy, tuple(ds.keys), cfg.eval.rollouts, cfg.seed,
                        cfg.eval.coverage_samples, cfg.eval.chain_length, cfg.eval.n_chains)
        row = {"step": trainer.step, "loss": final_loss}
        for k, v in report.flat().items():
            if k in METRIC_FIELDS:
                row[k] = v
        rows.append(row)
        log(f"eval: {report.flat()}")

    ckpt = mpath = None
    if out is not None:
        def write():
            path = out / "metrics.csv"
            new = not (resume is not None and path.exists())
            with open(path, "w" if new else "a", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS, lineterminator="\n")
                if new:
                    w.writeheader()
                for r in rows:
                    w.writerow(r)
            return path
        mpath = _stage("report", write)
        ckpt = _stage("report", save_checkpoint, out / "checkpoint.flwr", model, trainer,
                      {"experiment": cfg.name})
    return ExperimentResult(cfg, model, trainer, report, final_loss, ckpt, mpath, time.perf_counter() - t0)


def run_sweep(cfg: ExperimentConfig | str | Path, out_dir, dataset=None, log=None) -> list[dict]:
    """One experiment per value of ``sweep.axis``; writes sweep.csv with one row per arm."""
    if not isinstance(cfg, ExperimentConfig):
        cfg = load_config(cfg)
    if not cfg.sweep:
        raise ConfigError("config has no [sweep] section")
    log = log or (lambda msg: None)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    axis = cfg.sweep["axis"]
    ds = _stage("data", _load_data, cfg, dataset)
    rows = []
    for i, value in enumerate(cfg.sweep["values"]):
        arm = with_override(cfg, axis, value)
        log(f"arm {i}: {axis} = {value}")
        res = run_experiment(arm, out / f"arm{i}", dataset=ds, log=log,
                             evaluate_policy=bool(cfg.sweep.get("evaluate", False)))
        fl = flop_estimate(arm.encoder)
        row = {"arm": i, "axis": axis, "value": value, "steps": res.trainer.step,
               "final_loss": res.final_loss, "params": res.model.num_params(),
               "encoder_depth": fl.depth, "flop_ratio": fl.ratio, "seconds": round(res.seconds, 2)}
        if res.report is not None:
            row.update({k: v for k, v in res.report.flat().items() if k in SWEEP_FIELDS})
        rows.append(row)
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)
    return rows


def audit_config(cfg: ExperimentConfig, keys=None):
    """(introspective budget, closed-form budget) for a config's model."""
    keys = keys or cfg.data.embodiments
    model = build_model(cfg, keys)
    descs = [EMBODIMENTS[embodiment(k).key].descriptor for k in keys]
    return count_model(model), closed_form_budget(cfg.model, cfg.encoder, descs)
