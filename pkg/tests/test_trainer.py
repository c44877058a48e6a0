import csv
import math

import numpy as np
import pytest

from flower_desk import numerics as F
from flower_desk.errors import ConfigError, IntegrityError, FormatError, StageError
from flower_desk.toybench import generate_dataset
from flower_desk.trainer import AdamW, GroupConfig, OptimizerConfig, ScheduleSpec, TrainConfig, Trainer, lr_at
from flower_desk.trainer.checkpoint import load_checkpoint, load_into, restore_trainer, save_checkpoint
from flower_desk.trainer.experiment import (
    audit_config,
    config_from_dict,
    load_config,
    run_experiment,
    run_sweep,
)
from flower_desk.trainer.optim import clip_grad_norm, encoder_group_defaults, flow_group_defaults, global_grad_norm

from conftest import tiny_model, toy_inputs


def oracle_lr(s, max_lr, final_lr, T, phases=(0.01, 0.39, 0.6)):
    warm = phases[0] * T
    const_end = (phases[0] + phases[1]) * T
    if s >= T:
        return final_lr
    if s < warm:
        return max_lr * s / warm
    if s <= const_end:
        return max_lr
    progress = (s - const_end) / (T - const_end)
    return final_lr + (max_lr - final_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


@pytest.mark.parametrize("group", [flow_group_defaults(), encoder_group_defaults()])
def test_lr_matches_closed_form_at_probe_points(group):
    sched = ScheduleSpec(20_000)
    probes = np.random.default_rng(0).uniform(0, 20_000, 10_000)
    for s in probes:
        assert lr_at(s, group, sched) == oracle_lr(s, group.max_lr, group.final_lr, 20_000)
    for s in range(0, 20_001, 2):
        assert lr_at(s, group, sched) == oracle_lr(s, group.max_lr, group.final_lr, 20_000)


def test_lr_agrees_with_high_precision_evaluation():
    from fractions import Fraction

    g = flow_group_defaults()
    sched = ScheduleSpec(1000)
    for s in range(0, 1001):
        got = lr_at(s, g, sched)
        if s < 10:
            exact = Fraction(g.max_lr) * s / 10
        elif s <= 400 or s >= 1000:
            exact = Fraction(g.max_lr if s <= 400 else g.final_lr)
        else:
            continue
        assert abs(Fraction(got) - exact) <= abs(exact) * Fraction(1, 2 ** 52)


def test_lr_examples_and_continuity():
    sched = ScheduleSpec(10_000)
    g = flow_group_defaults()
    assert lr_at(0, g, sched) == 0.0
    assert lr_at(100, g, sched) == 1e-4
    assert lr_at(10_000, g, sched) == 1e-5
    assert lr_at(50_000, g, sched) == 1e-5
    b1, b2 = sched.boundaries
    for grp in (g, encoder_group_defaults()):
        # both one-sided limits equal max_lr at each boundary
        assert lr_at(b1, grp, sched) == grp.max_lr
        assert lr_at(b2, grp, sched) == grp.max_lr
        assert lr_at(np.nextafter(b1, 0), grp, sched) == pytest.approx(grp.max_lr, rel=1e-12)
        assert lr_at(np.nextafter(b2, np.inf), grp, sched) == pytest.approx(grp.max_lr, rel=1e-12)


def test_constant_schedule_and_validation():
    assert lr_at(5, flow_group_defaults(), ScheduleSpec(10, kind="constant")) == 1e-4
    with pytest.raises(ConfigError):
        ScheduleSpec(10, (0.5, 0.5, 0.5))
    with pytest.raises(ConfigError):
        GroupConfig(1e-3, 0.0, 0.0, 1e-2).validate("flow")


def test_gradient_clipping():
    p = F.Parameter(np.zeros(4, dtype=np.float32))
    q = F.Parameter(np.zeros(3, dtype=np.float32))
    p.grad = np.full(4, 3.0, np.float32)
    q.grad = np.full(3, -4.0, np.float32)
    pre = clip_grad_norm([p, q], 1.0)
    assert pre == pytest.approx(math.sqrt(36 + 48))
    assert global_grad_norm([p, q]) <= 1.0 + 1e-6
    p.grad = np.full(4, 0.1, np.float32)
    q.grad = None
    clip_grad_norm([p, q], 1.0)
    np.testing.assert_array_equal(p.grad, np.full(4, 0.1, np.float32))


def test_adamw_rejects_shared_parameter():
    p = F.Parameter(np.zeros(2, dtype=np.float32))
    with pytest.raises(ConfigError):
        AdamW({"flow": [p], "encoder": [p]}, OptimizerConfig(), ScheduleSpec(10))


@pytest.fixture(scope="module")
def small_data():
    return generate_dataset(0, 6, keys=("A", "C"))


def _trainer(data, steps=100, freeze=False, dropout=0.0, seed=0):
    model = tiny_model(keys="AC", dropout=dropout, seed=seed)
    cfg = TrainConfig(steps=steps, batch_size=4, freeze_encoder=freeze, seed=seed)
    opt = OptimizerConfig(flow=GroupConfig(1e-3, 0.01, 1e-5, 1e-5), encoder=GroupConfig(3e-4, 0.001, 1e-7, 1e-6))
    return Trainer(model, data, cfg, opt)


def test_training_is_bit_deterministic(small_data):
    a = [r.loss for r in _trainer(small_data).run()]
    b = [r.loss for r in _trainer(small_data).run()]
    assert len(a) == 100 and a == b
    assert np.mean(a[-20:]) < np.mean(a[:20])


def test_post_clip_norm_bound(small_data):
    tr = _trainer(small_data, steps=5)
    seen = []
    orig = tr.optimizer.step

    def spy():
        seen.append(global_grad_norm(tr.optimizer.params()))
        return orig()

    tr.optimizer.step = spy
    recs = tr.run()
    for rec, post in zip(recs, seen):
        if rec.grad_norm > 1.0:
            assert post <= 1.0 + 1e-6


def test_freezing_encoder_only_moves_flow_params(small_data):
    tr = _trainer(small_data, steps=5, freeze=True)
    groups = tr.model.param_groups()
    before = {id(p): p.data.copy() for g in groups.values() for p in g}
    tr.run()
    assert all(np.array_equal(before[id(p)], p.data) for p in groups["encoder"])
    assert any(not np.array_equal(before[id(p)], p.data) for p in groups["flow"])


def test_group_partition_covers_trainables():
    model = tiny_model()
    groups = model.param_groups()
    flat = [id(p) for g in groups.values() for p in g]
    assert sorted(flat) == sorted(id(p) for p in model.parameters())
    assert all(n.startswith("encoder.") for n, p in model.named_parameters() if any(p is q for q in groups["encoder"]))


def test_checkpoint_roundtrip(tmp_path, small_data):
    tr = _trainer(small_data, steps=10, dropout=0.1)
    tr.run()
    path = save_checkpoint(tmp_path / "a.flwr", tr.model, tr)
    ckpt = load_checkpoint(path)
    model = ckpt.build_model()
    tr2 = Trainer(model, small_data, TrainConfig(**{**ckpt.manifest["train_config"],
                                                    "phases": tuple(ckpt.manifest["train_config"]["phases"])}),
                  tr.opt_cfg)
    restore_trainer(tr2, ckpt)
    assert save_checkpoint(tmp_path / "b.flwr", model, tr2).read_bytes() == path.read_bytes()

    for m in (tr.model, model):
        m.eval()
    name, seq, proprio = toy_inputs(model, "C", batch=2)
    z = np.random.default_rng(0).standard_normal((2, 20, 6)).astype(np.float32)
    outs = [m.velocity_numpy(z, np.array([0.2, 0.9]), m.context(seq, name, proprio), name)
            for m in (tr.model, model)]
    np.testing.assert_array_equal(outs[0], outs[1])


def test_resume_reproduces_unbroken_run(tmp_path, small_data):
    full = _trainer(small_data, steps=30, dropout=0.1)
    ref = [r.loss for r in full.run()]
    first = _trainer(small_data, steps=30, dropout=0.1)
    first.run(15)
    path = save_checkpoint(tmp_path / "mid.flwr", first.model, first)
    second = _trainer(small_data, steps=30, dropout=0.1, seed=0)
    restore_trainer(second, load_checkpoint(path))
    assert second.step == 15
    rest = [r.loss for r in second.run()]
    assert len(rest) == 15
    assert rest == ref[15:]


def test_damaged_checkpoints(tmp_path, small_data):
    model = tiny_model(keys="AC")
    path = save_checkpoint(tmp_path / "m.flwr", model)
    data = path.read_bytes()
    (tmp_path / "t.flwr").write_bytes(data[: len(data) // 2])
    with pytest.raises(IntegrityError):
        load_checkpoint(tmp_path / "t.flwr")
    (tmp_path / "x.flwr").write_bytes(b"XXXX" + data[4:])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "x.flwr")
    wide = tiny_model(keys="AC", dim=24)
    snapshot = {n: p.data.copy() for n, p in wide.named_parameters()}
    with pytest.raises(IntegrityError, match="shape mismatch"):
        load_into(wide, load_checkpoint(path))
    for n, p in wide.named_parameters():
        np.testing.assert_array_equal(snapshot[n], p.data)


def test_l1_head_trains(small_data):
    model = tiny_model(keys="AC")
    tr = Trainer(model, small_data, TrainConfig(steps=30, batch_size=4, head="l1_regression"),
                 OptimizerConfig(flow=GroupConfig(1e-3, 0.01, 1e-5, 1e-5)))
    losses = [r.loss for r in tr.run()]
    assert losses[-1] < losses[0]


_TINY = {
    "seed": 1,
    "data": {"episodes": 4, "embodiments": ["A"]},
    "model": {"n_layers": 1, "dim": 16, "heads": 2, "freq_dim": 16, "attn_dropout": 0.0,
              "mlp_dropout": 0.0, "resid_dropout": 0.0},
    "encoder": {"dim": 16, "heads": 2, "n_layers": 2, "max_prompt_tokens": 12},
    "train": {"steps": 6, "batch_size": 4, "log_every": 3},
    "eval": {"rollouts": 2},
}


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="bogus"):
        config_from_dict({**_TINY, "train": {"bogus": 1}})
    with pytest.raises(ConfigError):
        config_from_dict({**_TINY, "encoder": {"fusion_mode": "sideways"}})
    with pytest.raises(ConfigError, match="nowhere.toml"):
        load_config("/nonexistent/nowhere.toml")


def test_run_experiment_and_resume(tmp_path):
    cfg = config_from_dict(_TINY)
    res = run_experiment(cfg, tmp_path)
    rows = list(csv.DictReader(open(tmp_path / "metrics.csv")))
    assert [r["step"] for r in rows] == ["3", "6", "6"]
    assert rows[-1]["success_A"] != ""
    cfg2 = config_from_dict({**_TINY, "train": {**_TINY["train"], "steps": 9}})
    res2 = run_experiment(cfg2, tmp_path, resume=res.checkpoint)
    assert res2.trainer.step == 9
    steps = [int(r["step"]) for r in csv.DictReader(open(tmp_path / "metrics.csv"))]
    assert steps[3:] == [9, 9] and steps[:3] == [3, 6, 6]


def test_stage_failure_is_named(tmp_path):
    cfg = config_from_dict({**_TINY, "data": {"path": str(tmp_path / "missing.ftoy"), "embodiments": ["A"]}})
    with pytest.raises(StageError) as info:
        run_experiment(cfg, tmp_path)
    assert info.value.stage == "data"


def test_sweeps(tmp_path):
    raw = {**_TINY, "encoder": {**_TINY["encoder"], "n_layers": 10}, "eval": {"rollouts": 0},
           "sweep": {"axis": "rho", "values": [0.0, 0.2, 0.3, 0.5]}}
    rows = run_sweep(config_from_dict(raw), tmp_path)
    assert [r["flop_ratio"] for r in rows] == pytest.approx([1.0, 0.8, 0.7, 0.5])
    written = list(csv.DictReader(open(tmp_path / "sweep.csv")))
    assert len(written) == 4
    raw["sweep"] = {"axis": "fusion_mode", "values": ["early", "intermediate", "late"]}
    rows = run_sweep(config_from_dict(raw), tmp_path / "fusion")
    assert [r["value"] for r in rows] == ["early", "intermediate", "late"]
    assert all(math.isfinite(r["final_loss"]) for r in rows)


def test_per_layer_axis_matches_compare_adaln():
    from flower_desk.audit import compare_adaln
    from flower_desk.trainer.experiment import with_override

    cfg = with_override(config_from_dict(_TINY), "adaln", "per_layer")
    live, closed = audit_config(cfg)
    assert live.components == closed.components
    assert live.components["controller"] == compare_adaln(1, 16, 1, 8).per_layer_total
