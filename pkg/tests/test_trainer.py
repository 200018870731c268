import json
import struct

import numpy as np
import pytest

import mecq.autodiff as ad
import mecq.data as data_mod
import mecq.models as models
import mecq.quant as quant
import mecq.trainer as trainer
from mecq.errors import ConfigError, DataError, DivergenceError, ValidationError


def blob_data(seed=0, dim=6, per_class=40, sep=8.0, classes=3):
    ds = data_mod.synth_blobs(classes=classes, per_class=per_class, dim=dim, sep=sep, seed=seed)
    return data_mod.split_dataset(ds, val_fraction=0.25, seed=seed)


def small_cfg(**over):
    base = dict(
        w_bits=4,
        a_bits=4,
        epochs=3,
        batch_size=32,
        lr0=0.05,
        strength=1.0,
        warmup_epochs=10,
        seed=3,
        model={"kind": "mlp", "dims": [6, 16, 3]},
        calib_size=30,
    )
    base.update(over)
    return trainer.TrainConfig(**base)


# ---------------------------------------------------------------- config


def test_config_validation():
    with pytest.raises(ConfigError):
        trainer.TrainConfig(w_bits=1)
    with pytest.raises(ConfigError):
        trainer.TrainConfig(a_bits=9)
    with pytest.raises(ConfigError):
        trainer.TrainConfig(setting="C")
    with pytest.raises(ConfigError):
        trainer.TrainConfig(setting="B")  # no teacher
    with pytest.raises(ConfigError):
        trainer.TrainConfig(lr0=0.0)
    with pytest.raises(ConfigError):
        trainer.TrainConfig(momentum=1.0)
    with pytest.raises(ConfigError):
        trainer.TrainConfig(weight_decay=-1e-4)
    with pytest.raises(ConfigError):
        trainer.TrainConfig(epochs=0)


def test_config_dict_round_trip():
    cfg = small_cfg(baseline_mode=True, weight_decay=1e-3)
    d = cfg.to_dict()
    back = trainer.TrainConfig.from_dict(d)
    assert back.to_dict() == d
    assert back.mec == cfg.mec
    assert back.augment == cfg.augment


def test_mec_active_flag():
    assert small_cfg().mec_active
    assert not small_cfg(baseline_mode=True).mec_active
    assert not small_cfg(full_precision=True).mec_active


# ---------------------------------------------------------------- cosine lr


def test_cosine_lr_endpoints():
    assert trainer.cosine_lr(0, 100, 0.01) == pytest.approx(0.01)
    assert trainer.cosine_lr(100, 100, 0.01) == pytest.approx(0.0, abs=1e-18)
    assert trainer.cosine_lr(50, 100, 0.01) == pytest.approx(0.005)


def test_cosine_lr_monotone_decreasing():
    vals = [trainer.cosine_lr(t, 40, 0.1) for t in range(41)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_cosine_lr_errors():
    with pytest.raises(ValidationError):
        trainer.cosine_lr(0, 0, 0.1)
    with pytest.raises(ValidationError):
        trainer.cosine_lr(5, 4, 0.1)


# ---------------------------------------------------------------- build/calibrate


def test_build_quantized_model_bit_layout():
    cfg = small_cfg(model={"kind": "mlp", "dims": [6, 16, 16, 3]}, w_bits=2, a_bits=4)
    rng = np.random.default_rng(0)
    m = trainer.build_quantized_model(cfg, (6,), 3, rng)
    qs = dict(models.named_quantizers(m))
    assert set(qs) == {
        "layer0.weight", "layer0.input",
        "layer1.weight", "layer1.input",
        "layer2.weight", "layer2.input",
    }
    # first and last pinned to 8 bits, middle at the configured widths
    assert qs["layer0.weight"].spec.bits == 8
    assert qs["layer0.input"].spec.bits == 8
    assert qs["layer1.weight"].spec.bits == 2
    assert qs["layer1.input"].spec.bits == 4
    assert qs["layer2.weight"].spec.bits == 8
    assert qs["layer2.input"].spec.bits == 8
    for name, q in qs.items():
        want = "per_channel" if name.endswith("weight") else "per_tensor"
        assert q.spec.granularity == want
        assert not q.spec.symmetric


def test_build_quantized_model_param_count_preserved():
    cfg = small_cfg()
    rng = np.random.default_rng(1)
    plain = models.build_model(cfg.model, (6,), 3, np.random.default_rng(1))
    wrapped = trainer.build_quantized_model(cfg, (6,), 3, rng)
    a = models.named_parameters(plain)
    b = models.named_parameters(wrapped)
    assert [n for n, _ in a] == [n for n, _ in b]
    for (_, ta), (_, tb) in zip(a, b):
        np.testing.assert_array_equal(ta.values, tb.values)


def test_full_precision_skips_wrapping():
    cfg = small_cfg(full_precision=True)
    m = trainer.build_quantized_model(cfg, (6,), 3, np.random.default_rng(0))
    assert models.named_quantizers(m) == []


def test_calibrate_model_freezes_all_sites():
    train_ds, _ = blob_data()
    cfg = small_cfg()
    m = trainer.build_quantized_model(cfg, (6,), 3, np.random.default_rng(0))
    calib = data_mod.calibration_subset(train_ds, 30, seed=0)
    trainer.calibrate_model(m, calib)
    for name, q in models.named_quantizers(m):
        assert q.params is not None, name
        assert np.all(q.current_step() > 0)


def test_calibration_is_deterministic():
    train_ds, _ = blob_data()
    cfg = small_cfg()
    steps = []
    for _ in range(2):
        m = trainer.build_quantized_model(cfg, (6,), 3, np.random.default_rng(0))
        calib = data_mod.calibration_subset(train_ds, 30, seed=0)
        trainer.calibrate_model(m, calib)
        steps.append({n: q.current_step().copy() for n, q in models.named_quantizers(m)})
    for n in steps[0]:
        np.testing.assert_array_equal(steps[0][n], steps[1][n])


def test_calibrate_empty_set_rejected():
    cfg = small_cfg()
    m = trainer.build_quantized_model(cfg, (6,), 3, np.random.default_rng(0))
    empty = data_mod.Dataset(np.zeros((0, 6), np.float32), np.zeros((0,), np.int64), 3)
    with pytest.raises(ValidationError):
        trainer.calibrate_model(m, empty)


# ---------------------------------------------------------------- optimizer


def test_sgd_momentum_hand_values():
    w = ad.Tensor(np.array([1.0]), requires_grad=True)
    opt = trainer.SGD([("w", w)], [], momentum=0.9, weight_decay=0.0)

    def step():
        with ad.Tape() as tape:
            loss = ad.reduce_sum(w)
        opt.step(ad.backward(tape, loss), lr=0.1)

    step()
    assert w.values[0] == pytest.approx(0.9)
    step()
    assert w.values[0] == pytest.approx(0.71)


def test_sgd_weight_decay_hand_values():
    w = ad.Tensor(np.array([1.0]), requires_grad=True)
    opt = trainer.SGD([("w", w)], [], momentum=0.9, weight_decay=0.1)

    def step():
        with ad.Tape() as tape:
            loss = ad.reduce_sum(w)
        opt.step(ad.backward(tape, loss), lr=0.1)

    step()
    assert w.values[0] == pytest.approx(0.89)
    step()
    assert w.values[0] == pytest.approx(0.6821)


def test_sgd_never_decays_no_decay_group():
    # zero gradient + decay would still move a decayed param; the no-decay
    # group must stay put exactly
    s = ad.Tensor(np.array([0.5]), requires_grad=True)
    w = ad.Tensor(np.array([0.5]), requires_grad=True)
    opt = trainer.SGD([("w", w)], [("s", s)], momentum=0.9, weight_decay=0.1)
    empty = ad.GradientMap()
    for _ in range(3):
        opt.step(empty, lr=0.1)
    assert s.values[0] == 0.5
    assert w.values[0] < 0.5


# ---------------------------------------------------------------- checkpoints


def _toy_ckpt():
    arrays = {
        "param.w": np.arange(6, dtype=np.float32).reshape(3, 2) / 7,
        "quant.q.zero": np.array([3, 4], dtype=np.int64),
        "scalar": np.float64(2.5).reshape(()),
    }
    cfg = {"seed": 1, "model": {"kind": "mlp"}, "nested": {"x": [1, 2, 3]}}
    return trainer.Checkpoint(cfg, epoch=4, val_acc=0.75, arrays=arrays)


def test_checkpoint_round_trip_bit_exact(tmp_path):
    ck = _toy_ckpt()
    p = tmp_path / "c.bin"
    trainer.save_checkpoint(p, ck)
    back = trainer.load_checkpoint(p)
    assert back.config == ck.config
    assert back.epoch == 4 and back.val_acc == 0.75
    assert set(back.arrays) == set(ck.arrays)
    for n, a in ck.arrays.items():
        got = back.arrays[n]
        assert got.dtype == np.asarray(a).dtype
        assert got.shape == np.asarray(a).shape  # 0-d must stay 0-d
        np.testing.assert_array_equal(got, a)


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "c.bin"
    trainer.save_checkpoint(p, _toy_ckpt())
    raw = bytearray(p.read_bytes())
    raw[0] ^= 0xFF
    p.write_bytes(bytes(raw))
    with pytest.raises(DataError, match="magic"):
        trainer.load_checkpoint(p)


def test_checkpoint_bad_version(tmp_path):
    p = tmp_path / "c.bin"
    trainer.save_checkpoint(p, _toy_ckpt())
    raw = bytearray(p.read_bytes())
    raw[4:8] = struct.pack("<I", 99)
    p.write_bytes(bytes(raw))
    with pytest.raises(DataError, match="version"):
        trainer.load_checkpoint(p)


def test_checkpoint_tampered_config_detected(tmp_path):
    p = tmp_path / "c.bin"
    trainer.save_checkpoint(p, _toy_ckpt())
    raw = p.read_bytes()
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen].decode())
    header["config"]["seed"] = 999  # keep the stored hash stale
    blob = json.dumps(header, sort_keys=True).encode()
    p.write_bytes(raw[:8] + struct.pack("<Q", len(blob)) + blob + raw[16 + hlen :])
    with pytest.raises(DataError, match="hash"):
        trainer.load_checkpoint(p)


def test_checkpoint_truncated_payload(tmp_path):
    p = tmp_path / "c.bin"
    trainer.save_checkpoint(p, _toy_ckpt())
    raw = p.read_bytes()
    p.write_bytes(raw[:-4])
    with pytest.raises(DataError, match="truncated"):
        trainer.load_checkpoint(p)


def test_checkpoint_trailing_bytes_rejected(tmp_path):
    p = tmp_path / "c.bin"
    trainer.save_checkpoint(p, _toy_ckpt())
    p.write_bytes(p.read_bytes() + b"xx")
    with pytest.raises(DataError, match="trailing"):
        trainer.load_checkpoint(p)


# ---------------------------------------------------------------- training


def test_full_precision_training_learns(tmp_path):
    train_ds, val_ds = blob_data(seed=1)
    cfg = small_cfg(full_precision=True, epochs=5)
    best, metrics = trainer.train(cfg, train_ds, val_ds, out_dir=tmp_path / "run")
    assert len(metrics) == 5
    assert metrics[-1]["val_acc"] > 0.9
    assert best.val_acc == max(m["val_acc"] for m in metrics)
    # cosine anneal: recorded epoch lr decreases
    lrs = [m["lr"] for m in metrics]
    assert all(a > b for a, b in zip(lrs, lrs[1:]))


def test_run_dir_artifacts(tmp_path):
    train_ds, val_ds = blob_data(seed=2)
    cfg = small_cfg(epochs=2)
    out = tmp_path / "run"
    trainer.train(cfg, train_ds, val_ds, out_dir=out)
    assert (out / "config.json").exists()
    assert (out / "metrics.csv").exists()
    assert (out / "steps.csv").exists()
    assert (out / "checkpoints" / "best.bin").exists()
    assert (out / "checkpoints" / "last.bin").exists()
    assert (out / "quant_params.json").exists()

    saved = json.loads((out / "config.json").read_text())
    assert saved["w_bits"] == cfg.w_bits
    assert saved["data_meta"] == {"in_shape": [6], "classes": 3}

    lines = (out / "metrics.csv").read_text().strip().splitlines()
    assert lines[0] == "epoch,lr,lambda,task,mec,total,val_acc"
    assert len(lines) == 1 + cfg.epochs

    steps = (out / "steps.csv").read_text().strip().splitlines()
    assert steps[0] == "step,epoch,task,mec_raw,lambda,total"
    n_train = len(train_ds)
    per_epoch = -(-n_train // cfg.batch_size)
    assert len(steps) == 1 + cfg.epochs * per_epoch


def test_training_is_deterministic(tmp_path):
    train_ds, val_ds = blob_data(seed=4)
    runs = []
    for i in range(2):
        cfg = small_cfg(epochs=2)
        runs.append(trainer.train(cfg, train_ds, val_ds))
    (b1, m1), (b2, m2) = runs
    assert m1 == m2  # bit-identical floats
    assert set(b1.arrays) == set(b2.arrays)
    for n in b1.arrays:
        np.testing.assert_array_equal(b1.arrays[n], b2.arrays[n])


def test_mec_at_zero_lambda_matches_baseline(monkeypatch):
    # with the regularizer weight forced to zero, MEC mode must walk the
    # exact same weight trajectory as the plain baseline
    train_ds, val_ds = blob_data(seed=5)
    monkeypatch.setattr(trainer, "lambda_at", lambda sched, t: 0.0)
    best_mec, _ = trainer.train(small_cfg(epochs=2), train_ds, val_ds)
    monkeypatch.undo()
    best_base, _ = trainer.train(small_cfg(epochs=2, baseline_mode=True), train_ds, val_ds)
    for n in best_base.arrays:
        if n.startswith("opt.gate") or n == "gate.weight":
            continue
        np.testing.assert_array_equal(best_mec.arrays[n], best_base.arrays[n], err_msg=n)


def test_zero_points_frozen_and_steps_move():
    train_ds, val_ds = blob_data(seed=6)
    cfg = small_cfg(epochs=2)
    best, _ = trainer.train(cfg, train_ds, val_ds)

    # recalibrate an untouched copy of the same model to get the frozen
    # zero points and initial steps
    m = trainer.build_quantized_model(cfg, (6,), 3, np.random.default_rng(
        np.random.SeedSequence(cfg.seed).spawn(3)[0]))
    calib = data_mod.calibration_subset(train_ds, cfg.calib_size, seed=cfg.seed)
    trainer.calibrate_model(m, calib)

    moved = 0
    for name, q in models.named_quantizers(m):
        np.testing.assert_array_equal(
            best.arrays[f"quant.{name}.zero"], q.params.zero_point, err_msg=name
        )
        if not np.array_equal(best.arrays[f"quant.{name}.step"], q.current_step()):
            moved += 1
    assert moved > 0  # learnable steps actually trained


def test_model_from_checkpoint_reproduces_val_acc(tmp_path):
    train_ds, val_ds = blob_data(seed=7)
    cfg = small_cfg(epochs=2)
    out = tmp_path / "run"
    best, _ = trainer.train(cfg, train_ds, val_ds, out_dir=out)

    ck = trainer.load_checkpoint(out / "checkpoints" / "best.bin")
    model, gnet, loaded_cfg = trainer.model_from_checkpoint(ck)
    assert gnet is not None  # MEC run saves the gating weights
    assert loaded_cfg.w_bits == cfg.w_bits
    acc = trainer.evaluate(model, val_ds)
    assert acc == ck.val_acc


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_aborts_with_checkpoint():
    train_ds, val_ds = blob_data(seed=8)
    cfg = small_cfg(epochs=2, lr0=1e9, full_precision=True)
    with pytest.raises(DivergenceError) as ei:
        trainer.train(cfg, train_ds, val_ds)
    ck = ei.value.checkpoint
    assert isinstance(ck, trainer.Checkpoint)
    assert any(n.startswith("param.") for n in ck.arrays)


def test_setting_b_needs_teacher_and_trains(tmp_path):
    train_ds, val_ds = blob_data(seed=9)
    teacher_cfg = small_cfg(full_precision=True, epochs=4, setting="A")
    tdir = tmp_path / "teacher"
    trainer.train(teacher_cfg, train_ds, val_ds, out_dir=tdir)
    tpath = str(tdir / "checkpoints" / "best.bin")

    cfg = small_cfg(epochs=3, setting="B", teacher_path=tpath)
    best, metrics = trainer.train(cfg, train_ds, val_ds)
    assert all(np.isfinite(m["task"]) for m in metrics)
    # distillation from a strong teacher beats chance without any labels
    assert best.val_acc > 0.6


def test_teacher_shape_mismatch_rejected(tmp_path):
    train_ds, val_ds = blob_data(seed=10)
    teacher_cfg = small_cfg(full_precision=True, epochs=1)
    tdir = tmp_path / "teacher"
    trainer.train(teacher_cfg, train_ds, val_ds, out_dir=tdir)
    with pytest.raises(ValidationError):
        trainer._teacher_fn(str(tdir / "checkpoints" / "best.bin"), (7,), 3)


def test_teacher_params_unchanged_by_inference(tmp_path):
    train_ds, val_ds = blob_data(seed=11)
    tdir = tmp_path / "teacher"
    trainer.train(small_cfg(full_precision=True, epochs=1), train_ds, val_ds, out_dir=tdir)
    run, tm = trainer._teacher_fn(str(tdir / "checkpoints" / "best.bin"), (6,), 3)
    before = {n: t.values.copy() for n, t in models.named_parameters(tm)}
    out1 = run(train_ds.x[:8])
    out2 = run(train_ds.x[:8])
    np.testing.assert_array_equal(out1, out2)
    for n, t in models.named_parameters(tm):
        np.testing.assert_array_equal(before[n], t.values)


def test_smallcnn_training_step_runs():
    ds = data_mod.synth_blobs(classes=2, per_class=24, dim=16, sep=6.0, seed=12,
                              image_shape=(1, 4, 4))
    train_ds, val_ds = data_mod.split_dataset(ds, val_fraction=0.25, seed=0)
    cfg = small_cfg(
        epochs=1, batch_size=16, calib_size=12,
        model={"kind": "smallcnn", "channels": [4, 8]},
    )
    best, metrics = trainer.train(cfg, train_ds, val_ds)
    assert len(metrics) == 1
    assert np.isfinite(metrics[0]["total"])
    assert any(n.startswith("quant.conv0.") for n in best.arrays)
