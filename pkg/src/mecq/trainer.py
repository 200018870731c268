"""End-to-end training: build, calibrate, train, evaluate, checkpoint.

One training step: forward to (logits, backbone), transpose both into the
column-major loss convention, compute the composite objective with the
epoch's regularizer weight, reverse sweep, SGD-momentum update. Weight
decay never touches quantization steps, and zero points stay frozen after
calibration.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import data as data_mod
from . import mec as mec_mod
from . import models, quant
from .errors import ConfigError, DataError, DivergenceError, ValidationError
from .losses import LambdaSchedule, lambda_at, total_loss

CKPT_MAGIC = b"MECQ"
CKPT_VERSION = 1


@dataclass
class TrainConfig:
    w_bits: int = 2
    a_bits: int = 4
    setting: str = "A"
    epochs: int = 30
    batch_size: int = 256
    lr0: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    strength: float = 5.0
    warmup_epochs: int = 50
    mec: mec_mod.MecConfig = field(default_factory=mec_mod.MecConfig)
    seed: int = 0
    model: dict = field(default_factory=lambda: {"kind": "mlp"})
    teacher_path: str | None = None
    baseline_mode: bool = False
    full_precision: bool = False
    learnable_steps: bool = True
    calib_size: int = 100
    augment: data_mod.AugmentConfig = field(default_factory=data_mod.AugmentConfig)

    def __post_init__(self):
        for name, bits in (("w_bits", self.w_bits), ("a_bits", self.a_bits)):
            if not (2 <= bits <= 8):
                raise ConfigError(f"{name} must be in [2, 8], got {bits}")
        if self.setting not in ("A", "B"):
            raise ConfigError(f"setting must be A or B, got {self.setting!r}")
        if self.setting == "B" and not self.teacher_path:
            raise ConfigError("setting B needs a teacher checkpoint path")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.lr0 <= 0:
            raise ConfigError(f"lr0 must be positive, got {self.lr0}")
        if not (0.0 <= self.momentum < 1.0):
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.calib_size < 1:
            raise ConfigError("calib_size must be >= 1")

    @property
    def mec_active(self) -> bool:
        return not self.baseline_mode and not self.full_precision

    def schedule(self) -> LambdaSchedule:
        return LambdaSchedule(self.strength, self.warmup_epochs)

    def to_dict(self) -> dict:
        return {
            "w_bits": self.w_bits,
            "a_bits": self.a_bits,
            "setting": self.setting,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr0": self.lr0,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "str": self.strength,
            "e_warmup": self.warmup_epochs,
            "seed": self.seed,
            "model": dict(self.model),
            "teacher": self.teacher_path,
            "baseline_mode": self.baseline_mode,
            "full_precision": self.full_precision,
            "learnable_steps": self.learnable_steps,
            "calib_size": self.calib_size,
            "mec": {
                "eps_sq": self.mec.eps_sq,
                "order": self.mec.order,
                "points": list(self.mec.points),
                "experts": self.mec.experts,
                "maximize_entropy": self.mec.maximize_entropy,
                "normalize_columns": self.mec.normalize_columns,
            },
            "augment": {
                "enabled": self.augment.enabled,
                "hflip_prob": self.augment.hflip_prob,
                "translate_pad": self.augment.translate_pad,
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        mec_d = d.get("mec", {})
        aug_d = d.get("augment", {})
        return cls(
            w_bits=d.get("w_bits", 2),
            a_bits=d.get("a_bits", 4),
            setting=d.get("setting", "A"),
            epochs=d.get("epochs", 30),
            batch_size=d.get("batch_size", 256),
            lr0=d.get("lr0", 0.01),
            momentum=d.get("momentum", 0.9),
            weight_decay=d.get("weight_decay", 5e-4),
            strength=d.get("str", 5.0),
            warmup_epochs=d.get("e_warmup", 50),
            seed=d.get("seed", 0),
            model=dict(d.get("model", {"kind": "mlp"})),
            teacher_path=d.get("teacher"),
            baseline_mode=d.get("baseline_mode", False),
            full_precision=d.get("full_precision", False),
            learnable_steps=d.get("learnable_steps", True),
            calib_size=d.get("calib_size", 100),
            mec=mec_mod.MecConfig(
                eps_sq=mec_d.get("eps_sq", "adaptive"),
                order=mec_d.get("order", 2),
                points=tuple(mec_d.get("points", (0.0, 1.0, 3.0, 7.0))),
                experts=mec_d.get("experts"),
                maximize_entropy=mec_d.get("maximize_entropy", True),
                normalize_columns=mec_d.get("normalize_columns", True),
            ),
            augment=data_mod.AugmentConfig(
                enabled=aug_d.get("enabled", False),
                hflip_prob=aug_d.get("hflip_prob", 0.5),
                translate_pad=aug_d.get("translate_pad", 4),
            ),
        )


def cosine_lr(t: int, total: int, lr0: float) -> float:
    if total <= 0:
        raise ValidationError(f"total steps must be positive, got {total}")
    if not (0 <= t <= total):
        raise ValidationError(f"step {t} outside [0, {total}]")
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * t / total))


def build_quantized_model(cfg: TrainConfig, in_shape, classes: int, rng):
    """Build the configured model and wrap every weighted layer.

    Weights quantize per-channel (axis 0) and input activations per-tensor,
    both asymmetric. The first and last weighted layers are pinned to 8
    bits regardless of the configured widths. full_precision skips
    wrapping entirely.
    """
    model = models.build_model(cfg.model, in_shape, classes, rng)
    if cfg.full_precision:
        return model
    layers = model.weighted_layers()
    last = len(layers) - 1
    for pos, (idx, layer) in enumerate(layers):
        wspec = quant.QuantSpec(
            bits=cfg.w_bits, granularity="per_channel", channel_axis=0,
            symmetric=False, learnable=cfg.learnable_steps, role="weight",
        )
        aspec = quant.QuantSpec(
            bits=cfg.a_bits, granularity="per_tensor",
            symmetric=False, learnable=cfg.learnable_steps, role="activation",
        )
        force = 8 if pos in (0, last) else None
        model.replace_layer(idx, quant.wrap_layer(layer, wspec, aspec, force_bits=force,
                                                  name=f"layer{idx}"))
    return model


def _wrapped_layers(model):
    if model.kind == "mlp":
        return [l for l in model.layers if isinstance(l, quant.QuantizedLayer)]
    out = [l for l in model.convs if isinstance(l, quant.QuantizedLayer)]
    if isinstance(model.head, quant.QuantizedLayer):
        out.append(model.head)
    return out


def calibrate_model(model, calib: data_mod.Dataset, batch_size: int = 256):
    """One observing forward pass over the calibration set, then freeze all
    quantizer params. Degenerate ranges are floored with a warning."""
    if len(calib) == 0:
        raise ValidationError("calibration set is empty")
    wrapped = _wrapped_layers(model)
    if not wrapped:
        return model
    for layer in wrapped:
        layer.set_observing(True)
    for start in range(0, len(calib), batch_size):
        xb = calib.x[start : start + batch_size]
        model.forward(ad.constant(xb))
    for layer in wrapped:
        layer.set_observing(False)
        layer.freeze(floor_degenerate=True)
    return model


class SGD:
    """Momentum SGD over (name, tensor) groups; one group carries weight
    decay, the other (quantization steps) never does."""

    def __init__(self, decay_params, no_decay_params, momentum: float, weight_decay: float):
        self.decay = list(decay_params)
        self.no_decay = list(no_decay_params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers = {
            name: np.zeros_like(t.values) for name, t in self.decay + self.no_decay
        }

    def step(self, grads: ad.GradientMap, lr: float):
        for wd, group in ((self.weight_decay, self.decay), (0.0, self.no_decay)):
            for name, t in group:
                g = grads.get(t)
                if g is None:
                    g = np.zeros_like(t.values)
                g = g.astype(t.values.dtype, copy=False)
                if wd:
                    g = g + wd * t.values
                buf = self.buffers[name]
                buf *= self.momentum
                buf += g
                t.values -= (lr * buf).astype(t.values.dtype, copy=False)

    def named_buffers(self):
        return self.buffers


@dataclass
class Checkpoint:
    config: dict
    epoch: int
    val_acc: float
    arrays: dict  # name -> ndarray
    rng_state: dict | None = None


def _config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    names = sorted(ckpt.arrays)
    specs = []
    payload = bytearray()
    for n in names:
        # asarray, not ascontiguousarray: the latter would promote 0-d
        # arrays to (1,) and a per-tensor step must stay 0-d
        a = np.asarray(ckpt.arrays[n], order="C")
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        specs.append({"name": n, "dtype": a.dtype.str, "shape": list(a.shape)})
        payload.extend(a.tobytes())
    header = json.dumps(
        {
            "config": ckpt.config,
            "config_hash": _config_hash(ckpt.config),
            "epoch": ckpt.epoch,
            "val_acc": ckpt.val_acc,
            "arrays": specs,
            "rng_state": ckpt.rng_state,
        },
        sort_keys=True,
    ).encode()
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with open(p, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(bytes(payload))


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != CKPT_MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != CKPT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    if len(raw) < 16 + hlen:
        raise DataError(f"{path}: truncated header")
    header = json.loads(raw[16 : 16 + hlen].decode())
    if _config_hash(header["config"]) != header["config_hash"]:
        raise DataError(f"{path}: config hash mismatch, refusing to load")
    arrays = {}
    off = 16 + hlen
    for spec in header["arrays"]:
        dt = np.dtype(spec["dtype"])
        count = int(np.prod(spec["shape"])) if spec["shape"] else 1
        nbytes = dt.itemsize * count
        if off + nbytes > len(raw):
            raise DataError(f"{path}: truncated array payload at {spec['name']}")
        arrays[spec["name"]] = (
            np.frombuffer(raw, dtype=dt, count=count, offset=off).reshape(spec["shape"]).copy()
        )
        off += nbytes
    if off != len(raw):
        raise DataError(f"{path}: {len(raw) - off} trailing bytes")
    return Checkpoint(header["config"], header["epoch"], header["val_acc"], arrays,
                      header.get("rng_state"))


def _collect_state(model, gnet, opt) -> dict:
    arrays = {}
    for name, t in models.named_parameters(model):
        arrays[f"param.{name}"] = t.values.copy()
    for name, q in models.named_quantizers(model):
        if q.params is None:
            continue
        arrays[f"quant.{name}.step"] = np.asarray(q.current_step()).copy()
        arrays[f"quant.{name}.zero"] = np.asarray(q.params.zero_point).copy()
    if gnet is not None:
        arrays["gate.weight"] = gnet.weight.values.copy()
    if opt is not None:
        for name, buf in opt.named_buffers().items():
            arrays[f"opt.{name}"] = buf.copy()
    return arrays


def _restore_state(model, gnet, arrays: dict):
    for name, t in models.named_parameters(model):
        key = f"param.{name}"
        if key not in arrays:
            raise DataError(f"checkpoint missing array {key}")
        t.values[...] = arrays[key]
    for name, q in models.named_quantizers(model):
        skey, zkey = f"quant.{name}.step", f"quant.{name}.zero"
        if skey in arrays:
            q.set_params(arrays[skey], arrays[zkey])
    if gnet is not None and "gate.weight" in arrays:
        gnet.weight.values[...] = arrays["gate.weight"]


def model_from_checkpoint(ckpt: Checkpoint):
    """Rebuild the saved model (and gating net if present) for inference."""
    meta = ckpt.config.get("data_meta")
    if not meta:
        raise DataError("checkpoint config lacks data_meta (in_shape/classes)")
    cfg = TrainConfig.from_dict(ckpt.config)
    rng = np.random.default_rng(cfg.seed)
    model = build_quantized_model(cfg, tuple(meta["in_shape"]), int(meta["classes"]), rng)
    gnet = None
    if "gate.weight" in ckpt.arrays:
        n, dim = ckpt.arrays["gate.weight"].shape
        gnet = mec_mod.GatingNet(n, dim)
    _restore_state(model, gnet, ckpt.arrays)
    return model, gnet, cfg


def evaluate(model, ds: data_mod.Dataset, batch_size: int = 256) -> float:
    """Top-1 accuracy with quantizers active."""
    if len(ds) == 0:
        raise ValidationError("cannot evaluate on an empty dataset")
    hits = 0
    for start in range(0, len(ds), batch_size):
        xb = ds.x[start : start + batch_size]
        yb = ds.y[start : start + batch_size]
        logits, _ = model.forward(ad.constant(xb))
        hits += int(np.sum(np.argmax(logits.values, axis=1) == yb))
    return hits / len(ds)


def _teacher_fn(ckpt_path, in_shape, classes):
    ckpt = load_checkpoint(ckpt_path)
    meta = ckpt.config.get("data_meta", {})
    if meta and (tuple(meta["in_shape"]) != tuple(in_shape) or meta["classes"] != classes):
        raise ValidationError(
            f"teacher was trained on {meta}, current data is {in_shape}/{classes}"
        )
    tm, _, _ = model_from_checkpoint(ckpt)

    def run(xb: np.ndarray) -> np.ndarray:
        logits, _ = tm.forward(ad.constant(xb))
        return logits.values

    return run, tm


def train(cfg: TrainConfig, train_ds: data_mod.Dataset, val_ds: data_mod.Dataset,
          out_dir=None):
    """Run the full loop; returns (best Checkpoint, list of epoch metrics).

    Per epoch: shuffle, per-step composite loss and SGD update, then a val
    pass. The best-accuracy state and the final state are kept (and
    written under out_dir when given, along with config.json, metrics.csv
    and the per-step loss log).
    """
    in_shape = train_ds.x.shape[1:]
    classes = train_ds.classes
    seeds = np.random.SeedSequence(cfg.seed).spawn(3)
    init_rng, shuffle_rng, aug_rng = (np.random.default_rng(s) for s in seeds)

    model = build_quantized_model(cfg, in_shape, classes, init_rng)
    if not cfg.full_precision:
        calib = data_mod.calibration_subset(
            train_ds, min(cfg.calib_size, len(train_ds)), seed=cfg.seed
        )
        calibrate_model(model, calib, cfg.batch_size)

    teacher = None
    if cfg.setting == "B":
        teacher, _ = _teacher_fn(cfg.teacher_path, in_shape, classes)

    gnet = mec_mod.GatingNet(cfg.mec.experts, model.backbone_dim) if cfg.mec_active else None

    decay_group = list(models.named_parameters(model))
    if gnet is not None:
        decay_group.append(("gate.weight", gnet.weight))
    step_group = [
        (f"quant.{name}.step", q.step_tensor)
        for name, q in models.named_quantizers(model)
        if q.step_tensor is not None
    ]
    opt = SGD(decay_group, step_group, cfg.momentum, cfg.weight_decay)
    quantizers = [q for _, q in models.named_quantizers(model)]
    sched = cfg.schedule()

    run_dir = Path(out_dir) if out_dir else None
    steps_fh = steps_writer = None
    resolved = cfg.to_dict()
    resolved["data_meta"] = {"in_shape": [int(s) for s in in_shape], "classes": int(classes)}
    if run_dir:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True))
        steps_fh = open(run_dir / "steps.csv", "w", newline="")
        steps_writer = csv.writer(steps_fh)
        steps_writer.writerow(["step", "epoch", "task", "mec_raw", "lambda", "total"])

    n = len(train_ds)
    steps_per_epoch = max(1, math.ceil(n / cfg.batch_size))
    total_steps = cfg.epochs * steps_per_epoch
    metrics = []
    best_acc = -1.0
    best_arrays = None
    best_epoch = -1
    last_good = _collect_state(model, gnet, opt)
    step = 0

    try:
        for epoch in range(cfg.epochs):
            lam = lambda_at(sched, epoch) if cfg.mec_active else 0.0
            ep_lr = cosine_lr(epoch * steps_per_epoch, total_steps, cfg.lr0)
            perm = shuffle_rng.permutation(n)
            ep_task = ep_mec = ep_total = 0.0
            for start in range(0, n, cfg.batch_size):
                idx = perm[start : start + cfg.batch_size]
                xb = train_ds.x[idx]
                yb = train_ds.y[idx]
                if cfg.augment.enabled:
                    xb = np.stack([data_mod.augment(s, cfg.augment, aug_rng) for s in xb])
                lr = cosine_lr(step, total_steps, cfg.lr0)
                kw = {}
                if cfg.setting == "A":
                    kw["labels"] = yb
                else:
                    kw["teacher_logits"] = teacher(xb).T

                with ad.Tape() as tape:
                    logits, backbone = model.forward(ad.constant(xb))
                    z_o = ad.transpose(logits)  # (c, m)
                    z_b = ad.transpose(backbone)  # (d, m)
                    if cfg.mec_active:
                        _, ctx = mec_mod.prepare_features(z_b.values, cfg.mec)
                        loss, report = total_loss(
                            z_o, z_b, lam=lam, mec_cfg=cfg.mec, gnet=gnet, ctx=ctx,
                            setting=cfg.setting, **kw,
                        )
                    else:
                        loss, report = total_loss(z_o, lam=0.0, setting=cfg.setting, **kw)

                if not np.isfinite(report.total):
                    err = DivergenceError(
                        f"non-finite loss at step {step} (epoch {epoch}): {report.total}"
                    )
                    err.checkpoint = Checkpoint(resolved, epoch, best_acc, last_good)
                    raise err

                grads = ad.backward(tape, loss)
                opt.step(grads, lr)
                for q in quantizers:
                    q.clamp_step()
                if steps_writer:
                    steps_writer.writerow(report.csv_row(step, epoch))
                ep_task += report.task_loss
                ep_mec += report.mec_raw
                ep_total += report.total
                step += 1

            val_acc = evaluate(model, val_ds, cfg.batch_size)
            k = steps_per_epoch
            metrics.append(
                {
                    "epoch": epoch,
                    "lr": ep_lr,
                    "lambda": lam,
                    "task": ep_task / k,
                    "mec": ep_mec / k,
                    "total": ep_total / k,
                    "val_acc": val_acc,
                }
            )
            last_good = _collect_state(model, gnet, opt)
            if val_acc > best_acc:
                best_acc = val_acc
                best_arrays = last_good
                best_epoch = epoch
    finally:
        if steps_fh:
            steps_fh.close()

    if best_arrays is None:
        best_arrays = last_good
        best_epoch = cfg.epochs - 1

    rng_state = {
        "shuffle": shuffle_rng.bit_generator.state,
        "augment": aug_rng.bit_generator.state,
    }
    best = Checkpoint(resolved, best_epoch, best_acc, best_arrays, rng_state)
    last = Checkpoint(resolved, cfg.epochs - 1, metrics[-1]["val_acc"], last_good, rng_state)

    if run_dir:
        with open(run_dir / "metrics.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "lr", "lambda", "task", "mec", "total", "val_acc"])
            for row in metrics:
                w.writerow([row[k] for k in ("epoch", "lr", "lambda", "task", "mec", "total", "val_acc")])
        save_checkpoint(run_dir / "checkpoints" / "best.bin", best)
        save_checkpoint(run_dir / "checkpoints" / "last.bin", last)
        (run_dir / "quant_params.json").write_text(
            quant.export_quant_params_json(models.named_quantizers(model))
        )

    return best, metrics
