"""Command line: train, eval, diagnose, mec-probe.

stdout carries machine-parseable key=value lines only; everything else
goes to stderr. Exit codes: 0 success, 2 validation/config problems,
3 numerical divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import data as data_mod
from . import diagnostics, linalg
from . import mec as mec_mod
from . import models, trainer
from .errors import (
    ConfigError,
    DataError,
    DivergenceError,
    NumericalError,
    ValidationError,
)

log = logging.getLogger("mecq")

# spelling used in some run scripts for the warm-up knob
_OVERRIDE_ALIASES = {"E_warmup": "e_warmup"}


def _kv(key, value):
    print(f"{key}={value}")


def _resolved_config(args) -> dict:
    cfg = config_mod.load_config(args.config)
    pairs = [
        "=".join((_OVERRIDE_ALIASES.get(k, k), v))
        for k, v in (p.partition("=")[::2] for p in (args.set or []))
    ]
    cfg = config_mod.apply_overrides(cfg, pairs)
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    return cfg


def cmd_train(args) -> int:
    cfg = _resolved_config(args)
    train_ds, val_ds = config_mod.load_datasets(cfg["data"])
    seeds = [int(s) for s in str(args.sweep).split(",")] if args.sweep else [cfg["seed"]]
    base_out = Path(args.out_dir) if args.out_dir else Path("runs") / Path(args.config).stem

    for seed in seeds:
        run_cfg = dict(cfg, seed=seed)
        tc = config_mod.train_config_from(run_cfg)
        run_dir = base_out / f"seed{seed}" if len(seeds) > 1 else base_out
        log.info("training seed=%d out_dir=%s", seed, run_dir)
        try:
            best, metrics = trainer.train(tc, train_ds, val_ds, out_dir=run_dir)
        except DivergenceError as err:
            ck = getattr(err, "checkpoint", None)
            if ck is not None:
                trainer.save_checkpoint(run_dir / "checkpoints" / "aborted.bin", ck)
                log.error("diverged; last-good state in %s", run_dir / "checkpoints" / "aborted.bin")
            raise
        _kv("seed", seed)
        _kv("out_dir", run_dir)
        _kv("best_epoch", best.epoch)
        _kv("val_acc", best.val_acc)
    return 0


def _load_model_for(args):
    ckpt = trainer.load_checkpoint(args.checkpoint)
    model, gnet, tc = trainer.model_from_checkpoint(ckpt)
    return ckpt, model, tc


def _check_data_shape(ckpt, ds):
    meta = ckpt.config.get("data_meta", {})
    want = tuple(meta.get("in_shape", ()))
    got = tuple(ds.x.shape[1:])
    if want and want != got:
        raise ValidationError(
            f"checkpoint expects sample shape {want}, dataset has {got}"
        )
    if meta.get("classes") not in (None, ds.classes):
        raise ValidationError(
            f"checkpoint expects {meta['classes']} classes, dataset has {ds.classes}"
        )


def cmd_eval(args) -> int:
    cfg = _resolved_config(args)
    ckpt, model, _ = _load_model_for(args)
    _, val_ds = config_mod.load_datasets(cfg["data"])
    _check_data_shape(ckpt, val_ds)
    acc = trainer.evaluate(model, val_ds)
    _kv("val_acc", acc)
    return 0


def cmd_diagnose(args) -> int:
    cfg = _resolved_config(args)
    ckpt, model, _ = _load_model_for(args)
    _, val_ds = config_mod.load_datasets(cfg["data"])
    _check_data_shape(ckpt, val_ds)

    n = args.samples
    if n < 1:
        raise ValidationError(f"--samples must be >= 1, got {n}")
    if n > len(val_ds):
        raise ValidationError(f"--samples {n} exceeds dataset size {len(val_ds)}")
    sub = val_ds.take(np.arange(n), split="diagnose")

    feats = []
    for start in range(0, n, 256):
        _, backbone = model.forward(np.asarray(sub.x[start : start + 256]))
        feats.append(backbone.values)
    z = np.concatenate(feats, axis=0).T.astype(np.float64)  # (d, m)
    ent = diagnostics.rectified_entropy(z)

    loss_fn, w0 = diagnostics.flat_param_loss(model, sub.x, sub.y)
    hes = diagnostics.hessian_spectrum(
        loss_fn, w0, power_iters=args.power_iters, probes=args.probes,
        seed=args.seed or 0,
    )

    report = {
        "samples": int(n),
        "checkpoint": str(args.checkpoint),
        "entropy": {
            "entropy_bits": float(ent.entropy_bits),
            "rank": int(ent.rank),
            "rank_ceiling": int(ent.rank_ceiling),
            "degenerate": bool(ent.degenerate),
        },
        "hessian": {
            "max_eig": float(hes.max_eig),
            "mean_eig": float(hes.mean_eig),
            "iterations": int(hes.iterations),
            "residual": float(hes.residual),
            "converged": bool(hes.converged),
            "probes": int(hes.probes),
        },
    }

    out_dir = Path(args.out_dir) if args.out_dir else Path(args.checkpoint).resolve().parent.parent / "diagnostics"
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    with open(out_dir / "singular_values.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "singular_value"])
        for i, s in enumerate(ent.singular_values):
            w.writerow([i, repr(float(s))])

    _kv("entropy_bits", ent.entropy_bits)
    _kv("rank", ent.rank)
    _kv("max_eig", hes.max_eig)
    _kv("mean_eig", hes.mean_eig)
    _kv("report", out_dir / "report.json")
    return 0


def cmd_mec_probe(args) -> int:
    z = linalg.load_matrix(args.matrix)
    d, m = z.shape
    cfg = config_mod.resolve_config({})
    pairs = [p for p in (args.set or []) if p.startswith("mec.")]
    cfg = config_mod.apply_overrides(cfg, pairs)
    mec_d = dict(cfg["mec"])
    if mec_d["eps_sq"] == "adaptive":
        # probes use a unit gram scale by default so the dumped matrix is
        # inspected as-is
        mec_d["eps_sq"] = d / m
    mec_d["normalize_columns"] = False
    mcfg = mec_mod.MecConfig(
        eps_sq=mec_d["eps_sq"],
        order=mec_d["order"],
        points=tuple(mec_d["points"]),
        experts=mec_d["experts"],
        maximize_entropy=mec_d["maximize_entropy"],
        normalize_columns=False,
    )
    z64, ctx = mec_mod.prepare_features(z, mcfg)
    exact = mec_mod.coding_length_exact(z64, ctx)

    rows = []
    rows.append(("exact", "", "", exact, 0.0, ""))
    for k in range(1, args.kmax + 1):
        sv = mec_mod.coding_length_taylor(z64, ctx, k)
        rows.append(("taylor", k, 0.0, sv.value, abs(sv.value - exact), sv.in_radius))
    flags = []
    for a in mcfg.points:
        sv = mec_mod.expert_length(z64, ctx, a, mcfg.order)
        flags.append(sv.in_radius)
        rows.append(("expert", mcfg.order, a, sv.value, abs(sv.value - exact), sv.in_radius))
    gnet = mec_mod.GatingNet(mcfg.experts, d)
    moe = mec_mod.mec_loss(z64, mcfg, gnet, ctx).values.item()
    rows.append(("moe", mcfg.order, "", moe, abs(moe - exact), all(flags)))

    out = Path(args.out_dir) if args.out_dir else Path(".")
    out.mkdir(parents=True, exist_ok=True)
    path = out / "mec_probe.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "k", "a", "value", "abs_error", "in_radius"])
        for r in rows:
            w.writerow(r)

    _kv("exact", exact)
    _kv("moe", moe)
    _kv("csv", path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="mecq",
        description="Quantization-aware training with entropy-coding regularization.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="run config JSON")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="dotted-path config override, e.g. mec.points=0,1,3,7")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out-dir", default=None)

    t = sub.add_parser("train", help="run the training loop")
    common(t)
    t.add_argument("--sweep", default=None, metavar="S0,S1,...",
                   help="comma list of seeds, one independent run each")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="top-1 accuracy of a checkpoint")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("diagnose", help="collapse entropy + Hessian sharpness")
    common(d)
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--samples", type=int, default=500)
    d.add_argument("--power-iters", type=int, default=100)
    d.add_argument("--probes", type=int, default=100)
    d.set_defaults(func=cmd_diagnose)

    m = sub.add_parser("mec-probe", help="coding-length estimates for a matrix dump")
    m.add_argument("--matrix", required=True, help="binary matrix dump")
    m.add_argument("--set", action="append", metavar="KEY=VALUE")
    m.add_argument("--seed", type=int, default=None)
    m.add_argument("--out-dir", default=None)
    m.add_argument("--kmax", type=int, default=8)
    m.set_defaults(func=cmd_mec_probe)

    return p


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(message)s", force=True)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DivergenceError, NumericalError) as err:
        log.error("%s", err)
        return 3
    except (ConfigError, DataError, ValidationError, OSError) as err:
        log.error("%s", err)
        return 2


def console_main():
    sys.exit(main())


if __name__ == "__main__":
    console_main()
