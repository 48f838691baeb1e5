"""Command-line entry point: ``rfssl <subcommand> ...``.

Exit codes are 0 on success, 1 on runtime failure and 2 on usage or
configuration errors. Failures print one line ``error[<category>]: <message>``
to stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import data as D
from .container import ContainerFormatError
from .experiment import (
    ConfigError,
    dataclass_defaults,
    merge_config,
    overrides_to_dict,
    resolve_config,
    run_experiment,
)
from .heatmap import render_heatmap
from .losses import VicregWeights
from .metrics import compute_metrics, predicted_involvement
from .nn import Architecture, ModelState, ScheduleConfig, load_checkpoint, save_checkpoint
from .rf_signal import AugmentationConfig
from .train import DivergenceError, TrainRun, ValidationSet, finetune, predict_core, pretrain

log = logging.getLogger("rfssl")

FINETUNE_MODES = {"linear": "linear_finetune", "semisup": "semisup_finetune", "supervised": "supervised"}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# training configuration shared by pretrain / finetune
# ---------------------------------------------------------------------------

TRAIN_DEFAULTS = {
    "run": {
        "epochs": 200,
        "batch_size": 64,
        "base_lr": 1e-4,
        "warmup_epochs": 10,
        "optimizer": "adam",
        "loss": "vicreg",
        "temperature": 0.1,
        "ema_decay": 0.99,
        "predictor_hidden": 512,
        "augment": True,
    },
    "architecture": {"preset": "tiny"},
    "augmentation": {},
    "vicreg": {},
}
TRAIN_OPEN = {
    "architecture": {"preset": "tiny", **dataclass_defaults(Architecture)},
    "augmentation": dataclass_defaults(AugmentationConfig),
    "vicreg": dataclass_defaults(VicregWeights),
}


def _load_json(path) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return cfg


def resolve_train_config(args, mode: str, defaults: dict | None = None) -> dict:
    """Defaults, then ``--config`` file, then ``--set`` overrides."""
    cfg = merge_config(defaults or TRAIN_DEFAULTS, {}, TRAIN_OPEN)
    if args.config:
        cfg = merge_config(cfg, _load_json(args.config), TRAIN_OPEN)
    if args.set:
        cfg = merge_config(cfg, overrides_to_dict(args.set), TRAIN_OPEN)
    try:
        _build_run(cfg, mode, 0)
        _arch_from(cfg, None)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def _arch_from(cfg: dict, input_size: int | None) -> Architecture:
    a = dict(cfg["architecture"])
    preset = a.pop("preset", "tiny")
    if input_size is not None:
        a["input_size"] = input_size
    return Architecture.preset(preset, **a)


def _build_run(cfg: dict, mode: str, seed: int) -> TrainRun:
    r = cfg["run"]
    epochs = int(r["epochs"])
    return TrainRun(
        mode=mode,
        epochs=epochs,
        batch_size=int(r["batch_size"]),
        schedule=ScheduleConfig(r["base_lr"], min(int(r["warmup_epochs"]), epochs), epochs),
        optimizer=r["optimizer"],
        seed=seed,
        augmentation=AugmentationConfig(**cfg["augmentation"]) if r.get("augment", True) else None,
        loss=r.get("loss", "vicreg"),
        vicreg=VicregWeights(**cfg["vicreg"]),
        temperature=r.get("temperature", 0.1),
        ema_decay=r.get("ema_decay", 0.99),
        predictor_hidden=r.get("predictor_hidden", 512),
    )


def _sidecar(path: Path, args, resolved: dict | None = None) -> None:
    """Write ``<path>.config.json`` with the arguments and resolved config."""
    argv = {k: v for k, v in vars(args).items() if k not in ("func",)}
    payload = {"subcommand": args.command, "arguments": argv, "config": resolved}
    Path(str(path) + ".config.json").write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")


def _curve_csv(path: Path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "val_auroc"])
        for i, (loss, val) in enumerate(rows):
            w.writerow([i, repr(float(loss)), "" if val is None or not np.isfinite(val) else repr(float(val))])


def _seeds(seed: int) -> dict[str, int]:
    names = ("data", "augmentation", "init", "shuffle")
    kids = np.random.SeedSequence(seed).spawn(len(names))
    return {n: int(k.generate_state(1)[0]) for n, k in zip(names, kids)}


def _select_cores(cores, split_name: str | None, manifest_path: Path):
    if split_name is None:
        return cores
    if not manifest_path.exists():
        raise UsageError(f"--split needs {manifest_path}")
    split = json.loads(manifest_path.read_text())["split"]
    if split is None:
        raise UsageError(f"{manifest_path} carries no split")
    keep = set(split[f"{split_name}_patients"])
    return [c for c in cores if c.patient_id in keep]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth_gen(args) -> int:
    cfg = D.PhantomConfig()
    if args.config:
        cfg = D.PhantomConfig(**merge_config(asdict(cfg), _load_json(args.config), {}))
    if args.set:
        cfg = D.PhantomConfig(**merge_config(asdict(cfg), overrides_to_dict(args.set), {}))
    if args.cores < 1 or args.cores_per_patient < 1 or args.cores % args.cores_per_patient:
        raise UsageError("--cores must be a positive multiple of --cores-per-patient")
    n_patients = args.cores // args.cores_per_patient
    cores = D.generate_cohort(n_patients, args.cores_per_patient, _seeds(args.seed)["data"], cfg, args.cancer_fraction)
    split = None
    if n_patients >= 4 and sum(c.label for c in cores) >= 2:
        split = D.split_patients(cores, args.test_cancer_fraction, seed=args.seed, val_fraction=args.val_fraction)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    D.store_cores(cores, out / "cores.bin")
    (out / "manifest.json").write_text(json.dumps(D.cores_manifest(cores, split), indent=2, sort_keys=True) + "\n")
    _sidecar(out / "cores.bin", args, {"phantom": asdict(cfg)})
    print(f"wrote {len(cores)} cores for {n_patients} patients to {out}")
    return 0


def cmd_extract_patches(args) -> int:
    cores_path = Path(args.cores)
    cores = _select_cores(D.load_cores(cores_path), args.split, cores_path.with_name("manifest.json"))
    if args.balance and args.seed is None:
        raise UsageError("--balance undersamples randomly and needs --seed")
    if args.min_involvement is not None or args.balance:
        floor = 0.0 if args.min_involvement is None else args.min_involvement
        cores = D.balance_and_filter(cores, floor, balance=args.balance, seed=_seeds(args.seed or 0)["data"])
    recs = []
    for c in cores:
        recs += D.extract_patches(c, args.region, args.patch_mm, args.stride_mm, patch_size=args.patch_size)
    if args.max_count is not None and len(recs) > args.max_count:
        if args.seed is None:
            raise UsageError("--max-count subsamples randomly and needs --seed")
        take = np.sort(np.random.default_rng(_seeds(args.seed)["data"]).permutation(len(recs))[: args.max_count])
        recs = [recs[i] for i in take]
    if not recs:
        raise RuntimeError("no qualifying patches")
    D.store_dataset(recs, args.out, {"region": args.region, "stride_mm": args.stride_mm})
    _sidecar(Path(args.out), args)
    print(f"wrote {len(recs)} {args.region} patches to {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = resolve_train_config(args, "pretrain")
    x, _ = D.dataset_arrays(D.load_dataset(args.data))
    s = _seeds(args.seed)
    model = ModelState(_arch_from(cfg, x.shape[-1]), seed=s["init"])
    run = _build_run(cfg, "pretrain", s["shuffle"])
    model, curve = pretrain(run, x, model)
    save_checkpoint(args.out, model, extra={"stage": "pretrain", "loss": run.loss, "seed": args.seed})
    _curve_csv(Path(str(args.out) + ".curve.csv"), [(v, None) for v in curve])
    _sidecar(Path(args.out), args, cfg)
    print(f"pretrained {run.loss} for {run.epochs} epochs, final loss {curve[-1]:.6g}")
    return 0


def cmd_finetune(args) -> int:
    defaults = merge_config(TRAIN_DEFAULTS, {"run": {"epochs": 50, "augment": False}}, TRAIN_OPEN)
    cfg = resolve_train_config(args, FINETUNE_MODES[args.mode], defaults)
    x, y = D.dataset_arrays(D.load_dataset(args.data))
    s = _seeds(args.seed)
    if args.checkpoint:
        model, _, _ = load_checkpoint(args.checkpoint)
        if model.arch.input_size != x.shape[-1]:
            raise UsageError(f"checkpoint expects {model.arch.input_size} px patches, data has {x.shape[-1]}")
    else:
        if args.mode != "supervised":
            raise UsageError(f"--mode {args.mode} needs --checkpoint")
        model = ModelState(_arch_from(cfg, x.shape[-1]), seed=s["init"])
    val = None
    if args.val:
        vx, vy = D.dataset_arrays(D.load_dataset(args.val))
        val = ValidationSet(vx, vy)
    run = _build_run(cfg, FINETUNE_MODES[args.mode], s["shuffle"])
    model, curve = finetune(run, x, y, model, val)
    save_checkpoint(args.out, model, extra={"stage": "finetune", "mode": args.mode, "seed": args.seed})
    _curve_csv(Path(str(args.out) + ".curve.csv"), curve)
    _sidecar(Path(args.out), args, cfg)
    print(f"finetuned ({args.mode}) for {run.epochs} epochs")
    return 0


def cmd_evaluate(args) -> int:
    model, _, _ = load_checkpoint(args.checkpoint)
    cores_path = Path(args.cores)
    cores = _select_cores(D.load_cores(cores_path), args.split, cores_path.with_name("manifest.json"))
    preds = [predict_core(model, c, args.threshold, stride_mm=args.stride_mm, patch_mm=args.patch_mm) for c in cores]
    report = {
        "schema_version": 1,
        "core": compute_metrics(preds, "core", args.min_involvement, args.threshold).as_dict(),
        "patch": compute_metrics(preds, "patch", args.min_involvement, args.threshold).as_dict(),
        "empty_cores": [p.core_id for p in preds if p.empty],
    }
    out = Path(args.out)
    out.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    with open(str(out) + ".scatter.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["core_id", "true_involvement", "predicted_involvement"])
        for p in preds:
            if not p.empty:
                w.writerow([p.core_id, repr(p.involvement_percent / 100), repr(predicted_involvement(p))])
    _sidecar(out, args)
    print(f"core AUROC {report['core']['auroc']:.4f}, patch AUROC {report['patch']['auroc']:.4f}")
    return 0


def cmd_heatmap(args) -> int:
    model, _, _ = load_checkpoint(args.checkpoint)
    cores = {c.core_id: c for c in D.load_cores(args.cores)}
    if args.core_id not in cores:
        raise UsageError(f"unknown core id {args.core_id!r}")
    image = render_heatmap(model, cores[args.core_id], args.stride_mm, args.threshold, patch_mm=args.patch_mm)
    Path(args.out).write_bytes(image)
    _sidecar(Path(args.out), args)
    print(f"wrote {args.out}")
    return 0


def cmd_run_experiment(args) -> int:
    user = _load_json(args.config) if args.config else {}
    overrides = list(args.set or []) + [f"seed={args.seed}", f"threads={args.threads}"]
    cfg = resolve_config(user, overrides)
    report = run_experiment(cfg, args.out)
    for name, arm in report["arms"].items():
        if arm["status"] == "ok":
            m = arm["summary"]["core_auroc"]
            print(f"{name}: core AUROC {m['mean']:.4f} +/- {m['std']:.4f}")
        else:
            print(f"{name}: failed ({arm['error']})")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    torch.manual_seed(args.seed)
    results = run_suite(args.seed, args.step, args.tol)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.name:<22} n={r.n_elements:<4} skipped={r.n_skipped:<3} rel_err={r.rel_error:.3e}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise GradientCheckError(f"gradient check failed for {', '.join(failed)}")
    return 0


class GradientCheckError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_config(p, with_set: bool = True) -> None:
    p.add_argument("--config", help="JSON config file")
    if with_set:
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted-key override; repeatable")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=1, help="cap on torch intra-op threads")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="rfssl", description="Self-supervised learning on RF ultrasound patches.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub_add = sub.add_parser
    sub.add_parser = lambda *a, **kw: sub_add(*a, parents=[common], **kw)

    p = sub.add_parser("synth-gen", help="generate phantom biopsy cores")
    p.add_argument("--cores", type=int, required=True)
    p.add_argument("--cores-per-patient", type=int, default=1)
    p.add_argument("--cancer-fraction", type=float, default=0.5)
    p.add_argument("--test-cancer-fraction", type=float, default=0.25)
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="output directory")
    _add_config(p)
    p.set_defaults(func=cmd_synth_gen)

    p = sub.add_parser("extract-patches", help="cut normalized patches from stored cores")
    p.add_argument("--cores", required=True)
    p.add_argument("--region", choices=("prostate", "needle"), required=True)
    p.add_argument("--split", choices=("train", "val", "test"))
    p.add_argument("--patch-mm", type=float, default=5.0)
    p.add_argument("--stride-mm", type=float, default=5.0)
    p.add_argument("--patch-size", type=int, default=256)
    p.add_argument("--min-involvement", type=float)
    p.add_argument("--balance", action="store_true", help="undersample benign cores (needs --seed)")
    p.add_argument("--max-count", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract_patches)

    p = sub.add_parser("pretrain", help="self-supervised pretraining")
    p.add_argument("--data", required=True, help="unlabeled patch dataset")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    _add_config(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="supervised finetuning on labeled patches")
    p.add_argument("--data", required=True, help="labeled patch dataset")
    p.add_argument("--val", help="validation patch dataset")
    p.add_argument("--checkpoint", help="pretrained checkpoint (omit for supervised from scratch)")
    p.add_argument("--mode", choices=tuple(FINETUNE_MODES), default="linear")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    _add_config(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="core- and patch-wise metrics on stored cores")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cores", required=True)
    p.add_argument("--split", choices=("train", "val", "test"))
    p.add_argument("--stride-mm", type=float, default=1.0)
    p.add_argument("--patch-mm", type=float, default=5.0)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--min-involvement", type=float, default=40.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("heatmap", help="render one core as a PPM image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cores", required=True)
    p.add_argument("--core-id", required=True)
    p.add_argument("--stride-mm", type=float, default=1.0)
    p.add_argument("--patch-mm", type=float, default=5.0)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("run-experiment", help="full phantom experiment over all configured arms")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="output directory")
    _add_config(p)
    p.set_defaults(func=cmd_run_experiment)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--step", type=float, default=1e-4)
    p.add_argument("--tol", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _category(exc: BaseException) -> tuple[str, int]:
    if isinstance(exc, UsageError):
        return "usage", 2
    if isinstance(exc, ConfigError):
        return "config", 2
    if isinstance(exc, (ContainerFormatError, OSError)):
        return "io", 1
    if isinstance(exc, DivergenceError):
        return "divergence", 1
    if isinstance(exc, GradientCheckError):
        return "gradcheck", 1
    return "runtime", 1


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        parser.print_usage(sys.stderr)
        print("error[usage]: --threads must be at least 1", file=sys.stderr)
        return 2
    torch.set_num_threads(args.threads)
    try:
        return args.func(args)
    except Exception as exc:
        category, code = _category(exc)
        if code == 2:
            parser.print_usage(sys.stderr)
        message = " ".join(str(exc).split()) or type(exc).__name__
        print(f"error[{category}]: {message}", file=sys.stderr)
        if args.verbose:
            log.exception("details")
        return code


if __name__ == "__main__":
    sys.exit(main())
