"""End-to-end experiment harness on phantom data.

One run generates a phantom cohort, fixes a patient-level test split, and
for every repeat re-draws the validation patients, pretrains (once per SSL
loss), finetunes every configured arm and evaluates core- and patch-wise.
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import io
import json
import logging
from pathlib import Path

import numpy as np
import torch

from . import data as D
from .heatmap import render_heatmap
from .losses import VicregWeights
from .metrics import compute_metrics, predicted_involvement, auroc
from .nn import Architecture, ModelState, ScheduleConfig
from .rf_signal import AugmentationConfig, analytic_signal
from .train import TrainRun, ValidationSet, finetune, predict_core, pretrain

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
PRETRAIN_KINDS = ("vicreg", "simclr", "byol", "none")
FINETUNE_KINDS = {"linear": "linear_finetune", "semisup": "semisup_finetune", "supervised": "supervised"}


class ConfigError(ValueError):
    pass


def dataclass_defaults(cls) -> dict:
    """Field name to default for every field of ``cls`` that has a plain default."""
    return {f.name: f.default for f in dataclasses.fields(cls) if f.default is not dataclasses.MISSING}


DEFAULT_CONFIG: dict = {
    "schema_version": SCHEMA_VERSION,
    "seed": 0,
    "repeats": 2,
    "threads": 1,
    "phantom": {},
    "data": {
        "patients": 120,
        "cores_per_patient": 1,
        "cancer_patient_fraction": 0.5,
        "test_cancer_fraction": 0.25,
        "val_fraction": 0.2,
        "patch_size": 32,
        "patch_mm": 5.0,
        "unlabeled_count": 2000,
        "labeled_count": 200,
        "unlabeled_stride_mm": 5.0,
        "labeled_stride_mm": 2.5,
        "eval_stride_mm": 1.0,
        "min_involvement": 40.0,
    },
    "architecture": {"preset": "tiny"},
    "pretrain": {"epochs": 50, "batch_size": 64, "base_lr": 1e-3, "warmup_epochs": 10, "optimizer": "adam"},
    "linear": {"epochs": 50, "batch_size": 32, "base_lr": 1e-2, "warmup_epochs": 10, "optimizer": "adam"},
    "finetune": {"epochs": 50, "batch_size": 32, "base_lr": 1e-3, "warmup_epochs": 10, "optimizer": "novograd", "augment": False},
    "vicreg": {**dataclass_defaults(VicregWeights), "invariance_norm": "mean"},
    "simclr": {"temperature": 0.1},
    "byol": {"ema_decay": 0.99, "predictor_hidden": 512},
    "augmentation": {},
    "arms": [
        {"name": "ssl-linear", "pretrain": "vicreg", "finetune": "linear"},
        {"name": "random-linear", "pretrain": "none", "finetune": "linear"},
    ],
    "heatmaps": 2,
}

_OPEN_SECTIONS = {
    "phantom": dataclass_defaults(D.PhantomConfig),
    "augmentation": dataclass_defaults(AugmentationConfig),
    "architecture": {"preset": "tiny", **{k: v for k, v in dataclass_defaults(Architecture).items() if k != "input_size"}},
}


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def merge_config(base: dict, user: dict, open_sections: dict | None = None, path: str = "") -> dict:
    """Overlay ``user`` on ``base``; keys absent from ``base`` are rejected.

    Top-level sections named in ``open_sections`` accept exactly the keys of
    the mapping given there, even when ``base`` leaves them empty.
    """
    open_sections = _OPEN_SECTIONS if open_sections is None else open_sections
    out = copy.deepcopy(base)
    for k, v in user.items():
        key = f"{path}{k}"
        if path == "" and k in open_sections:
            if not isinstance(v, dict):
                raise ConfigError(f"{key} must be an object")
            unknown = set(v) - set(open_sections[k])
            if unknown:
                raise ConfigError(f"unknown keys in {key}: {sorted(unknown)}")
            out[k] = {**out.get(k, {}), **copy.deepcopy(v)}
        elif k not in base:
            raise ConfigError(f"unknown config key {key!r}")
        elif isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"{key} must be an object")
            out[k] = merge_config(base[k], v, open_sections, key + ".")
        else:
            out[k] = copy.deepcopy(v)
    return out


def _coerce(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def overrides_to_dict(overrides: list[str]) -> dict:
    """Turn ``a.b.c=value`` strings into a nested dict; values are parsed as
    JSON when possible and kept as strings otherwise."""
    patch: dict = {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        parts = key.split(".")
        node = patch
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = _coerce(value)
    return patch


def apply_overrides(cfg: dict, overrides: list[str], open_sections: dict | None = None) -> dict:
    return merge_config(cfg, overrides_to_dict(overrides), open_sections)


def resolve_config(user: dict | None = None, overrides: list[str] | None = None) -> dict:
    """Merge a user config over the defaults and validate it."""
    cfg = merge_config(DEFAULT_CONFIG, user or {})
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    if cfg["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {cfg['schema_version']}")
    if int(cfg["repeats"]) < 1:
        raise ConfigError("repeats must be at least 1")
    if not cfg["arms"]:
        raise ConfigError("no arms configured")
    names = set()
    for arm in cfg["arms"]:
        unknown = set(arm) - {"name", "pretrain", "finetune"}
        if unknown:
            raise ConfigError(f"unknown arm keys {sorted(unknown)}")
        if arm.get("name") in names or not arm.get("name"):
            raise ConfigError(f"arm names must be unique and non-empty: {arm.get('name')!r}")
        names.add(arm["name"])
        if arm.get("pretrain") not in PRETRAIN_KINDS:
            raise ConfigError(f"arm {arm['name']}: unknown pretraining loss {arm.get('pretrain')!r}")
        if arm.get("finetune") not in FINETUNE_KINDS:
            raise ConfigError(f"arm {arm['name']}: unknown finetuning mode {arm.get('finetune')!r}")
        if arm["pretrain"] != "none" and arm["finetune"] == "supervised":
            raise ConfigError(f"arm {arm['name']}: supervised arms train from scratch; use 'semisup'")
    for section in ("pretrain", "linear", "finetune"):
        if cfg[section]["optimizer"] not in ("adam", "novograd"):
            raise ConfigError(f"{section}.optimizer must be 'adam' or 'novograd'")
    try:
        D.PhantomConfig(**cfg["phantom"])
        AugmentationConfig(**cfg["augmentation"])
        VicregWeights(**cfg["vicreg"])
        _architecture(cfg)
        for section in ("pretrain", "linear", "finetune"):
            _schedule(cfg[section])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _architecture(cfg: dict) -> Architecture:
    a = dict(cfg["architecture"])
    preset = a.pop("preset", "tiny")
    return Architecture.preset(preset, input_size=cfg["data"]["patch_size"], **a)


def _schedule(section: dict) -> ScheduleConfig:
    epochs = int(section["epochs"])
    return ScheduleConfig(section["base_lr"], min(int(section["warmup_epochs"]), epochs), epochs)


# ---------------------------------------------------------------------------
# data preparation
# ---------------------------------------------------------------------------


def _stack(recs) -> np.ndarray:
    return np.stack([r.patch for r in recs]) if recs else np.zeros((0, 1, 1), np.float32)


def summary_feature_auroc(train_cores, test_cores, patch_mm: float = 5.0, stride_mm: float = 5.0) -> float:
    """Learnability check: logistic regression on (mean, std) of the raw
    envelope of each prostate-region patch, scored by patch AUROC."""
    from sklearn.linear_model import LogisticRegression

    def feats(cores):
        x, y = [], []
        for c in cores:
            for top, left, wh, ww in D.window_grid(c, "prostate", patch_mm, stride_mm):
                env = np.abs(analytic_signal(c.frame.samples[top : top + wh, left : left + ww], axis=0))
                x.append([env.mean(), env.std()])
                y.append(c.label)
        return np.array(x), np.array(y)

    xa, ya = feats(train_cores)
    xb, yb = feats(test_cores)
    mu, sd = xa.mean(0), xa.std(0) + 1e-12
    clf = LogisticRegression().fit((xa - mu) / sd, ya)
    return auroc(yb, clf.decision_function((xb - mu) / sd))


class Cohort:
    """Phantom cores with a fixed test split and cached patch extraction."""

    def __init__(self, cfg: dict):
        d = cfg["data"]
        self.cfg = cfg
        self.phantom = D.PhantomConfig(**cfg["phantom"])
        self.cores = D.generate_cohort(
            d["patients"], d["cores_per_patient"], cfg["seed"], self.phantom, d["cancer_patient_fraction"]
        )
        self.split = D.split_patients(self.cores, d["test_cancer_fraction"], seed=cfg["seed"], val_fraction=0.0)
        test = set(self.split.test_patients)
        self.test_cores = [c for c in self.cores if c.patient_id in test]
        self.dev_cores = [c for c in self.cores if c.patient_id not in test]
        if len({c.label for c in self.test_cores}) < 2:
            raise RuntimeError("the test split holds a single class; increase data.patients or change the seed")
        self._cache: dict = {}

    def patches(self, core, region: str, stride: float):
        key = (core.core_id, region, stride)
        if key not in self._cache:
            d = self.cfg["data"]
            self._cache[key] = D.extract_patches(core, region, d["patch_mm"], stride, patch_size=d["patch_size"])
        return self._cache[key]

    def repeat_data(self, rng: np.random.Generator):
        d = self.cfg["data"]
        dev_patients = sorted({c.patient_id for c in self.dev_cores})
        perm = rng.permutation(len(dev_patients))
        n_val = int(round(d["val_fraction"] * len(dev_patients)))
        val_p = {dev_patients[i] for i in perm[:n_val]}
        train_cores = [c for c in self.dev_cores if c.patient_id not in val_p]
        val_cores = [c for c in self.dev_cores if c.patient_id in val_p]

        unl = [r for c in self.dev_cores for r in self.patches(c, "prostate", d["unlabeled_stride_mm"])]
        take = rng.permutation(len(unl))[: d["unlabeled_count"]]
        unlabeled = _stack([unl[i] for i in np.sort(take)])

        kept = D.balance_and_filter(train_cores, d["min_involvement"], balance=True, seed=int(rng.integers(2**31)))
        lab = [r for c in kept for r in self.patches(c, "needle", d["labeled_stride_mm"])]
        labels = np.array([r.weak_label for r in lab])
        per_class = d["labeled_count"] // 2
        pick = []
        for cls in (0, 1):
            idx = np.nonzero(labels == cls)[0]
            if idx.size == 0:
                raise RuntimeError(f"no labeled patches of class {cls}")
            pick.extend(np.sort(rng.choice(idx, size=min(per_class, idx.size), replace=False)).tolist())
        labeled_x = _stack([lab[i] for i in pick])
        labeled_y = labels[pick]

        val_kept = [c for c in val_cores if c.label == 0 or c.involvement_percent >= d["min_involvement"]]
        val_recs = [r for c in val_kept for r in self.patches(c, "needle", d["labeled_stride_mm"])]
        val = ValidationSet(_stack(val_recs), np.array([r.weak_label for r in val_recs]))
        return {
            "unlabeled": unlabeled,
            "labeled_x": labeled_x,
            "labeled_y": labeled_y,
            "val": val,
            "train_patients": sorted({c.patient_id for c in train_cores}),
            "val_patients": sorted(val_p),
        }


# ---------------------------------------------------------------------------
# running
# ---------------------------------------------------------------------------


def _repeat_streams(seed: int, repeat: int) -> dict[str, int]:
    names = ("split", "init", "pretrain", "finetune")
    kids = np.random.SeedSequence([seed, repeat]).spawn(len(names))
    return {n: int(k.generate_state(1)[0]) for n, k in zip(names, kids)}


def _aug(cfg: dict) -> AugmentationConfig:
    return AugmentationConfig(**cfg["augmentation"])


def _pretrain_run(cfg: dict, loss: str, seed: int) -> TrainRun:
    p = cfg["pretrain"]
    return TrainRun(
        mode="pretrain",
        epochs=int(p["epochs"]),
        batch_size=int(p["batch_size"]),
        schedule=_schedule(p),
        optimizer=p["optimizer"],
        seed=seed,
        augmentation=_aug(cfg),
        loss=loss,
        vicreg=VicregWeights(**cfg["vicreg"]),
        temperature=cfg["simclr"]["temperature"],
        ema_decay=cfg["byol"]["ema_decay"],
        predictor_hidden=cfg["byol"]["predictor_hidden"],
    )


def _finetune_run(cfg: dict, kind: str, seed: int) -> TrainRun:
    section = cfg["linear"] if kind == "linear" else cfg["finetune"]
    augment = section.get("augment", False)
    return TrainRun(
        mode=FINETUNE_KINDS[kind],
        epochs=int(section["epochs"]),
        batch_size=int(section["batch_size"]),
        schedule=_schedule(section),
        optimizer=section["optimizer"],
        seed=seed,
        augmentation=_aug(cfg) if augment else None,
    )


def _csv(rows, header) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(x) -> str:
    return "" if x is None or (isinstance(x, float) and not np.isfinite(x)) else repr(float(x))


def _summary(values: list[float]) -> dict:
    arr = np.array(values, dtype=float)
    return {"mean": float(arr.mean()), "std": float(arr.std(ddof=1)) if arr.size > 1 else 0.0, "n": int(arr.size)}


def run_experiment(cfg: dict, out_dir=None, progress=None) -> dict:
    """Execute every arm for every repeat; write report and artifacts to ``out_dir``.

    Returns the report dictionary. A failing arm is recorded with its error
    and the remaining arms still run.
    """
    validate_config(cfg)
    torch.set_num_threads(max(1, int(cfg["threads"])))
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        for sub in ("curves", "scatter", "heatmaps"):
            (out / sub).mkdir(parents=True, exist_ok=True)
        (out / "config.resolved.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")

    def emit(rel: str, payload) -> None:
        if out is None:
            return
        path = out / rel
        if isinstance(payload, bytes):
            path.write_bytes(payload)
        else:
            path.write_text(payload)

    cohort = Cohort(cfg)
    arch = _architecture(cfg)
    d = cfg["data"]
    report = {
        "schema_version": SCHEMA_VERSION,
        "seed": cfg["seed"],
        "repeats": cfg["repeats"],
        "data": {
            "cores": len(cohort.cores),
            "test_cores": len(cohort.test_cores),
            "test_patients": cohort.split.test_patients,
        },
        "sanity": {"summary_feature_auroc": summary_feature_auroc(cohort.dev_cores, cohort.test_cores, d["patch_mm"])},
        "arms": {a["name"]: {"pretrain": a["pretrain"], "finetune": a["finetune"], "status": "ok", "runs": []} for a in cfg["arms"]},
    }

    for r in range(int(cfg["repeats"])):
        seeds = _repeat_streams(int(cfg["seed"]), r)
        rd = cohort.repeat_data(np.random.default_rng(seeds["split"]))
        pretrained: dict[str, ModelState | Exception] = {}
        for arm in cfg["arms"]:
            entry = report["arms"][arm["name"]]
            if entry["status"] == "failed":
                continue
            tag = f"{arm['name']}_r{r}"
            try:
                loss = arm["pretrain"]
                if loss == "none":
                    model = ModelState(arch, seed=seeds["init"])
                else:
                    if loss not in pretrained:
                        try:
                            run = _pretrain_run(cfg, loss, seeds["pretrain"])
                            m, curve = pretrain(run, rd["unlabeled"], ModelState(arch, seed=seeds["init"]))
                            emit(f"curves/{loss}_r{r}_pretrain.csv", _csv([(i, _fmt(v), "") for i, v in enumerate(curve)], ["epoch", "loss", "val_auroc"]))
                            pretrained[loss] = m
                        except Exception as exc:  # recorded per arm below
                            pretrained[loss] = exc
                    if isinstance(pretrained[loss], Exception):
                        raise pretrained[loss]
                    model = copy.deepcopy(pretrained[loss])
                ft = _finetune_run(cfg, arm["finetune"], seeds["finetune"])
                model, curve = finetune(ft, rd["labeled_x"], rd["labeled_y"], model, rd["val"])
                emit(f"curves/{tag}_finetune.csv", _csv([(i, _fmt(l), _fmt(v)) for i, (l, v) in enumerate(curve)], ["epoch", "loss", "val_auroc"]))
                preds = [predict_core(model, c, stride_mm=d["eval_stride_mm"], patch_mm=d["patch_mm"]) for c in cohort.test_cores]
                core_m = compute_metrics(preds, "core", d["min_involvement"])
                patch_m = compute_metrics(preds, "patch", d["min_involvement"])
                emit(
                    f"scatter/{tag}.csv",
                    _csv(
                        [(p.core_id, _fmt(p.involvement_percent / 100), _fmt(predicted_involvement(p))) for p in preds if not p.empty],
                        ["core_id", "true_involvement", "predicted_involvement"],
                    ),
                )
                if r == 0:
                    for c in cohort.test_cores[: int(cfg["heatmaps"])]:
                        emit(f"heatmaps/{arm['name']}_{c.core_id}.ppm", render_heatmap(model, c, stride_mm=d["eval_stride_mm"], patch_mm=d["patch_mm"]))
                entry["runs"].append(
                    {
                        "repeat": r,
                        "best_val_auroc": max((v for _, v in curve if np.isfinite(v)), default=None),
                        "core": core_m.as_dict(),
                        "patch": patch_m.as_dict(),
                        "empty_cores": [p.core_id for p in preds if p.empty],
                    }
                )
            except Exception as exc:
                log.exception("arm %s failed in repeat %d", arm["name"], r)
                entry["status"] = "failed"
                entry["error"] = f"{type(exc).__name__}: {exc}"
            if progress is not None:
                progress(arm["name"], r, entry)

    for entry in report["arms"].values():
        if entry["runs"]:
            entry["summary"] = {
                f"{level}_{metric}": _summary([run[level][metric] for run in entry["runs"]])
                for level in ("core", "patch")
                for metric in ("auroc", "avg_precision", "balanced_accuracy")
            }
    emit("report.json", json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report
