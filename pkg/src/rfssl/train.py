"""Self-supervised pretraining, supervised finetuning and core-wise prediction."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import losses
from .data import BiopsyCore, extract_patches
from .metrics import CorePrediction, auroc
from .nn import ModelState, ScheduleConfig, init_weights, lr_at_epoch, make_optimizer, set_lr, set_trainable
from .rf_signal import AugmentationConfig, augment_batch

log = logging.getLogger(__name__)

PRETRAIN_LOSSES = ("vicreg", "simclr", "byol")
FINETUNE_MODES = ("linear_finetune", "semisup_finetune", "supervised")


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainRun:
    mode: str = "pretrain"
    epochs: int = 200
    batch_size: int = 64
    schedule: ScheduleConfig | None = None
    optimizer: str = "adam"
    seed: int = 0
    augmentation: AugmentationConfig | None = field(default_factory=AugmentationConfig)
    loss: str = "vicreg"
    vicreg: losses.VicregWeights = field(default_factory=losses.VicregWeights)
    temperature: float = 0.1
    ema_decay: float = 0.99
    predictor_hidden: int = 512

    def __post_init__(self):
        if self.mode not in ("pretrain", *FINETUNE_MODES):
            raise ValueError(f"unknown training mode {self.mode!r}")
        if self.mode == "pretrain" and self.loss not in PRETRAIN_LOSSES:
            raise ValueError(f"unknown pretraining loss {self.loss!r}")
        if self.schedule is None:
            self.schedule = ScheduleConfig(total_epochs=self.epochs, warmup_epochs=min(10, self.epochs))
        if self.schedule.total_epochs != self.epochs:
            raise ValueError("schedule.total_epochs must equal epochs")


def _streams(seed: int) -> dict[str, np.random.Generator]:
    names = ("shuffle", "augment", "init")
    kids = np.random.SeedSequence([seed, 0x5EED]).spawn(len(names))
    return {n: np.random.default_rng(k) for n, k in zip(names, kids)}


def _batches(n: int, batch_size: int, rng: np.random.Generator, drop_last: bool):
    order = rng.permutation(n)
    stop = n - (n % batch_size) if drop_last and n >= batch_size else n
    for i in range(0, stop, batch_size):
        idx = order[i : i + batch_size]
        if len(idx) >= 2:
            yield idx


def _to_tensor(x: np.ndarray, dtype) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(x)).to(dtype)[:, None]


def pretrain(run: TrainRun, patches: np.ndarray, model: ModelState, epoch_callback=None):
    """Optimize backbone and projector on pairs of augmented views.

    Returns ``(model, losses_per_epoch)``; for BYOL the online network is
    returned. ``patches`` is an ``n x H x W`` array.
    """
    if run.mode != "pretrain":
        raise ValueError("pretrain needs a TrainRun with mode='pretrain'")
    streams = _streams(run.seed)
    dtype = next(model.parameters()).dtype
    set_trainable(model, {"backbone", "projector"})
    encoder = nn.Sequential(model.backbone, model.projector)
    params = list(encoder.parameters())
    predictor = target = None
    if run.loss == "byol":
        gen = torch.Generator().manual_seed(int(streams["init"].integers(2**62)))
        predictor = losses.make_predictor(model.arch.projector_out, run.predictor_hidden).to(dtype)
        init_weights(predictor, gen)
        target = losses.make_target(encoder)
        params += list(predictor.parameters())
    opt = make_optimizer(run.optimizer, params, lr=run.schedule.base_lr)
    aug = run.augmentation or AugmentationConfig(skip_probability=1.0)
    curve = []
    for epoch in range(run.epochs):
        set_lr(opt, lr_at_epoch(run.schedule, epoch))
        encoder.train()
        total, count = 0.0, 0
        for idx in _batches(len(patches), run.batch_size, streams["shuffle"], drop_last=True):
            x1 = _to_tensor(augment_batch(patches[idx], aug, streams["augment"]), dtype)
            x2 = _to_tensor(augment_batch(patches[idx], aug, streams["augment"]), dtype)
            if run.loss == "byol":
                value = losses.byol_step(encoder, target, predictor, x1, x2, opt, run.ema_decay)
            else:
                z1, z2 = encoder(x1), encoder(x2)
                if run.loss == "vicreg":
                    loss, _ = losses.vicreg_loss(z1, z2, run.vicreg)
                else:
                    loss = losses.nt_xent_loss(z1, z2, run.temperature)
                if not torch.isfinite(loss):
                    raise DivergenceError(f"non-finite {run.loss} loss at epoch {epoch}")
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                value = float(loss.detach())
            if not np.isfinite(value):
                raise DivergenceError(f"non-finite {run.loss} loss at epoch {epoch}")
            total += value * len(idx)
            count += len(idx)
        curve.append(total / max(count, 1))
        log.info("pretrain %s epoch %d loss %.5f", run.loss, epoch, curve[-1])
        if epoch_callback is not None:
            epoch_callback(epoch, curve[-1])
    model.eval()
    return model, curve


@torch.no_grad()
def embed(model: ModelState, patches: np.ndarray, which: str = "backbone", batch_size: int = 256) -> np.ndarray:
    """Eval-mode representations (``backbone``) or projections (``projector``)."""
    model.eval()
    dtype = next(model.parameters()).dtype
    out = []
    for i in range(0, len(patches), batch_size):
        h = model.backbone(_to_tensor(patches[i : i + batch_size], dtype))
        if which == "projector":
            h = model.projector(h)
        out.append(h.numpy())
    if not out:
        return np.zeros((0, model.arch.feature_dim))
    return np.concatenate(out)


@torch.no_grad()
def cancer_probability(model: ModelState, patches: np.ndarray, batch_size: int = 256) -> np.ndarray:
    model.eval()
    dtype = next(model.parameters()).dtype
    out = []
    for i in range(0, len(patches), batch_size):
        logits = model.head(model.backbone(_to_tensor(patches[i : i + batch_size], dtype)))
        out.append(torch.softmax(logits, dim=1)[:, 1].numpy())
    return np.concatenate(out) if out else np.zeros(0)


@dataclass
class ValidationSet:
    """Labeled patches used for model selection; scored with patch AUROC."""

    patches: np.ndarray
    labels: np.ndarray


def finetune(
    run: TrainRun,
    patches: np.ndarray,
    labels: np.ndarray,
    model: ModelState,
    val: ValidationSet | None = None,
    val_scorer=None,
):
    """Cross-entropy training of the classifier (and, unless linear, the backbone).

    After every epoch the validation AUROC is recorded; the returned model
    is the state from the best epoch (first one on ties). ``val_scorer``
    overrides the scoring with a callable ``(model, epoch) -> float``.

    Returns ``(model, curve)`` where ``curve`` is a list of
    ``(train_loss, val_auroc)`` per epoch.
    """
    if run.mode not in FINETUNE_MODES:
        raise ValueError(f"finetune needs one of {FINETUNE_MODES}, got {run.mode!r}")
    labels = np.asarray(labels, dtype=np.int64)
    if len(np.unique(labels)) < 2:
        raise ValueError("finetuning needs both classes in the labeled set")
    streams = _streams(run.seed)
    dtype = next(model.parameters()).dtype
    linear = run.mode == "linear_finetune"
    set_trainable(model, {"head"} if linear else {"backbone", "head"})
    params = [p for p in model.parameters() if p.requires_grad]
    opt = make_optimizer(run.optimizer, params, lr=run.schedule.base_lr)
    aug = run.augmentation
    y_all = torch.from_numpy(labels)

    feats = None
    if linear and aug is None:
        # frozen backbone without augmentation: features never change
        feats = torch.from_numpy(embed(model, patches)).to(dtype)

    def score(epoch):
        if val_scorer is not None:
            return float(val_scorer(model, epoch))
        if val is None:
            return float("nan")
        return auroc(val.labels, cancer_probability(model, val.patches))

    best_state, best_auc, curve = None, -np.inf, []
    for epoch in range(run.epochs):
        set_lr(opt, lr_at_epoch(run.schedule, epoch))
        total, count = 0.0, 0
        for idx in _batches(len(patches), run.batch_size, streams["shuffle"], drop_last=False):
            if feats is not None:
                model.head.train()
                logits = model.head(feats[idx])
            else:
                x = patches[idx]
                if aug is not None:
                    x = augment_batch(x, aug, streams["augment"])
                x = _to_tensor(x, dtype)
                model.backbone.train(not linear)
                model.head.train()
                logits = model.head(model.backbone(x))
            loss = F.cross_entropy(logits, y_all[idx])
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite cross entropy at epoch {epoch}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
            count += len(idx)
        val_auc = score(epoch)
        curve.append((total / max(count, 1), val_auc))
        log.info("finetune %s epoch %d loss %.5f val_auroc %.4f", run.mode, epoch, curve[-1][0], val_auc)
        if best_state is None or (np.isfinite(val_auc) and val_auc > best_auc):
            best_auc = val_auc if np.isfinite(val_auc) else best_auc
            best_state = copy.deepcopy(model.state_dict())
        if val is None and val_scorer is None:
            best_state = copy.deepcopy(model.state_dict())
    model.load_state_dict(best_state)
    model.eval()
    set_trainable(model, {"backbone", "projector", "head"})
    return model, curve


def predict_core(
    model: ModelState,
    core: BiopsyCore,
    threshold: float = 0.5,
    patch_size: int | None = None,
    stride_mm: float = 1.0,
    **extract_kw,
) -> CorePrediction:
    """Classify every needle-region patch of ``core`` and average the classes."""
    size = patch_size or model.arch.input_size
    recs = extract_patches(core, "needle", stride_mm=stride_mm, patch_size=size, **extract_kw)
    if not recs:
        log.warning("core %s has no qualifying needle patches; excluded", core.core_id)
        return CorePrediction.from_probabilities(core.core_id, [], core.label, core.involvement_percent, threshold)
    x = np.stack([r.patch for r in recs])
    probs = cancer_probability(model, x)
    return CorePrediction.from_probabilities(core.core_id, probs, core.label, core.involvement_percent, threshold)
