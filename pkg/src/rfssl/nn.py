"""Backbone, heads, optimizers, learning-rate schedule and checkpoints."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .container import ContainerFormatError, read_container, write_container

CHECKPOINT_MAGIC = b"RFSSLCK\x00"


class NonFiniteGradientError(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# architecture
# ---------------------------------------------------------------------------


@dataclass
class Architecture:
    input_size: int = 64
    stem_channels: int = 16
    stem_stride: int = 2
    stage_channels: tuple[int, ...] = (16, 32, 64)
    stage_blocks: tuple[int, ...] = (1, 1, 1)
    projector_hidden: int = 512
    projector_out: int = 128
    n_classes: int = 2
    norm_momentum: float = 0.9  # running <- momentum * running + (1 - momentum) * batch

    def __post_init__(self):
        self.stage_channels = tuple(self.stage_channels)
        self.stage_blocks = tuple(self.stage_blocks)
        if len(self.stage_channels) != len(self.stage_blocks):
            raise ValueError("stage_channels and stage_blocks must have equal length")

    @property
    def feature_dim(self) -> int:
        return self.stage_channels[-1]

    @classmethod
    def preset(cls, name: str, **overrides) -> "Architecture":
        presets = {
            "tiny": {},
            "small": dict(stem_channels=32, stage_channels=(32, 64, 128)),
            "full": dict(
                input_size=256,
                stem_channels=64,
                stage_channels=(64, 128, 256, 512),
                stage_blocks=(1, 1, 2, 1),  # about 6.1M backbone parameters
                projector_hidden=2048,
                projector_out=512,
            ),
            # for gradient checks
            "micro": dict(
                input_size=8, stem_channels=2, stage_channels=(2, 3), stage_blocks=(1, 1),
                projector_hidden=4, projector_out=3,
            ),
        }
        if name not in presets:
            raise ValueError(f"unknown architecture preset {name!r}")
        return cls(**{**presets[name], **overrides})


def _bn2d(c: int, arch: Architecture) -> nn.BatchNorm2d:
    return nn.BatchNorm2d(c, momentum=1 - arch.norm_momentum)


class ResidualBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int, arch: Architecture):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False)
        self.bn1 = _bn2d(c_out, arch)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1, bias=False)
        self.bn2 = _bn2d(c_out, arch)
        self.shortcut = nn.Identity()
        if stride != 1 or c_in != c_out:
            self.shortcut = nn.Sequential(nn.Conv2d(c_in, c_out, 1, stride=stride, bias=False), _bn2d(c_out, arch))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class Backbone(nn.Module):
    """Stem conv, residual stages, final normalization and global average pool."""

    def __init__(self, arch: Architecture):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(1, arch.stem_channels, 3, stride=arch.stem_stride, padding=1, bias=False),
            _bn2d(arch.stem_channels, arch),
            nn.ReLU(),
        )
        layers = []
        c_in = arch.stem_channels
        for i, (c, n) in enumerate(zip(arch.stage_channels, arch.stage_blocks)):
            for j in range(n):
                stride = 2 if (i > 0 and j == 0) else 1
                layers.append(ResidualBlock(c_in, c, stride, arch))
                c_in = c
        self.stages = nn.Sequential(*layers)
        self.final_norm = _bn2d(c_in, arch)

    def forward(self, x):
        x = self.stages(self.stem(x))
        x = F.relu(self.final_norm(x))
        return x.mean(dim=(2, 3))


def make_projector(d_in: int, hidden: int, d_out: int, arch: Architecture) -> nn.Sequential:
    return nn.Sequential(
        nn.Linear(d_in, hidden),
        nn.BatchNorm1d(hidden, momentum=1 - arch.norm_momentum),
        nn.ReLU(),
        nn.Linear(hidden, d_out),
    )


class ModelState(nn.Module):
    """Backbone ``f``, projector ``g`` and linear classifier ``k`` together."""

    def __init__(self, arch: Architecture | None = None, seed: int = 0):
        super().__init__()
        self.arch = arch or Architecture()
        gen = torch.Generator().manual_seed(seed)
        self.backbone = Backbone(self.arch)
        self.projector = make_projector(self.arch.feature_dim, self.arch.projector_hidden, self.arch.projector_out, self.arch)
        self.head = nn.Linear(self.arch.feature_dim, self.arch.n_classes)
        init_weights(self, gen)

    def part(self, name: str) -> nn.Module:
        return {"backbone": self.backbone, "projector": self.projector, "head": self.head}[name]


def init_weights(module: nn.Module, gen: torch.Generator) -> None:
    """He (fan-in) init for conv/linear weights, zero biases, unit norm scales."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight[0].numel()
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen, dtype=m.weight.dtype) * math.sqrt(2.0 / fan_in))
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, (nn.BatchNorm1d, nn.BatchNorm2d)):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def _as_batch(x, arch: Architecture) -> torch.Tensor:
    x = torch.as_tensor(x)
    if x.ndim == 3:
        x = x[:, None]
    if x.ndim != 4 or x.shape[1] != 1:
        raise ValueError(f"expected n x 1 x H x W input, got {tuple(x.shape)}")
    if x.shape[-2:] != (arch.input_size, arch.input_size):
        raise ValueError(f"input spatial size {tuple(x.shape[-2:])} does not match architecture {arch.input_size}")
    if x.shape[0] < 1:
        raise ValueError("empty batch")
    return x


def forward_backbone(state: ModelState, batch, train: bool = False) -> torch.Tensor:
    x = _as_batch(batch, state.arch).to(next(state.parameters()).dtype)
    state.backbone.train(train)
    if train:
        return state.backbone(x)
    with torch.no_grad():
        return state.backbone(x)


def forward_heads(state: ModelState, h: torch.Tensor, which: str, train: bool = False) -> torch.Tensor:
    if which not in ("projector", "classifier"):
        raise ValueError(f"unknown head {which!r}")
    if h.ndim != 2 or h.shape[1] != state.arch.feature_dim:
        raise ValueError(f"representation must be n x {state.arch.feature_dim}, got {tuple(h.shape)}")
    mod = state.projector if which == "projector" else state.head
    mod.train(train)
    if train:
        return mod(h)
    with torch.no_grad():
        return mod(h)


def set_trainable(state: ModelState, parts: set[str]) -> None:
    """Enable gradients only for the named parts (backbone/projector/head)."""
    for name in ("backbone", "projector", "head"):
        state.part(name).requires_grad_(name in parts)


def backward(state: nn.Module, loss: torch.Tensor) -> dict[str, torch.Tensor]:
    """Backpropagate ``loss`` and return gradients of all trainable parameters.

    Frozen parameters (``requires_grad=False``) never appear in the result.
    """
    if loss.grad_fn is None:
        raise RuntimeError("loss has no recorded graph; run a train-mode forward pass first")
    for p in state.parameters():
        p.grad = None
    loss.backward()
    return {n: p.grad for n, p in state.named_parameters() if p.requires_grad and p.grad is not None}


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


def _check_finite(grad: torch.Tensor, where: str) -> None:
    if not torch.isfinite(grad).all():
        raise NonFiniteGradientError(f"non-finite gradient in {where}")


def adam_update(param, grad, exp_avg, exp_avg_sq, step: int, lr: float, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
    """One bias-corrected Adam update, in place. ``step`` counts from 1."""
    if weight_decay:
        grad = grad + weight_decay * param
    exp_avg.mul_(beta1).add_(grad, alpha=1 - beta1)
    exp_avg_sq.mul_(beta2).addcmul_(grad, grad, value=1 - beta2)
    m_hat = exp_avg / (1 - beta1**step)
    v_hat = exp_avg_sq / (1 - beta2**step)
    param.sub_(lr * m_hat / (v_hat.sqrt() + eps))


def novograd_update(param, grad, exp_avg, layer_v, lr: float, beta1=0.95, beta2=0.98, eps=1e-8, weight_decay=0.0):
    """One NovoGrad update for a single layer, in place.

    ``layer_v`` is a 0-d tensor holding the layer's second moment of the
    gradient norm.
    """
    layer_v.mul_(beta2).add_((1 - beta2) * grad.pow(2).sum())
    g_hat = grad / (layer_v.sqrt() + eps)
    if weight_decay:
        g_hat = g_hat + weight_decay * param
    exp_avg.mul_(beta1).add_(g_hat)
    param.sub_(lr * exp_avg)


class Adam(torch.optim.Optimizer):
    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        super().__init__(params, dict(lr=lr, betas=betas, eps=eps, weight_decay=weight_decay))

    @torch.no_grad()
    def step(self, closure=None):
        for group in self.param_groups:
            b1, b2 = group["betas"]
            for i, p in enumerate(group["params"]):
                if p.grad is None:
                    continue
                _check_finite(p.grad, f"Adam parameter {i} of shape {tuple(p.shape)}")
                st = self.state[p]
                if not st:
                    st["step"] = 0
                    st["exp_avg"] = torch.zeros_like(p)
                    st["exp_avg_sq"] = torch.zeros_like(p)
                st["step"] += 1
                adam_update(p, p.grad, st["exp_avg"], st["exp_avg_sq"], st["step"], group["lr"], b1, b2, group["eps"], group["weight_decay"])


class NovoGrad(torch.optim.Optimizer):
    """Layer-wise normalized gradient with momentum; each tensor is a layer."""

    def __init__(self, params, lr=1e-4, betas=(0.95, 0.98), eps=1e-8, weight_decay=0.0):
        super().__init__(params, dict(lr=lr, betas=betas, eps=eps, weight_decay=weight_decay))

    @torch.no_grad()
    def step(self, closure=None):
        for group in self.param_groups:
            b1, b2 = group["betas"]
            for i, p in enumerate(group["params"]):
                if p.grad is None:
                    continue
                _check_finite(p.grad, f"NovoGrad parameter {i} of shape {tuple(p.shape)}")
                st = self.state[p]
                if not st:
                    st["step"] = 0
                    st["exp_avg"] = torch.zeros_like(p)
                    st["layer_v"] = torch.zeros((), dtype=p.dtype)
                st["step"] += 1
                novograd_update(p, p.grad, st["exp_avg"], st["layer_v"], group["lr"], b1, b2, group["eps"], group["weight_decay"])


def make_optimizer(kind: str, params, lr: float = 1e-4, **kw) -> torch.optim.Optimizer:
    if kind == "adam":
        return Adam(params, lr=lr, **kw)
    if kind == "novograd":
        return NovoGrad(params, lr=lr, **kw)
    raise ValueError(f"unknown optimizer {kind!r}")


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------


@dataclass
class ScheduleConfig:
    base_lr: float = 1e-4
    warmup_epochs: int = 10
    total_epochs: int = 200

    def __post_init__(self):
        if not 0 < self.warmup_epochs <= self.total_epochs:
            raise ValueError("need 0 < warmup_epochs <= total_epochs")


def lr_at_epoch(cfg: ScheduleConfig, epoch: int) -> float:
    """Linear warmup to ``base_lr`` then cosine annealing towards zero."""
    if not 0 <= epoch < cfg.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.total_epochs})")
    if epoch < cfg.warmup_epochs:
        return cfg.base_lr * (epoch + 1) / cfg.warmup_epochs
    span = cfg.total_epochs - cfg.warmup_epochs
    return cfg.base_lr * 0.5 * (1 + math.cos(math.pi * (epoch - cfg.warmup_epochs) / span))


def set_lr(opt: torch.optim.Optimizer, lr: float) -> None:
    for g in opt.param_groups:
        g["lr"] = lr


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, state: ModelState, optimizer: torch.optim.Optimizer | None = None, extra: dict | None = None) -> None:
    arrays = {f"model/{k}": v.detach().cpu().numpy() for k, v in state.state_dict().items()}
    opt_meta = None
    if optimizer is not None:
        sd = optimizer.state_dict()
        opt_meta = {"class": type(optimizer).__name__, "param_groups": sd["param_groups"], "state": {}}
        for idx, st in sd["state"].items():
            entry = {}
            for name, val in st.items():
                if torch.is_tensor(val):
                    arrays[f"opt/{idx}/{name}"] = val.detach().cpu().numpy()
                    entry[name] = "array"
                else:
                    entry[name] = val
            opt_meta["state"][str(idx)] = entry
    arch = asdict(state.arch)
    meta = {"kind": "checkpoint", "architecture": arch, "dtype": str(next(state.parameters()).dtype), "optimizer": opt_meta, "extra": extra or {}}
    write_container(path, CHECKPOINT_MAGIC, meta, arrays)


def load_checkpoint(path, optimizer_kind: str | None = None) -> tuple[ModelState, torch.optim.Optimizer | None, dict]:
    meta, arrays = read_container(path, CHECKPOINT_MAGIC)
    if meta.get("kind") != "checkpoint":
        raise ContainerFormatError(f"{path}: not a checkpoint")
    arch = Architecture(**meta["architecture"])
    state = ModelState(arch)
    if meta["dtype"] == "torch.float64":
        state = state.double()
    sd = {k[len("model/"):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("model/")}
    state.load_state_dict(sd)
    opt = None
    om = meta.get("optimizer")
    if om is not None:
        kind = optimizer_kind or {"Adam": "adam", "NovoGrad": "novograd"}[om["class"]]
        opt = make_optimizer(kind, state.parameters())
        st = {}
        for idx, entry in om["state"].items():
            st[int(idx)] = {
                name: (torch.from_numpy(arrays[f"opt/{idx}/{name}"]) if val == "array" else val)
                for name, val in entry.items()
            }
        opt.load_state_dict({"state": st, "param_groups": om["param_groups"]})
    return state, opt, meta.get("extra", {})
