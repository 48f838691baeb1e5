"""Self-supervised objectives: VICReg, NT-Xent (SimCLR) and BYOL."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class VicregWeights:
    lam: float = 25.0  # invariance
    mu: float = 25.0  # variance
    nu: float = 1.0  # covariance
    gamma: float = 1.0
    eps: float = 1e-4
    # "sum": squared L2 norm per pair; "mean": additionally divided by d
    invariance_norm: str = "sum"

    def __post_init__(self):
        if self.invariance_norm not in ("sum", "mean"):
            raise ValueError(f"invariance_norm must be 'sum' or 'mean', got {self.invariance_norm!r}")
        if min(self.lam, self.mu, self.nu, self.eps) < 0:
            raise ValueError("VICReg weights must be non-negative")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")


def _check_pair(z1: torch.Tensor, z2: torch.Tensor) -> None:
    if z1.shape != z2.shape or z1.ndim != 2:
        raise ValueError(f"projection batches must be equal n x d matrices, got {tuple(z1.shape)} and {tuple(z2.shape)}")


def _check_batch(z: torch.Tensor) -> None:
    if z.ndim != 2 or z.shape[0] < 2:
        raise ValueError(f"need an n x d batch with n >= 2, got {tuple(z.shape)}")


def invariance_term(z1: torch.Tensor, z2: torch.Tensor, norm: str = "sum") -> torch.Tensor:
    """Mean over the batch of squared L2 distances between paired rows.

    With ``norm="mean"`` the distance is also averaged over the d features
    (plain element-wise MSE).
    """
    _check_pair(z1, z2)
    sq = (z1 - z2).pow(2).sum(dim=1).mean()
    return sq / z1.shape[1] if norm == "mean" else sq


def variance_term(z: torch.Tensor, gamma: float = 1.0, eps: float = 1e-4) -> torch.Tensor:
    """Hinge on the per-feature std: mean_j max(0, gamma - sqrt(eps + Var(z^j)))."""
    _check_batch(z)
    std = torch.sqrt(z.var(dim=0, unbiased=True) + eps)
    return F.relu(gamma - std).mean()


def covariance_term(z: torch.Tensor) -> torch.Tensor:
    """Sum of squared off-diagonal covariance entries, divided by d."""
    _check_batch(z)
    n, d = z.shape
    zc = z - z.mean(dim=0)
    cov = zc.T @ zc / (n - 1)
    off = cov - torch.diag(torch.diagonal(cov))
    return off.pow(2).sum() / d


def vicreg_loss(z1: torch.Tensor, z2: torch.Tensor, w: VicregWeights | None = None):
    """Weighted VICReg objective.

    Returns ``(total, components)`` where ``components`` holds the
    unweighted terms ``s``, ``v``, ``v_prime``, ``c``, ``c_prime``.
    """
    w = w or VicregWeights()
    _check_pair(z1, z2)
    s = invariance_term(z1, z2, w.invariance_norm)
    v1, v2 = variance_term(z1, w.gamma, w.eps), variance_term(z2, w.gamma, w.eps)
    c1, c2 = covariance_term(z1), covariance_term(z2)
    total = w.lam * s + w.mu * (v1 + v2) + w.nu * (c1 + c2)
    return total, {"s": s, "v": v1, "v_prime": v2, "c": c1, "c_prime": c2}


def nt_xent_loss(z1: torch.Tensor, z2: torch.Tensor, temperature: float = 0.1) -> torch.Tensor:
    """Normalized-temperature cross entropy over the 2n views.

    Each view's positive is its counterpart in the other batch; the other
    2n - 2 views are negatives. Averaged over all 2n anchors.
    """
    _check_pair(z1, z2)
    if z1.shape[0] < 2:
        raise ValueError("NT-Xent needs at least two pairs")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    z = torch.cat([z1, z2], dim=0)
    norms = z.norm(dim=1, keepdim=True)
    if (norms == 0).any():
        raise ValueError("zero-norm projection row")
    z = z / norms
    n = z1.shape[0]
    logits = z @ z.T / temperature
    logits = logits.masked_fill(torch.eye(2 * n, dtype=torch.bool), float("-inf"))
    targets = torch.cat([torch.arange(n, 2 * n), torch.arange(0, n)])
    return F.cross_entropy(logits, targets)


# ---------------------------------------------------------------------------
# BYOL
# ---------------------------------------------------------------------------


def make_predictor(dim: int, hidden: int = 512) -> nn.Sequential:
    return nn.Sequential(nn.Linear(dim, hidden), nn.BatchNorm1d(hidden), nn.ReLU(), nn.Linear(hidden, dim))


def byol_loss(p1: torch.Tensor, z2: torch.Tensor, p2: torch.Tensor, z1: torch.Tensor) -> torch.Tensor:
    """Symmetrized ``2 - 2 cos`` between online predictions and target projections."""
    _check_pair(p1, z2)
    _check_pair(p2, z1)
    a = 2 - 2 * F.cosine_similarity(p1, z2.detach(), dim=1).mean()
    b = 2 - 2 * F.cosine_similarity(p2, z1.detach(), dim=1).mean()
    return 0.5 * (a + b)


def make_target(online: nn.Module) -> nn.Module:
    target = copy.deepcopy(online)
    target.requires_grad_(False)
    return target


@torch.no_grad()
def ema_update(target: nn.Module, online: nn.Module, decay: float) -> None:
    """``target <- decay * target + (1 - decay) * online``; buffers are copied."""
    if not 0 <= decay < 1:
        raise ValueError("ema_decay must be in [0, 1)")
    tp, op = dict(target.named_parameters()), dict(online.named_parameters())
    if tp.keys() != op.keys() or any(tp[k].shape != op[k].shape for k in tp):
        raise ValueError("online and target architectures differ")
    for k, t in tp.items():
        t.mul_(decay).add_(op[k].detach(), alpha=1 - decay)
    for (_, tb), (_, ob) in zip(target.named_buffers(), online.named_buffers()):
        tb.copy_(ob)


def byol_step(online, target, predictor, x1, x2, optimizer, ema_decay: float = 0.99) -> float:
    """One BYOL update: online/predictor gradient step, then EMA of the target.

    ``online`` and ``target`` are modules mapping images to projections
    (backbone followed by projector).
    """
    online.train()
    predictor.train()
    target.train()
    z1, z2 = online(x1), online(x2)
    with torch.no_grad():
        t1, t2 = target(x1), target(x2)
    loss = byol_loss(predictor(z1), t2, predictor(z2), t1)
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    ema_update(target, online, ema_decay)
    return float(loss.detach())
