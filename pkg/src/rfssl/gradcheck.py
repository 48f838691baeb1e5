"""Central finite-difference checks for every layer type and SSL loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.overrides import TorchFunctionMode

from . import losses
from .nn import Architecture, ModelState, ResidualBlock, make_projector


@dataclass
class GradResult:
    name: str
    n_elements: int
    rel_error: float
    passed: bool
    n_skipped: int = 0  # elements whose perturbation crossed a ReLU kink


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    """Norm-wise relative error ``|a - b| / max(|a|, |b|)``."""
    scale = max(float(a.norm()), float(b.norm()), 1e-300)
    return float((a - b).norm()) / scale


class _ReluSigns(TorchFunctionMode):
    """Record the sign pattern of every ReLU input seen during a forward."""

    def __init__(self):
        super().__init__()
        self.signs: list[torch.Tensor] = []

    def __torch_function__(self, func, types, args=(), kwargs=None):
        if func in (torch.relu, F.relu, torch.Tensor.relu):
            self.signs.append(args[0].detach() > 0)
        return func(*args, **(kwargs or {}))


def _eval(fn) -> tuple[float, list[torch.Tensor]]:
    with _ReluSigns() as mode:
        value = float(fn())
    return value, mode.signs


def _same(a: list[torch.Tensor], b: list[torch.Tensor]) -> bool:
    return len(a) == len(b) and all(torch.equal(x, y) for x, y in zip(a, b))


def finite_difference(fn: Callable[[], torch.Tensor], tensors: list[torch.Tensor], step: float = 1e-4):
    """Central differences for every element of ``tensors``.

    Returns ``(grads, valid)``; ``valid`` is False where the two probes see a
    different ReLU activation pattern than the base point, i.e. where the
    function is not smooth over the stencil and the difference is meaningless.
    """
    grads, valid = [], []
    with torch.no_grad():
        _, base = _eval(fn)
        for t in tensors:
            g = torch.zeros_like(t)
            ok = torch.ones(t.shape, dtype=torch.bool)
            flat, gflat, okflat = t.view(-1), g.view(-1), ok.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                fp, sp = _eval(fn)
                flat[i] = orig - step
                fm, sm = _eval(fn)
                flat[i] = orig
                gflat[i] = (fp - fm) / (2 * step)
                okflat[i] = _same(sp, base) and _same(sm, base)
            grads.append(g)
            valid.append(ok)
    return grads, valid


def check(name: str, fn, tensors, step: float = 1e-4, tol: float = 1e-5, max_skip: float = 0.1) -> GradResult:
    """Compare autograd against central differences over all ``tensors``.

    Elements whose stencil crosses a ReLU kink are left out of the error; the
    check also fails if more than ``max_skip`` of the elements are left out.
    """
    for t in tensors:
        t.grad = None
    fn().backward()
    # parameters the closure never touches have a zero gradient
    analytic = torch.cat([(t.grad if t.grad is not None else torch.zeros_like(t)).reshape(-1) for t in tensors])
    grads, valid = finite_difference(fn, tensors, step)
    numeric = torch.cat([g.reshape(-1) for g in grads])
    keep = torch.cat([v.reshape(-1) for v in valid])
    err = relative_error(analytic[keep], numeric[keep])
    skipped = int((~keep).sum())
    return GradResult(name, int(analytic.numel()), err, err < tol and skipped <= max_skip * keep.numel(), skipped)


def _leaf(gen, *shape) -> torch.Tensor:
    return torch.randn(*shape, generator=gen, dtype=torch.float64).requires_grad_(True)


def _module_case(name, module: nn.Module, x: torch.Tensor, gen, reduce=None):
    module = module.double().train()
    w = torch.randn(module(x).shape, generator=gen, dtype=torch.float64)
    reduce = reduce or (lambda y: (y * w).sum())
    params = [p for p in module.parameters()] + [x]
    return name, (lambda: reduce(module(x))), params


def suite(seed: int = 0) -> list[tuple[str, Callable, list[torch.Tensor]]]:
    """Build the check cases: each is ``(name, closure, tensors)``."""
    gen = torch.Generator().manual_seed(seed)
    arch = Architecture.preset("micro")
    cases = [
        _module_case("conv2d", nn.Conv2d(2, 3, 3, padding=1, bias=False), _leaf(gen, 2, 2, 5, 5), gen),
        _module_case("batchnorm2d", nn.BatchNorm2d(3), _leaf(gen, 4, 3, 3, 3), gen),
        _module_case("linear", nn.Linear(6, 4), _leaf(gen, 5, 6), gen),
        _module_case("batchnorm1d", nn.BatchNorm1d(4), _leaf(gen, 6, 4), gen),
        _module_case("relu", nn.ReLU(), _leaf(gen, 4, 7), gen),
        _module_case("avgpool", nn.AdaptiveAvgPool2d(1), _leaf(gen, 2, 3, 4, 4), gen),
        _module_case("residual_block", ResidualBlock(2, 3, 2, arch), _leaf(gen, 3, 2, 6, 6), gen),
        _module_case("projector", make_projector(4, 5, 3, arch), _leaf(gen, 6, 4), gen),
    ]

    model = ModelState(arch, seed=seed).double().train()
    x = torch.randn(4, 1, arch.input_size, arch.input_size, generator=gen, dtype=torch.float64)
    y = torch.tensor([0, 1, 1, 0])
    theta = list(model.backbone.parameters())
    cases.append(("model_cross_entropy", lambda: F.cross_entropy(model.head(model.backbone(x)), y), theta + list(model.head.parameters())))
    cases.append(("model_projection", lambda: model.projector(model.backbone(x)).pow(2).sum(), theta + list(model.projector.parameters())))

    z1, z2 = _leaf(gen, 8, 5), _leaf(gen, 8, 5)
    w = losses.VicregWeights()
    cases += [
        ("vicreg_total", lambda: losses.vicreg_loss(z1, z2, w)[0], [z1, z2]),
        ("vicreg_invariance", lambda: losses.invariance_term(z1, z2), [z1, z2]),
        ("vicreg_variance", lambda: losses.variance_term(z1, w.gamma, w.eps), [z1]),
        ("vicreg_covariance", lambda: losses.covariance_term(z1), [z1]),
        ("nt_xent", lambda: losses.nt_xent_loss(z1, z2, 0.5), [z1, z2]),
    ]
    p1, p2, t1, t2 = (_leaf(gen, 6, 4) for _ in range(4))
    cases.append(("byol", lambda: losses.byol_loss(p1, t2, p2, t1), [p1, p2]))
    return cases


def run_suite(seed: int = 0, step: float = 1e-4, tol: float = 1e-5) -> list[GradResult]:
    return [check(name, fn, tensors, step, tol) for name, fn, tensors in suite(seed)]
