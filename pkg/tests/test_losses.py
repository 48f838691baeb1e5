import math

import numpy as np
import pytest
import torch
import torch.nn as nn

from oracles import vicreg_loop
from rfssl.losses import (
    VicregWeights,
    byol_loss,
    covariance_term,
    ema_update,
    invariance_term,
    make_target,
    nt_xent_loss,
    variance_term,
    vicreg_loss,
)


def t(x):
    return torch.tensor(x, dtype=torch.float64)


def test_invariance_hand_values():
    z = torch.randn(5, 3, dtype=torch.float64)
    assert invariance_term(z, z).item() == 0.0
    assert invariance_term(t([[0.0], [0.0]]), t([[1.0], [3.0]])).item() == pytest.approx(5.0)


def test_invariance_mean_norm_divides_by_d():
    z1, z2 = torch.randn(6, 4, dtype=torch.float64), torch.randn(6, 4, dtype=torch.float64)
    np.testing.assert_allclose(invariance_term(z1, z2, "mean").item(), invariance_term(z1, z2).item() / 4)


def test_variance_hand_values():
    rows = t([[2.0, -1.0]] * 5)
    assert variance_term(rows, gamma=1.0, eps=0.0).item() == pytest.approx(1.0)
    # unbiased std 0.5 and 2.0 from symmetric +-a columns with n = 2
    a, b = 0.5 / math.sqrt(2), 2.0 / math.sqrt(2)
    z = t([[a, b], [-a, -b]])
    assert variance_term(z, gamma=1.0, eps=0.0).item() == pytest.approx(0.25)


def test_variance_saturated_hinge():
    z = 3 * torch.randn(200, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    assert variance_term(z).item() == 0.0


def test_covariance_cases():
    z = torch.randn(8, 1, dtype=torch.float64)
    assert covariance_term(z).item() == 0.0
    col = torch.randn(8, 1, dtype=torch.float64)
    z = torch.cat([col, col], dim=1)
    var = col.var(unbiased=True).item()
    # both off-diagonal entries equal Var(z^j), divided by d = 2
    assert covariance_term(z).item() == pytest.approx(2 * var**2 / 2)


def test_covariance_brute_force():
    rng = np.random.default_rng(1)
    z = rng.normal(size=(8, 4))
    _, parts = vicreg_loop(z, z, 1, 1, 1, 1.0, 1e-4)
    np.testing.assert_allclose(covariance_term(t(z)).item(), parts["c"], atol=1e-10)


def test_vicreg_weights_zero_and_oracle():
    rng = np.random.default_rng(2)
    z1, z2 = rng.normal(size=(8, 4)), rng.normal(size=(8, 4))
    total, _ = vicreg_loss(t(z1), t(z2), VicregWeights(lam=0, mu=0, nu=0))
    assert total.item() == 0.0
    total, parts = vicreg_loss(t(z1), t(z2), VicregWeights())
    expected, ref = vicreg_loop(z1, z2, 25, 25, 1, 1.0, 1e-4)
    np.testing.assert_allclose(total.item(), expected, atol=1e-8)
    for k, v in ref.items():
        np.testing.assert_allclose(parts[k].item(), v, atol=1e-8)


def test_vicreg_ideal_embedding():
    # orthogonal +-1 columns: unit unbiased variance after scaling, zero covariance
    h = np.array([[1, 1, 1, 1], [1, -1, 1, -1], [1, 1, -1, -1], [1, -1, -1, 1]], dtype=float)[:, 1:]
    z = t(h * math.sqrt(3 / 4))
    total, _ = vicreg_loss(z, z, VicregWeights(eps=0.0))
    assert abs(total.item()) < 1e-12


def test_vicreg_rejects_bad_input():
    with pytest.raises(ValueError):
        vicreg_loss(torch.zeros(4, 3), torch.zeros(4, 2))
    with pytest.raises(ValueError):
        VicregWeights(invariance_norm="l1")


def test_nt_xent_two_orthogonal_pairs():
    z = t([[1.0, 0.0], [0.0, 1.0]])
    np.testing.assert_allclose(nt_xent_loss(z, z, temperature=1.0).item(), math.log(1 + 2 / math.e), atol=1e-12)


def test_nt_xent_high_temperature_limit():
    g = torch.Generator().manual_seed(3)
    z1, z2 = torch.randn(4, 5, generator=g, dtype=torch.float64), torch.randn(4, 5, generator=g, dtype=torch.float64)
    np.testing.assert_allclose(nt_xent_loss(z1, z2, temperature=1e6).item(), math.log(7), atol=1e-3)


def test_nt_xent_errors():
    with pytest.raises(ValueError):
        nt_xent_loss(torch.ones(2, 3), torch.ones(2, 3), temperature=0.0)
    with pytest.raises(ValueError):
        nt_xent_loss(torch.zeros(2, 3), torch.ones(2, 3))


def test_byol_loss_zero_when_aligned():
    z = torch.randn(6, 4, dtype=torch.float64)
    assert abs(byol_loss(3 * z, z, 0.5 * z, z).item()) < 1e-12


def test_byol_target_gets_no_gradient():
    p, z = torch.randn(4, 3, requires_grad=True), torch.randn(4, 3, requires_grad=True)
    byol_loss(p, z, p, z).backward()
    assert p.grad is not None
    # z only ever appears in the detached target slots
    assert z.grad is None


def test_ema_decay_zero_copies_online():
    online = nn.Linear(3, 2)
    target = make_target(nn.Linear(3, 2))
    ema_update(target, online, 0.0)
    for a, b in zip(target.parameters(), online.parameters()):
        assert torch.equal(a, b)


def test_ema_geometric_decay():
    online = nn.Linear(3, 2).double()
    target = make_target(online)
    with torch.no_grad():
        for q in target.parameters():
            q.uniform_(-1, 1)
    q0 = [q.clone() for q in target.parameters()]
    k = 25
    for _ in range(k):
        ema_update(target, online, 0.99)
    for q, start, p in zip(target.parameters(), q0, online.parameters()):
        expected = p.detach() + 0.99**k * (start - p.detach())
        np.testing.assert_allclose(q.numpy(), expected.numpy(), atol=1e-12)


def test_ema_rejects_mismatch():
    with pytest.raises(ValueError):
        ema_update(nn.Linear(3, 2), nn.Linear(3, 3), 0.5)
    with pytest.raises(ValueError):
        ema_update(nn.Linear(3, 2), nn.Linear(3, 2), 1.0)
