import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from rfssl.gradcheck import check, run_suite
from rfssl.nn import (
    Adam,
    Architecture,
    ModelState,
    NonFiniteGradientError,
    NovoGrad,
    ScheduleConfig,
    adam_update,
    backward,
    forward_backbone,
    forward_heads,
    load_checkpoint,
    lr_at_epoch,
    novograd_update,
    parameter_count,
    save_checkpoint,
    set_trainable,
)

TINY = Architecture.preset("tiny", input_size=32)


@pytest.fixture(scope="module")
def model():
    return ModelState(TINY, seed=0)


# --- forward -----------------------------------------------------------------


def test_tiny_parameter_count_is_pinned():
    m = ModelState(Architecture.preset("tiny"))
    assert parameter_count(m) == 177330
    assert parameter_count(m.backbone) == 77232
    # the head is a single affine map to two logits
    assert parameter_count(m.head) == 64 * 2 + 2


def test_full_preset_size():
    n = parameter_count(ModelState(Architecture.preset("full")).backbone)
    assert 5.5e6 < n < 6.5e6


def test_duplicated_rows_identical_in_eval(model):
    x = torch.rand(1, 1, 32, 32)
    h = forward_backbone(model, torch.cat([x, x]))
    np.testing.assert_array_equal(h[0].numpy(), h[1].numpy())
    z = forward_heads(model, h, "projector")
    np.testing.assert_array_equal(z[0].numpy(), z[1].numpy())


def test_zero_final_scale_gives_equal_rows():
    m = ModelState(TINY, seed=1)
    with torch.no_grad():
        m.backbone.final_norm.weight.zero_()
    h = forward_backbone(m, torch.rand(3, 1, 32, 32))
    # relu(0 * x_hat + 0) pooled: every representation is the zero vector
    np.testing.assert_array_equal(h.numpy(), 0.0)


def test_zeros_and_ones_differ():
    m = ModelState(TINY, seed=2)
    with torch.no_grad():
        m.backbone.final_norm.bias.fill_(0.1)
    a = forward_backbone(m, torch.zeros(1, 1, 32, 32))
    b = forward_backbone(m, torch.ones(1, 1, 32, 32))
    assert not torch.equal(a, b)


def test_classifier_zero_weights_gives_half(model):
    m = ModelState(TINY, seed=3)
    with torch.no_grad():
        m.head.weight.zero_()
        m.head.bias.zero_()
    logits = forward_heads(m, torch.randn(4, TINY.feature_dim), "classifier")
    np.testing.assert_array_equal(logits.numpy(), 0.0)
    np.testing.assert_allclose(torch.softmax(logits, 1).numpy(), 0.5)


def test_projector_matches_matrix_chain():
    m = ModelState(TINY, seed=4).double()
    h = torch.randn(5, TINY.feature_dim, dtype=torch.float64)
    lin1, bn, _, lin2 = m.projector
    # eval mode: normalization uses the running statistics
    with torch.no_grad():
        bn.running_mean.uniform_(-0.5, 0.5)
        bn.running_var.uniform_(0.5, 2.0)
        bn.weight.uniform_(0.5, 1.5)
        bn.bias.uniform_(-0.2, 0.2)
    W1, b1 = lin1.weight.detach().numpy(), lin1.bias.detach().numpy()
    W2, b2 = lin2.weight.detach().numpy(), lin2.bias.detach().numpy()
    a = h.numpy() @ W1.T + b1
    a = (a - bn.running_mean.numpy()) / np.sqrt(bn.running_var.numpy() + bn.eps) * bn.weight.detach().numpy() + bn.bias.detach().numpy()
    expected = np.maximum(a, 0) @ W2.T + b2
    np.testing.assert_allclose(forward_heads(m, h, "projector").numpy(), expected, atol=1e-6)


def test_shape_errors(model):
    with pytest.raises(ValueError):
        forward_backbone(model, torch.rand(2, 1, 16, 16))
    with pytest.raises(ValueError):
        forward_heads(model, torch.rand(2, 7), "classifier")
    with pytest.raises(ValueError):
        forward_heads(model, torch.rand(2, TINY.feature_dim), "decoder")


def test_norm_momentum():
    m = ModelState(TINY)
    assert m.backbone.final_norm.momentum == pytest.approx(0.1)


# --- backward ----------------------------------------------------------------


def test_head_gradient_is_column_sum():
    m = ModelState(Architecture.preset("tiny", stage_channels=(2,), stage_blocks=(1,), stem_channels=2, input_size=8))
    with torch.no_grad():
        m.head.weight.copy_(torch.eye(2))
        m.head.bias.zero_()
    h = torch.tensor([[1.0, 2.0], [3.0, 5.0]])
    grads = backward(m, m.head(h).sum())
    # d(sum of logits)/dW[k, j] = sum_i h[i, j] for every output k
    np.testing.assert_allclose(grads["head.weight"].numpy(), [[4.0, 7.0], [4.0, 7.0]])
    np.testing.assert_allclose(grads["head.bias"].numpy(), [2.0, 2.0])


def test_freeze_contract():
    m = ModelState(TINY, seed=5)
    set_trainable(m, {"head"})
    x = torch.rand(4, 1, 32, 32)
    h = forward_backbone(m, x, train=False)
    loss = F.cross_entropy(forward_heads(m, h, "classifier", train=True), torch.tensor([0, 1, 0, 1]))
    grads = backward(m, loss)
    assert set(grads) == {"head.weight", "head.bias"}
    set_trainable(m, {"backbone", "head"})
    loss = F.cross_entropy(m.head(forward_backbone(m, x, train=True)), torch.tensor([0, 1, 0, 1]))
    grads = backward(m, loss)
    assert any(k.startswith("backbone.") for k in grads)
    assert not any(k.startswith("projector.") for k in grads)


def test_backward_without_graph(model):
    with pytest.raises(RuntimeError):
        backward(model, torch.tensor(1.0))


def test_full_model_finite_differences():
    """All parameters of a scaled-down model, float64, step 1e-4."""
    results = {r.name: r for r in run_suite(seed=0)}
    for name in ("model_cross_entropy", "model_projection"):
        assert results[name].passed, results[name]
    assert all(r.passed for r in results.values()), [r for r in results.values() if not r.passed]


def test_gradcheck_detects_wrong_gradient():
    x = torch.randn(5, dtype=torch.float64, requires_grad=True)

    class Bad(torch.autograd.Function):
        @staticmethod
        def forward(ctx, t):
            return t.pow(3).sum()

        @staticmethod
        def backward(ctx, g):
            return g * torch.ones(5, dtype=torch.float64)

    assert not check("bad", lambda: Bad.apply(x), [x]).passed


# --- optimizers --------------------------------------------------------------


def test_adam_zero_gradient_first_step():
    w = torch.tensor([1.5])
    adam_update(w, torch.zeros(1), torch.zeros(1), torch.zeros(1), 1, lr=0.1)
    assert w.item() == 1.5


def test_adam_first_step_closed_form():
    lr, eps = 1e-3, 1e-8
    w = torch.zeros(1, dtype=torch.float64)
    adam_update(w, torch.ones(1, dtype=torch.float64), torch.zeros(1, dtype=torch.float64), torch.zeros(1, dtype=torch.float64), 1, lr=lr)
    # m_hat = 1, v_hat = 1  ->  update = -lr / (1 + eps)
    assert w.item() == pytest.approx(-lr / (1 + eps), abs=1e-15)


def test_adam_constant_gradient_update_tends_to_lr():
    lr = 1e-2
    w = torch.zeros(1, dtype=torch.float64, requires_grad=True)
    opt = Adam([w], lr=lr)
    prev = 0.0
    for _ in range(100):
        w.grad = torch.full((1,), 3.0, dtype=torch.float64)
        opt.step()
        step_size = prev - w.item()
        prev = w.item()
    assert step_size == pytest.approx(lr, rel=1e-6)


def test_novograd_zero_gradient():
    w = torch.tensor([0.7, -0.2], dtype=torch.float64)
    m, v = torch.zeros(2, dtype=torch.float64), torch.zeros((), dtype=torch.float64)
    novograd_update(w, torch.zeros(2, dtype=torch.float64), m, v, lr=0.1)
    np.testing.assert_array_equal(w.numpy(), [0.7, -0.2])


def test_novograd_hand_arithmetic():
    lr, b1, b2, eps = 0.01, 0.95, 0.98, 1e-8
    w = torch.tensor([0.5], dtype=torch.float64)
    m, v = torch.zeros(1, dtype=torch.float64), torch.zeros((), dtype=torch.float64)
    novograd_update(w, torch.tensor([2.0], dtype=torch.float64), m, v, lr, b1, b2, eps)
    v_exp = (1 - b2) * 4
    g_hat = 2 / (math.sqrt(v_exp) + eps)
    assert v.item() == pytest.approx(v_exp, abs=1e-15)
    assert m.item() == pytest.approx(g_hat, abs=1e-12)
    assert w.item() == pytest.approx(0.5 - lr * g_hat, abs=1e-12)


def test_novograd_first_step_scale_invariance():
    g = torch.randn(7, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    outs = []
    for scale in (1.0, 10.0):
        w = torch.zeros(7, dtype=torch.float64)
        m, v = torch.zeros(7, dtype=torch.float64), torch.zeros((), dtype=torch.float64)
        novograd_update(w, scale * g, m, v, lr=0.1, eps=0.0)
        outs.append(w.clone())
    np.testing.assert_allclose(outs[0].numpy(), outs[1].numpy(), atol=1e-10)


@pytest.mark.parametrize("cls", [Adam, NovoGrad])
def test_optimizers_reject_non_finite(cls):
    w = torch.zeros(2, requires_grad=True)
    opt = cls([w])
    w.grad = torch.tensor([1.0, float("nan")])
    with pytest.raises(NonFiniteGradientError):
        opt.step()


def test_novograd_layer_state():
    a = torch.zeros(3, requires_grad=True)
    b = torch.zeros(2, 2, requires_grad=True)
    opt = NovoGrad([a, b], lr=0.1)
    a.grad, b.grad = torch.ones(3), torch.full((2, 2), 2.0)
    opt.step()
    assert opt.state[a]["layer_v"].item() == pytest.approx(0.02 * 3)
    assert opt.state[b]["layer_v"].item() == pytest.approx(0.02 * 16)
    assert opt.state[a]["step"] == 1


def test_training_is_deterministic():
    def trajectory():
        m = ModelState(Architecture.preset("micro"), seed=9)
        opt = Adam(m.parameters(), lr=1e-2)
        x = torch.rand(4, 1, 8, 8, generator=torch.Generator().manual_seed(1))
        for _ in range(3):
            loss = F.cross_entropy(m.head(m.backbone(x)), torch.tensor([0, 1, 0, 1]))
            backward(m, loss)
            opt.step()
        return torch.cat([p.detach().reshape(-1) for p in m.parameters()])

    assert torch.equal(trajectory(), trajectory())


# --- schedule ----------------------------------------------------------------


def test_schedule_values():
    cfg = ScheduleConfig(1e-4, 10, 200)
    assert lr_at_epoch(cfg, 0) == pytest.approx(1e-5)
    assert lr_at_epoch(cfg, 9) == pytest.approx(1e-4)
    assert lr_at_epoch(cfg, 10) == pytest.approx(1e-4)
    assert lr_at_epoch(cfg, 199) == pytest.approx(1e-4 * 0.5 * (1 + math.cos(math.pi * 189 / 190)))
    # 0.5 * (1 - cos(pi / 190)) ~= (pi / 190)^2 / 4, so the last rate is ~6.8e-9
    assert lr_at_epoch(cfg, 199) == pytest.approx(1e-4 * (math.pi / 190) ** 2 / 4, rel=1e-4)


def test_schedule_errors():
    with pytest.raises(ValueError):
        ScheduleConfig(1e-4, 0, 10)
    with pytest.raises(ValueError):
        ScheduleConfig(1e-4, 11, 10)
    with pytest.raises(ValueError):
        lr_at_epoch(ScheduleConfig(1e-4, 1, 10), 10)


# --- checkpoints -------------------------------------------------------------


@pytest.mark.parametrize("kind", [Adam, NovoGrad])
def test_checkpoint_round_trip(tmp_path, kind):
    m = ModelState(TINY, seed=6)
    opt = kind(m.parameters(), lr=1e-3)
    loss = F.cross_entropy(m.head(m.backbone(torch.rand(4, 1, 32, 32))), torch.tensor([0, 1, 0, 1]))
    backward(m, loss)
    opt.step()
    save_checkpoint(tmp_path / "ck.bin", m, opt, {"note": "x"})
    m2, opt2, extra = load_checkpoint(tmp_path / "ck.bin")
    assert extra == {"note": "x"}
    assert type(opt2) is kind
    assert m2.arch == m.arch
    for (k, a), (_, b) in zip(m.state_dict().items(), m2.state_dict().items()):
        assert torch.equal(a, b), k
    s1, s2 = opt.state_dict()["state"], opt2.state_dict()["state"]
    for idx in s1:
        for name, val in s1[idx].items():
            assert torch.equal(torch.as_tensor(val), torch.as_tensor(s2[idx][name]))
