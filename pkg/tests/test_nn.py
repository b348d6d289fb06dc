import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from torch import nn

from mbsense.nn import (
    AdamState,
    ConvBlock,
    DeconvBlock,
    KinkMonitor,
    PoolLayer,
    adam_step,
    classification_loss,
    conv_forward,
    cross_entropy,
    fully_connected,
    grad_check,
    init_kaiming_uniform,
    layer_forward,
    load_weights,
    maxpool,
    read_checkpoint_manifest,
    relu,
    save_checkpoint,
    softmax,
    transposed_conv,
    weighted_mse,
)

f64 = torch.float64


# -- forward semantics ---------------------------------------------------------


def test_conv_hand_example():
    x = torch.tensor([[1.0, 2.0, 3.0]], dtype=f64)
    k = torch.tensor([[[1.0, 0.0, -1.0]]], dtype=f64)
    assert conv_forward(x, k).tolist() == [[-2.0]]


def test_conv_matches_loop_oracle():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3, 11))
    k = rng.normal(size=(4, 3, 3))
    b = rng.normal(size=4)
    stride, pad = 2, 1
    xp = np.pad(x, ((0, 0), (pad, pad)))
    w_out = (11 + 2 * pad - 3) // stride + 1
    ref = np.zeros((4, w_out))
    for o in range(4):
        for j in range(w_out):
            ref[o, j] = b[o] + sum(k[o, c, t] * xp[c, j * stride + t] for c in range(3) for t in range(3))
    out = conv_forward(torch.tensor(x), torch.tensor(k), torch.tensor(b), stride=stride, padding=pad)
    np.testing.assert_allclose(out.numpy(), ref, atol=1e-12)


def test_conv_kernel_wider_than_input_rejected():
    with pytest.raises(ValueError):
        conv_forward(torch.zeros(1, 2, dtype=f64), torch.zeros(1, 1, 3, dtype=f64))


def test_transposed_conv_is_adjoint_of_conv():
    rng = np.random.default_rng(1)
    k = torch.tensor(rng.normal(size=(2, 3, 3)))
    x = torch.tensor(rng.normal(size=(1, 3, 9)))
    y = torch.tensor(rng.normal(size=(1, 2, 4)))
    lhs = (conv_forward(x, k, stride=2) * y).sum()
    rhs = (transposed_conv(y, k, stride=2) * x).sum()
    assert abs(lhs.item() - rhs.item()) < 1e-12


def test_relu_maxpool_fc():
    assert relu(torch.tensor([-1.0, 0.0, 2.0])).tolist() == [0.0, 0.0, 2.0]
    assert maxpool(torch.tensor([1.0, 5.0, 2.0, 0.0, 9.0]), 2).tolist() == [5.0, 2.0]
    w = torch.tensor([[1.0, 2.0], [0.0, -1.0]])
    assert fully_connected(torch.tensor([3.0, 4.0]), w, torch.tensor([1.0, 1.0])).tolist() == [12.0, -3.0]
    with pytest.raises(ValueError):
        fully_connected(torch.zeros(3), w)


def test_layer_forward_validates_shapes():
    with pytest.raises(ValueError):
        layer_forward(torch.zeros(2, 3, 5), nn.BatchNorm1d(4))
    with pytest.raises(ValueError):
        layer_forward(torch.zeros(2, 5), nn.Linear(4, 2))
    with pytest.raises(ValueError):
        layer_forward(torch.zeros(2, 3, 5), nn.ConvTranspose1d(4, 2, 3))
    with pytest.raises(ValueError):
        layer_forward(torch.zeros(2, 3, 2), nn.MaxPool1d(3))
    out = layer_forward(torch.zeros(2, 4), nn.Linear(4, 2))
    assert out.shape == (2, 2)


def test_batchnorm_eval_is_deterministic_affine():
    bn = nn.BatchNorm1d(3).double()
    bn.train()
    bn(torch.randn(8, 3, 5, dtype=f64))
    bn.eval()
    x = torch.randn(2, 3, 5, dtype=f64)
    a, b = layer_forward(x, bn), layer_forward(x, bn)
    assert torch.equal(a, b)
    expected = (x - bn.running_mean[:, None]) / torch.sqrt(bn.running_var[:, None] + bn.eps) * bn.weight[:, None] + bn.bias[:, None]
    torch.testing.assert_close(a, expected, rtol=0, atol=1e-12)


def test_init_kaiming_uniform_bounds():
    lin = nn.Linear(50, 20)
    bn = nn.BatchNorm1d(4)
    init_kaiming_uniform(nn.Sequential(lin, bn))
    bound = math.sqrt(6.0 / 50)
    assert lin.weight.abs().max() <= bound
    assert torch.all(bn.weight == 1) and torch.all(bn.bias == 0)


def test_deconv_block_reaches_exact_width():
    block = DeconvBlock(4, 2, 3, 2, 0, in_width=57, out_width=116)
    assert block(torch.zeros(1, 4, 57)).shape == (1, 2, 116)
    with pytest.raises(ValueError):
        DeconvBlock(4, 2, 3, 2, 0, in_width=57, out_width=120)


# -- losses --------------------------------------------------------------------


def test_softmax_known_values():
    s = softmax(torch.tensor([1.0, 2.0, 3.0], dtype=f64))
    np.testing.assert_allclose(s.numpy(), [0.0900, 0.2447, 0.6652], atol=1e-4)


def test_softmax_large_logits_stay_finite():
    s = softmax(torch.tensor([1000.0, 1000.0], dtype=f64))
    assert s.tolist() == [0.5, 0.5]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=10))
def test_softmax_is_a_distribution(values):
    s = softmax(torch.tensor(values, dtype=f64))
    assert torch.all(s >= 0)
    assert abs(s.sum().item() - 1.0) < 1e-12


def test_uniform_cross_entropy_is_log_n():
    logits = torch.zeros(1, 8, dtype=f64)
    assert abs(classification_loss(logits, torch.tensor([3])).item() - math.log(8)) < 1e-12


def test_cross_entropy_floor_keeps_zero_probability_finite():
    ce = cross_entropy(torch.tensor([0.0, 1.0], dtype=f64), torch.tensor([1.0, 0.0], dtype=f64))
    assert abs(ce.item() - (-math.log(1e-12))) < 1e-9


def test_logit_gradient_is_s_minus_c():
    u = torch.tensor([[0.3, -1.2, 2.0, 0.1]], dtype=f64, requires_grad=True)
    classification_loss(u, torch.tensor([2])).backward()
    s = softmax(u.detach())
    c = torch.tensor([[0.0, 0.0, 1.0, 0.0]], dtype=f64)
    torch.testing.assert_close(u.grad, s - c, rtol=0, atol=1e-12)


def test_weighted_mse_hand_value():
    c = torch.zeros(10, dtype=f64)
    c_hat = torch.full((10,), 0.1, dtype=f64)
    assert abs(weighted_mse(c_hat, c, c, c, 0.5).item() - 5e-3) < 1e-15


def test_weighted_mse_rejects_lambda_outside_unit_interval():
    z = torch.zeros(2)
    for lam in (-0.1, 1.5):
        with pytest.raises(ValueError):
            weighted_mse(z, z, z, z, lam)


@pytest.mark.parametrize("lam,zero_branch", [(1.0, "bsnr"), (0.0, "csi")])
def test_weighted_mse_zero_weight_branch_gets_no_gradient(lam, zero_branch):
    c_hat = torch.randn(5, dtype=f64, requires_grad=True)
    b_hat = torch.randn(5, dtype=f64, requires_grad=True)
    weighted_mse(c_hat, torch.zeros(5, dtype=f64), b_hat, torch.zeros(5, dtype=f64), lam).backward()
    dead = b_hat if zero_branch == "bsnr" else c_hat
    assert dead.grad is None


# -- optimizer -----------------------------------------------------------------


def test_adam_first_step_moves_by_learning_rate():
    p = torch.tensor([1.0, -2.0], dtype=f64)
    p.grad = torch.tensor([3.0, -0.5], dtype=f64)
    adam_step([("p", p, "head")], {"head": 0.1}, AdamState())
    np.testing.assert_allclose(p.numpy(), [0.9, -1.9], atol=1e-7)


def test_adam_matches_torch_adam():
    torch.manual_seed(0)
    a = torch.randn(6, dtype=f64, requires_grad=True)
    b = a.detach().clone().requires_grad_(True)
    ref = torch.optim.Adam([b], lr=0.01, betas=(0.9, 0.999), eps=1e-8)
    state = AdamState()
    for step in range(5):
        for t in (a, b):
            t.grad = None
            ((t - step) ** 2).sum().backward()
        adam_step([("a", a, "encoder")], {"encoder": 0.01}, state)
        ref.step()
    torch.testing.assert_close(a, b, rtol=0, atol=1e-12)


def test_adam_zero_rate_group_untouched_and_unknown_group_rejected():
    p = torch.tensor([1.0], dtype=f64)
    p.grad = torch.tensor([1.0], dtype=f64)
    before = p.clone()
    state = adam_step([("p", p, "encoder")], {"encoder": 0.0}, AdamState())
    assert torch.equal(p, before) and "p" not in state.m
    with pytest.raises(ValueError):
        adam_step([("p", p, "mystery")], {"encoder": 0.1}, AdamState())


# -- gradient checks -----------------------------------------------------------


def test_grad_check_linear_layer_is_tight():
    torch.manual_seed(0)
    lin = nn.Linear(5, 3).double()
    x = torch.randn(4, 5, dtype=f64, requires_grad=True)
    tensors = {"x": x, **dict(lin.named_parameters())}
    rep = grad_check(lambda: (lin(x) ** 2).sum(), tensors)
    assert rep.max_rel_error <= 1e-7


def test_grad_check_catches_wrong_gradient():
    x = torch.randn(4, dtype=f64, requires_grad=True)
    rep = grad_check(lambda: (x ** 3).sum(), {"x": x}, analytic={"x": 2 * x.detach()})
    assert not rep.passed


def test_grad_check_requires_float64():
    x = torch.randn(3, requires_grad=True)
    with pytest.raises(ValueError):
        grad_check(lambda: x.sum(), {"x": x})


def _warm(layer, x):
    layer.train()
    with torch.no_grad():
        for _ in range(3):
            layer(x)
    return layer.eval()


def _layer_cases(seed):
    """Randomized small instances of every layer kind, each with a loss closure."""
    g = torch.Generator().manual_seed(seed)
    rnd = lambda *s: torch.randn(*s, generator=g, dtype=f64)
    b = int(torch.randint(2, 5, (1,), generator=g))
    c_in = int(torch.randint(1, 4, (1,), generator=g))
    c_out = int(torch.randint(1, 4, (1,), generator=g))
    w = int(torch.randint(8, 16, (1,), generator=g))
    torch.manual_seed(seed)
    cases = {}
    bn = nn.BatchNorm1d(c_in).double().train()
    bn.weight.data.uniform_(0.5, 1.5)
    bn.bias.data.normal_()
    cases["batchnorm (train)"] = bn
    # blocks run with running statistics; a conv bias feeding train-mode
    # batchnorm has an identically zero gradient (see the dedicated test)
    conv = ConvBlock(c_in, c_out, 3, stride=2, padding=1).double()
    cases["conv+bn+relu"] = _warm(conv, rnd(8, c_in, w))
    cases["maxpool"] = PoolLayer(2)
    deconv = DeconvBlock(c_in, c_out, 3, 2, 0, in_width=w, out_width=2 * w + 1).double()
    cases["transposed conv+bn+relu"] = _warm(deconv, rnd(8, c_in, w))
    cases["transposed conv (final)"] = DeconvBlock(c_in, c_out, 3, 2, 1, in_width=w, out_width=2 * w - 1, final=True).double()
    cases["fully connected"] = nn.Linear(w, c_out).double()
    out = []
    for name, layer in cases.items():
        x = rnd(b, c_in, w) if name != "fully connected" else rnd(b, w)
        x.requires_grad_(True)
        weight = rnd(*layer(x).shape)
        tensors = {"input": x, **dict(layer.named_parameters())}
        out.append((name, layer, tensors, lambda layer=layer, x=x, weight=weight: (layer(x) * weight).sum()))
    return out


@pytest.mark.parametrize("seed", range(20))
def test_every_layer_passes_grad_check(seed):
    for name, layer, tensors, loss in _layer_cases(seed):
        with KinkMonitor(layer) as mon:
            rep = grad_check(loss, tensors, monitor=mon)
        assert rep.max_rel_error <= 1e-4, (name, rep.per_tensor)
        assert rep.checked > 0


def test_conv_bias_before_train_mode_batchnorm_has_zero_gradient():
    torch.manual_seed(0)
    block = ConvBlock(2, 3, 3).double().train()
    x = torch.randn(4, 2, 9, dtype=f64)
    (block(x) * torch.randn(4, 3, 7, dtype=f64)).sum().backward()
    assert block.conv.bias.grad.abs().max() < 1e-12
    assert block.conv.weight.grad.abs().max() > 1e-3


def test_kink_monitor_sees_relu_pattern_change():
    block = ConvBlock(1, 1, 1).double().eval()
    with torch.no_grad():
        block.conv.weight.fill_(1.0)
        block.conv.bias.zero_()
    with KinkMonitor(block) as mon:
        block(torch.tensor([[[1.0, -1.0]]], dtype=f64))
        a = mon.pattern()
        mon.reset()
        block(torch.tensor([[[-1.0, 1.0]]], dtype=f64))
        b = mon.pattern()
    assert not torch.equal(a, b)


# -- checkpoints ---------------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path):
    torch.manual_seed(0)
    model = nn.Sequential(nn.Linear(3, 4), nn.BatchNorm1d(4))
    model.train()
    model(torch.randn(8, 3))
    save_checkpoint(model, tmp_path, {"kind": "toy"}, lambda n: "head")
    manifest = read_checkpoint_manifest(tmp_path)
    assert manifest["architecture"] == {"kind": "toy"}
    kinds = {e["name"]: e["kind"] for e in manifest["tensors"]}
    assert kinds["1.running_mean"] == "buffer" and kinds["0.weight"] == "parameter"
    assert (tmp_path / "weights.bin").stat().st_size == manifest["total_bytes"]
    other = nn.Sequential(nn.Linear(3, 4), nn.BatchNorm1d(4))
    load_weights(other, tmp_path)
    for (n, a), (_, b) in zip(model.state_dict().items(), other.state_dict().items()):
        if a.is_floating_point():
            assert torch.equal(a, b), n


def test_checkpoint_shape_mismatch_rejected(tmp_path):
    save_checkpoint(nn.Linear(3, 4), tmp_path, {}, lambda n: "head")
    with pytest.raises(ValueError):
        load_weights(nn.Linear(3, 5), tmp_path)


def test_missing_checkpoint_manifest(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_checkpoint_manifest(tmp_path / "nope")
