import numpy as np
import pytest
import torch
import torch.nn as nn

from jstegrl.nn_core import (
    LAYER_KINDS,
    TLU,
    Adam,
    AdamConfig,
    CheckpointError,
    CheckpointVersionError,
    Graph,
    LayerSpec,
    NonFiniteError,
    adam_step,
    batchnorm,
    build_layer,
    checkpoint_bytes,
    checkpoint_from_bytes,
    init_weights,
    install_finite_checks,
    load_checkpoint,
    load_module_tensors,
    module_tensors,
    save_checkpoint,
)

from layer_cases import fd_check, random_case


@pytest.mark.parametrize("kind", LAYER_KINDS)
def test_layer_gradients_match_finite_differences(kind):
    rng = np.random.default_rng(hash(kind) % 2**32)
    for _ in range(10):
        layer, inputs = random_case(kind, rng)
        assert fd_check(layer, inputs, rng, max_coords=20) < 1e-4


def test_identity_conv():
    conv = build_layer(LayerSpec("conv", 1, 1, kernel=1))
    with torch.no_grad():
        conv.weight.fill_(1.0)
        conv.bias.zero_()
    x = torch.randn(2, 1, 5, 5)
    assert torch.equal(conv(x), x)


def test_tlu_clamps():
    out = TLU(8.0)(torch.tensor([12.5, -12.5, 3.0]))
    assert out.tolist() == [8.0, -8.0, 3.0]
    with pytest.raises(ValueError):
        TLU(0.0)


def test_strided_conv_matches_sliding_window(rng):
    x = rng.normal(size=(16, 16))
    k = rng.normal(size=(3, 3))
    conv = build_layer(LayerSpec("conv", 1, 1, kernel=3, stride=2)).double()
    with torch.no_grad():
        conv.weight[0, 0] = torch.from_numpy(k)
        conv.bias.zero_()
    out = conv(torch.from_numpy(x)[None, None])[0, 0].detach().numpy()
    padded = np.pad(x, 1)
    oracle = np.array([[(padded[2 * i : 2 * i + 3, 2 * j : 2 * j + 3] * k).sum() for j in range(8)] for i in range(8)])
    assert out.shape == (8, 8)
    assert np.abs(out - oracle).max() < 1e-6


def test_deconv_doubles_size():
    layer = build_layer(LayerSpec("deconv", 2, 3, kernel=3, stride=2))
    assert layer(torch.randn(1, 2, 5, 7)).shape == (1, 3, 10, 14)


def test_unknown_kind_rejected():
    with pytest.raises(ValueError):
        LayerSpec("maxpool")
    with pytest.raises(ValueError):
        LayerSpec("conv", kernel=0)


def test_graph_input_gradient_of_identity():
    g = Graph(nn.Identity(), (1, 4, 4))
    out = g.forward(torch.randn(3, 1, 4, 4))
    grads = g.backward(torch.ones_like(out))
    assert torch.equal(grads.input, torch.ones(3, 1, 4, 4))


def test_graph_errors():
    g = Graph(nn.Identity(), (1, 4, 4))
    with pytest.raises(RuntimeError):
        g.backward(torch.ones(1))
    with pytest.raises(ValueError):
        g.forward(torch.randn(1, 1, 5, 4))
    with pytest.raises(NonFiniteError):
        g.forward(torch.full((1, 1, 4, 4), float("nan")))


def test_frozen_layer_passes_input_gradient():
    net = nn.Sequential(nn.Conv2d(1, 2, 3, padding=1), nn.Conv2d(2, 1, 1))
    net[0].weight.requires_grad_(False)
    net[0].bias.requires_grad_(False)
    g = Graph(net)
    out = g.forward(torch.randn(1, 1, 4, 4))
    grads = g.backward(torch.ones_like(out))
    assert set(grads.params) == {"1.weight", "1.bias"}
    assert grads.input.abs().sum() > 0


def test_finite_checks_trip():
    net = nn.Sequential(nn.Linear(2, 2))
    install_finite_checks(net)
    with pytest.raises(NonFiniteError):
        net(torch.tensor([[float("inf"), 0.0]]))


def test_init_statistics():
    conv = nn.Conv2d(64, 256, 3)
    init_weights(conv)
    fan_in = 64 * 9
    assert conv.weight.std().item() == pytest.approx(np.sqrt(2 / fan_in), rel=0.05)
    assert conv.bias.abs().max().item() == 0.0


def test_adam_zero_gradient_keeps_parameters():
    p = nn.Parameter(torch.tensor([1.5], dtype=torch.float64))
    opt = Adam([p])
    adam_step(opt, [p], [torch.zeros(1, dtype=torch.float64)])
    assert p.item() == 1.5
    assert opt.step_count == 1


def test_adam_matches_scalar_reference():
    cfg = AdamConfig(lr=0.01)
    p = nn.Parameter(torch.tensor([0.3], dtype=torch.float64))
    opt = Adam([p], cfg)
    theta, m, v = 0.3, 0.0, 0.0
    for t, g in enumerate([0.5, -0.2, 0.7, 0.1], 1):
        adam_step(opt, [p], [torch.tensor([g], dtype=torch.float64)])
        m = cfg.beta1 * m + (1 - cfg.beta1) * g
        v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
        mhat, vhat = m / (1 - cfg.beta1**t), v / (1 - cfg.beta2**t)
        theta -= cfg.lr * mhat / (np.sqrt(vhat) + cfg.eps)
        assert abs(p.item() - theta) < 1e-12


def test_adam_shape_mismatch():
    p = nn.Parameter(torch.zeros(2))
    with pytest.raises(ValueError):
        adam_step(Adam([p]), [p], [torch.zeros(3)])


def test_lr_schedule():
    opt = Adam([nn.Parameter(torch.zeros(1))])
    assert opt.lr_at(0) == 1e-4
    assert opt.lr_at(29_999) == 1e-4
    assert opt.lr_at(30_000) == 1e-5
    assert opt.lr_at(60_000) == pytest.approx(1e-6, rel=1e-12)


def test_batchnorm_moving_average_converges():
    torch.manual_seed(3)
    bn = batchnorm(2, momentum=0.999).double()
    mean, std = torch.tensor([1.5, -0.5]), torch.tensor([2.0, 0.5])
    for _ in range(10_000):
        x = torch.randn(64, 2, 1, 1, dtype=torch.float64) * std[None, :, None, None] + mean[None, :, None, None]
        bn(x)
    assert torch.allclose(bn.running_mean, mean.double(), atol=0.05)
    assert torch.allclose(bn.running_var, (std**2).double(), atol=0.1)


def test_batchnorm_momentum_convention():
    bn = batchnorm(1, momentum=0.999)
    bn(torch.full((4, 1, 1, 1), 1.0) + torch.tensor([0.0, 0.0, 0.0, 1e-3])[:, None, None, None])
    assert bn.running_mean.item() == pytest.approx(0.001, rel=1e-2)


def test_checkpoint_round_trip(tmp_path):
    net = nn.Sequential(nn.Conv2d(1, 3, 3), nn.BatchNorm2d(3))
    tensors = module_tensors(net)
    tensors["extra"] = np.arange(5)
    tensors["f64"] = np.linspace(0, 1, 7)
    save_checkpoint(tmp_path / "a.jckpt", tensors, 42, {"note": "x"})
    back, step, meta = load_checkpoint(tmp_path / "a.jckpt")
    assert step == 42 and meta == {"note": "x"}
    for k, v in tensors.items():
        assert back[k].tobytes() == np.asarray(v).astype(back[k].dtype).tobytes()
    other = nn.Sequential(nn.Conv2d(1, 3, 3), nn.BatchNorm2d(3))
    load_module_tensors(other, back)
    assert torch.equal(other[0].weight, net[0].weight)


def test_checkpoint_errors():
    data = bytearray(checkpoint_bytes({"a": np.zeros(3, np.float32)}, 1))
    data[4] = 9
    with pytest.raises(CheckpointVersionError):
        checkpoint_from_bytes(bytes(data))
    good = checkpoint_bytes({"a": np.zeros(3, np.float32)}, 1)
    with pytest.raises(CheckpointError):
        checkpoint_from_bytes(good[:-3])
    with pytest.raises(CheckpointError):
        checkpoint_from_bytes(b"NOPE" + good[4:])
    with pytest.raises(CheckpointError):
        load_module_tensors(nn.Linear(2, 2), {})


def test_checkpoint_size_is_linear_in_parameters():
    sizes = []
    for n in (10, 20, 40):
        sizes.append(len(checkpoint_bytes({"w": np.zeros(n, np.float32)}, 0)))
    assert sizes[1] - sizes[0] == 40 and sizes[2] - sizes[1] == 80
