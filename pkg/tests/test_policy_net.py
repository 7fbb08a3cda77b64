import math

import numpy as np
import pytest
import torch

from jstegrl.distortion import costs_from_policy
from jstegrl.jpeg_model import JpegImage, compress, quality_to_quant_table
from jstegrl.policy_net import (
    PolicyNet,
    PolicyNetConfig,
    entropy_bits,
    mode_rearrange,
    phase_split,
    policy_forward,
    policy_from_q,
    policy_loss,
    receptive_field,
)

from conftest import pixel_image


def test_receptive_field_arithmetic():
    assert receptive_field((2, 2, 2)) == 15
    assert PolicyNetConfig().strides == (2, 2, 2)
    assert PolicyNetConfig(texture_provider="wavelet-fixed").strides == (1, 2, 1, 2, 1, 2)


def test_bad_group_count_rejected():
    with pytest.raises(ValueError):
        PolicyNetConfig(feature_groups=4)
    with pytest.raises(ValueError):
        PolicyNetConfig(texture_provider="nope")


def test_learned_path_shapes():
    net = PolicyNet().eval()
    x = torch.randn(1, 1, 256, 256)
    with torch.no_grad():
        assert net.texture_module(x).shape == (1, 1, 256, 256)
        vol = net.feature_volume(x)
        assert vol.shape == (1, 64, 32, 32)
        assert vol.min() >= 0 and vol.max() <= 1


def test_forward_is_deterministic(rng):
    net = PolicyNet().eval()
    x = net.prepare([pixel_image(rng, 32, 32)])
    with torch.no_grad():
        assert torch.equal(net(x), net(x))
        assert torch.isfinite(net(x)).all()


@pytest.mark.parametrize("provider", ["wavelet-fixed", "msu-fixed", "learned-blockwise"])
def test_other_providers(provider, rng):
    net = PolicyNet(PolicyNetConfig(texture_provider=provider))
    p = policy_forward(net, pixel_image(rng, 32, 32))
    assert p.shape == (32, 32, 3)
    assert np.allclose(p.sum(-1), 1.0)


def test_wavelet_provider_on_constant_image_is_zero():
    net = PolicyNet(PolicyNetConfig(texture_provider="wavelet-fixed"))
    flat = compress(np.full((32, 32), 100.0), quality_to_quant_table(75))
    assert net.prepare([flat]).abs().max() < 1e-5


def test_feature_module_rejects_bad_size():
    net = PolicyNet(PolicyNetConfig(texture_provider="wavelet-fixed"))
    with pytest.raises(ValueError):
        net.feature_volume(torch.zeros(1, 3, 36, 36))


def test_mode_rearrange_examples():
    assert (mode_rearrange(np.full((2, 3, 64), 0.25)) == 0.25).all()
    vol = np.zeros((2, 2, 64))
    vol[1, 1, 9] = 1.0  # tenth channel
    plane = mode_rearrange(vol)
    assert plane[9, 9] == 1.0 and plane.sum() == 1.0
    with pytest.raises(ValueError):
        mode_rearrange(np.zeros((2, 2, 63)))


def test_mode_rearrange_matches_network_layout(rng):
    vol = rng.normal(size=(3, 4, 64))
    t = torch.from_numpy(vol.transpose(2, 0, 1))[None]
    assert (torch.nn.functional.pixel_shuffle(t, 8)[0, 0].numpy() == mode_rearrange(vol)).all()


def test_phase_split_is_inverse(rng):
    vol = rng.normal(size=(4, 5, 64))
    assert (phase_split(mode_rearrange(vol)) == vol).all()
    plane = rng.normal(size=(24, 16))
    assert (mode_rearrange(phase_split(plane)) == plane).all()


def test_policy_triples(rng):
    p = policy_forward(PolicyNet(), pixel_image(rng, 64, 64))
    assert p.shape == (64, 64, 3)
    assert np.allclose(p.sum(-1), 1.0)
    assert (p[..., 0] == p[..., 2]).all()


def test_uniform_policy_costs_nothing():
    assert np.allclose(policy_from_q(np.full((4, 4), 2 / 3)), 1 / 3)
    assert (costs_from_policy(np.full((4, 4), 2 / 3)) == 0).all()


def test_zero_rewards():
    q = torch.full((1, 2, 2), 0.3, dtype=torch.float64)
    actions = np.array([[[1, 0], [-1, 0]]])
    l_a, l_r, l_c = policy_loss(q, actions, np.zeros((1, 2, 2)), [1.0], alpha=1.0, beta=0.5)
    assert l_r.item() == 0.0
    assert l_a.item() == pytest.approx(0.5 * l_c.item(), abs=1e-15)


def test_capacity_loss_zero_at_target():
    q = torch.full((1, 2, 2), 0.3, dtype=torch.float64)
    capacity = entropy_bits(q).item()
    _, _, l_c = policy_loss(q, np.zeros((1, 2, 2), int), np.zeros((1, 2, 2)), [capacity])
    assert l_c.item() == 0.0


def test_reward_loss_by_hand():
    q = torch.tensor([[[0.2, 0.5], [0.9, 0.1]]], dtype=torch.float64)
    m = np.array([[[1, 0], [-1, 0]]])
    r = np.array([[[0.5, -1.0], [2.0, 0.25]]])
    pi = [0.1, 0.5, 0.45, 0.9]  # pi of the sampled actions
    expected = -(0.5 * math.log(pi[0]) - 1.0 * math.log(pi[1]) + 2.0 * math.log(pi[2]) + 0.25 * math.log(pi[3])) / 4
    _, l_r, _ = policy_loss(q, m, r, [0.0])
    assert abs(l_r.item() - expected) < 1e-12


def test_entropy_bits_matches_formula():
    q = torch.tensor([[0.3, 2 / 3]], dtype=torch.float64)
    expected = sum(-(v * math.log2(v / 2) + (1 - v) * math.log2(1 - v)) for v in (0.3, 2 / 3))
    assert entropy_bits(q).item() == pytest.approx(expected, abs=1e-12)


def test_zero_probability_action_is_an_error():
    q = torch.zeros((1, 1, 1), dtype=torch.float64)
    with pytest.raises(ValueError):
        policy_loss(q, np.ones((1, 1, 1), int), np.ones((1, 1, 1)), [0.0])


@pytest.mark.parametrize("reward", [1.0, -1.0])
def test_policy_gradient_direction(reward):
    theta = torch.zeros(1, 1, 1, dtype=torch.float64, requires_grad=True)
    q = torch.sigmoid(theta)
    _, l_r, _ = policy_loss(q, np.ones((1, 1, 1), int), np.full((1, 1, 1), reward), [0.0])
    l_r.backward()
    before = (torch.sigmoid(theta) / 2).item()
    with torch.no_grad():
        theta -= 0.1 * theta.grad
    after = (torch.sigmoid(theta) / 2).item()
    assert (after > before) if reward > 0 else (after < before)


def test_capacity_pull_on_frozen_features(rng):
    features = torch.from_numpy(rng.normal(size=(1, 16, 16)))
    w = torch.tensor([0.3, 0.0], dtype=torch.float64, requires_grad=True)
    capacity = [60.0]
    opt = torch.optim.SGD([w], lr=1e-4)
    gaps = []
    for _ in range(300):
        q = torch.sigmoid(w[0] * features + w[1])
        _, _, l_c = policy_loss(q, np.zeros((1, 16, 16), int), np.zeros((1, 16, 16)), capacity, alpha=0.0, beta=1.0)
        gaps.append(abs(entropy_bits(q.detach()).item() - capacity[0]))
        opt.zero_grad()
        l_c.backward()
        opt.step()
    floor = 1e-3
    assert gaps[-1] < 1.0
    assert all(b <= a or a < floor for a, b in zip(gaps, gaps[1:]))
    # any point q stays a valid distribution
    p = policy_from_q(torch.sigmoid(w[0] * features + w[1]).detach().numpy())
    assert np.allclose(p.sum(-1), 1) and (p >= 0).all()
