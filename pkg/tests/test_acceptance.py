"""End-to-end acceptance checks, one test per criterion.

Each test tags itself with a ``criterion`` property; conftest prints a
PASS/FAIL line per criterion at the end of the session.
"""
import io
import time

import jpeglib
import numpy as np
import pytest
import torch
from PIL import Image
from scipy import stats

from jstegrl.analysis import accum_grad_average, top_n_stats
from jstegrl.distortion import (
    LOG2_3,
    WET_COST,
    change_probability,
    costs_from_policy,
    probabilities_from_costs,
    simulate_embedding,
    solve_lambda,
    _ternary_entropy,
)
from jstegrl.env_net import EnvNet, EnvNetConfig, env_forward, env_loss, gradient_map, reward_map
from jstegrl.jpeg_model import build_dct_basis, decompress, extract_coefficients
from jstegrl.jpeg_parser import (
    MalformedJpegError,
    UnsupportedGeometryError,
    UnsupportedJpegError,
    parse_baseline_jpeg,
)
from jstegrl.nn_core import LAYER_KINDS
from jstegrl.policy_net import change_probabilities, mode_rearrange, phase_split
from jstegrl.trainer import ImageSource, TrainConfig, TrainState, export_costs, synthetic_covers
from jstegrl.uerd import uerd_cost

from conftest import pixel_image, random_image, rel_err
from layer_cases import fd_check, random_case
from oracles import uerd_oracle


@pytest.fixture
def criterion(record_property):
    def tag(label):
        record_property("criterion", label)
        print(label)

    return tag


def test_dct_correctness(criterion, rng):
    criterion("01 DCT basis orthonormal, decompress/extract round trip")
    start = time.perf_counter()
    basis = build_dct_basis(8).reshape(64, 64)
    assert np.abs(basis @ basis.T - np.eye(64)).max() < 1e-10
    worst = 0.0
    for _ in range(1000):
        im = random_image(rng, 16, 16)
        back = extract_coefficients(decompress(im), im.table)
        worst = max(worst, np.abs(back - im.coefficients).max())
    assert worst < 1e-9
    assert time.perf_counter() - start < 5.0


def test_lambda_solver(criterion, rng):
    criterion("02 lambda solver hits the payload, entropy monotone in lambda")
    start = time.perf_counter()
    for _ in range(100):
        costs = rng.exponential(2.0, (16, 16))
        capacity = costs.size * LOG2_3
        for frac in (0.1, 0.3, 0.5):
            lam = solve_lambda(costs, frac * capacity)
            assert abs(_ternary_entropy(change_probability(costs, lam)) - frac * capacity) < 1e-3
        h = [_ternary_entropy(change_probability(costs, lam)) for lam in np.linspace(0, 20, 41)]
        assert (np.diff(h) < 0).all()
    assert time.perf_counter() - start < 10.0


def test_cost_probability_inverse(criterion):
    criterion("03 cost/probability inverse and the q = 2/3 fixed point")
    q = np.linspace(0.01, 0.66, 2001)
    back = 2.0 * change_probability(costs_from_policy(q), 1.0)
    assert np.abs(back - q).max() < 1e-9
    assert costs_from_policy(np.array([2.0 / 3.0]))[0] == 0.0
    assert 2.0 * change_probability(np.array([0.0]), 1.0)[0] == 2.0 / 3.0


def test_uerd_oracle_equivalence(criterion, rng):
    criterion("04 UERD matches the loop oracle on 20 images")
    for i in range(20):
        im = random_image(rng, 32, 32)
        if i == 0:
            # the left block column goes wet, the next one borders texture
            coef = im.coefficients.copy()
            coef[:, :16] = 0
            im = im.with_coefficients(coef)
            assert (uerd_cost(im)[:, :8] >= WET_COST).all()
        assert np.abs(uerd_cost(im) - uerd_oracle(im)).max() < 1e-9


def test_autodiff_soundness(criterion, rng):
    criterion("05 layer finite-difference checks, gradient map vs DCT-domain differences")
    for kind in LAYER_KINDS:
        for _ in range(50):
            layer, inputs = random_case(kind, rng)
            err = fd_check(layer, inputs, rng)
            assert err < 1e-4, (kind, err)

    net = EnvNet(EnvNetConfig.preset("VI")).double().eval()
    im = pixel_image(rng, 32, 32)
    cover = torch.from_numpy(decompress(im, level_shift=False))[None, None]
    plane = decompress(im, level_shift=False) + rng.normal(0, 0.5, (32, 32))

    def loss(p):
        with torch.no_grad():
            return env_loss(*env_forward(net, cover, torch.from_numpy(p)[None, None])).item()

    stego = torch.from_numpy(plane)[None, None].requires_grad_(True)
    (pixel_grad,) = torch.autograd.grad(env_loss(*env_forward(net, cover, stego)), stego)
    g = gradient_map(pixel_grad, im.table.steps)[0]
    # small enough that no probe crosses a ReLU or truncation kink
    basis, h = build_dct_basis(), 1e-5
    idx = rng.integers(0, 32, (20, 2))
    numeric = []
    for i, j in idx:
        delta = np.zeros((32, 32))
        a, b = 8 * (i // 8), 8 * (j // 8)
        delta[a : a + 8, b : b + 8] = im.table.steps[i % 8, j % 8] * basis[i % 8, j % 8]
        numeric.append((loss(plane + h * delta) - loss(plane - h * delta)) / (2 * h))
    assert rel_err(g[idx[:, 0], idx[:, 1]], numeric) < 1e-3


def test_structural_bijection(criterion, rng):
    criterion("06 mode rearrangement and phase split are mutual inverses")
    for _ in range(100):
        h, w = (int(v) for v in rng.integers(1, 9, 2))
        vol = rng.normal(size=(h, w, 64))
        assert np.array_equal(phase_split(mode_rearrange(vol)), vol)
        plane = rng.normal(size=(8 * h, 8 * w))
        assert np.array_equal(mode_rearrange(phase_split(plane)), plane)


def test_sampling_fidelity(criterion, rng):
    criterion("07 sampled action frequencies pass chi-square, fixed seed is byte-identical")
    draws = 10_000
    q = rng.uniform(0.0, 2.0 / 3.0, (8, 8))
    q[0, 0], q[0, 1] = 0.0, 2.0 / 3.0
    policy = np.stack([q / 2, 1 - q, q / 2], axis=-1)
    actions = simulate_embedding(np.broadcast_to(policy, (draws, 8, 8, 3)), seed=11)
    counts = np.stack([(actions == v).sum(0) for v in (-1, 0, 1)], axis=-1)
    alpha = 1e-3
    for (i, j), p in np.ndenumerate(q):
        expected = draws * policy[i, j]
        live = expected > 0
        assert (counts[i, j][~live] == 0).all()
        if live.sum() > 1:
            assert stats.chisquare(counts[i, j][live], expected[live]).pvalue > alpha, (i, j)
    costs = rng.exponential(1.0, (32, 32))
    pol = probabilities_from_costs(costs, solve_lambda(costs, 300.0))
    assert simulate_embedding(pol, 5).tobytes() == simulate_embedding(pol, 5).tobytes()


def test_reward_law(criterion):
    criterion("08 reward sign law over all sign combinations")
    m = np.repeat([-1, 0, 1], 3)
    g = np.tile([-0.25, 0.0, 0.25], 3)
    r = reward_map(m, g, 1e7)
    assert ((r > 0) == ((m != 0) & (np.sign(m) == np.sign(g)) & (g != 0))).all()
    assert (r[m == 0] == 0).all()


def test_gradient_analysis_claims(criterion):
    criterion("09 dct8 filters peak at their own mode, dct8 top-n statistics dominate")
    start = time.perf_counter()
    images, _ = synthetic_covers(20, 64, seed=21)
    e = {bank: accum_grad_average(images, bank) for bank in ("dct8", "dct4", "srm30")}
    peaks = e["dct8"].reshape(64, 64).argmax(axis=1)
    assert np.array_equal(peaks, np.arange(64))
    s = {bank: top_n_stats(m)[1] for bank, m in e.items()}
    assert (s["dct8"] >= s["dct4"]).all() and (s["dct8"] >= s["srm30"]).all()
    assert time.perf_counter() - start < 120.0


def _tail_ratio(rows, last=50):
    return np.mean([r["payload_entropy"] / r["capacity"] for r in rows[-last:]])


@pytest.mark.slow
def test_toy_training(criterion):
    criterion("10 toy training: capacity met, noisy texture preferred, capacity gap shrinks")
    covers, _ = synthetic_covers(64, 64, seed=1)
    held_out, noisy = synthetic_covers(16, 64, seed=99)

    state = TrainState(TrainConfig(iterations=500), ImageSource(covers, 0))
    rows = state.run(500)
    # (a) the running policy carries the payload in the final steps
    assert abs(_tail_ratio(rows) - 1.0) < 0.05
    # (b) deployed policy prefers the noisy half
    q = change_probabilities(state.policy, held_out)
    assert q[noisy].mean() > q[~noisy].mean()

    # (c) capacity term alone drives |H - C| down, block-averaged over 100 steps
    state = TrainState(TrainConfig(iterations=500, alpha=0.0, variant="VI"), ImageSource(covers, 0))
    gaps = np.array([abs(r["payload_entropy"] - r["capacity"]) / r["capacity"] for r in state.run(500)])
    blocks = gaps.reshape(5, 100).mean(axis=1)
    floor = 0.03
    settled = int(np.argmax(blocks <= floor))
    assert blocks[settled] <= floor
    assert (np.diff(blocks[: settled + 1]) <= 0).all()
    assert (blocks[settled:] <= floor).all()


def test_reproducibility(criterion, tmp_path):
    criterion("11 bit-identical telemetry, exported costs and checkpoint resume")
    covers, _ = synthetic_covers(8, 32, seed=2)
    cfg = dict(batch=4, image_size=32, variant="VI", iterations=100, seed=9)

    def fresh():
        return TrainState(TrainConfig(**cfg), ImageSource(covers, 9))

    a, b = fresh(), fresh()
    assert a.run(100) == b.run(100)
    assert export_costs(a, covers[0]).tobytes() == export_costs(b, covers[0]).tobytes()

    c = fresh()
    c.run(20)
    c.save(tmp_path / "mid.jckpt")
    expected = c.run(15)
    resumed = TrainState.restore(tmp_path / "mid.jckpt", ImageSource(covers, 9))
    assert resumed.run(15) == expected
    assert export_costs(resumed, covers[3]).tobytes() == export_costs(c, covers[3]).tobytes()


def test_parser(criterion, rng, tmp_path):
    criterion("12 parser recovers reference coefficients, bad streams raise typed errors")
    pixels = rng.integers(0, 256, (40, 56), dtype=np.uint8)
    buf = io.BytesIO()
    Image.fromarray(pixels).save(buf, "JPEG", quality=85)
    data = buf.getvalue()
    (tmp_path / "ref.jpg").write_bytes(data)
    ref = jpeglib.read_dct(str(tmp_path / "ref.jpg"))
    image = parse_baseline_jpeg(data)
    y = ref.Y
    assert np.array_equal(image.coefficients, y.transpose(0, 2, 1, 3).reshape(40, 56))
    assert np.array_equal(image.table.steps, ref.qt[0])

    def encoded(px, **kw):
        out = io.BytesIO()
        Image.fromarray(px).save(out, "JPEG", **kw)
        return out.getvalue()

    with pytest.raises(UnsupportedJpegError):
        parse_baseline_jpeg(encoded(pixels, progressive=True))
    with pytest.raises(UnsupportedGeometryError):
        parse_baseline_jpeg(encoded(pixels[:37, :50]))
    with pytest.raises(MalformedJpegError):
        parse_baseline_jpeg(data[: len(data) // 2])
    with pytest.raises(MalformedJpegError):
        parse_baseline_jpeg(b"not a jpeg")
