import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st
from torch import nn

from tvp.config import LossWeights
from tvp.errors import ConfigError, FormatError, NumericError, ValidationError
from tvp.objectives import (
    FeatureExtractor,
    adv_generator_losses,
    disc_loss,
    mse_loss,
    perceptual_loss,
    total_generator_loss,
)

from oracles import central_difference_check


def test_mse_examples():
    v = torch.randn(2, 4, 3, 8, 8)
    assert mse_loss(v, v) == 0
    assert torch.isclose(mse_loss(v, v + 2), torch.tensor(4.0))
    assert torch.isclose(mse_loss(3 * v, 3 * (v + 1)), 9 * mse_loss(v, v + 1))
    with pytest.raises(ValidationError):
        mse_loss(v, v[:, :3])


def test_adv_examples():
    a, b = adv_generator_losses(torch.tensor([0.5]), torch.tensor([1.0]))
    assert abs(float(a) - 0.6931) < 1e-4
    assert float(b) < 1e-6
    floor, _ = adv_generator_losses(torch.tensor([0.0]), torch.tensor([0.5]))
    assert abs(float(floor) - 16.118) < 1e-3


def test_disc_examples():
    assert abs(float(disc_loss(torch.tensor([0.5]), torch.tensor([0.5]))) - 1.3863) < 1e-4
    assert float(disc_loss(torch.tensor([1.0 - 1e-12]), torch.tensor([1e-12]))) < 1e-5
    for r, f in [(0.0, 1.0), (1.0, 1.0), (0.0, 0.0)]:
        assert math.isfinite(float(disc_loss(torch.tensor([r]), torch.tensor([f]))))


def test_total_examples():
    w = LossWeights(100, 1, 1, 1)
    terms = {"mse": 0.01, "perc": 0.2, "adv2d": 0.6931, "adv3d": 0.6931}
    out = total_generator_loss(terms, w)
    assert abs(float(out.total) - 2.5862) < 1e-6
    assert float(total_generator_loss(terms, LossWeights(0, 0, 0, 0)).total) == 0
    doubled = total_generator_loss(terms, LossWeights(200, 2, 2, 2))
    assert abs(float(doubled.total) - 2 * float(out.total)) < 1e-9
    with pytest.raises(NumericError, match="perc"):
        total_generator_loss({**terms, "perc": float("nan")}, w)
    with pytest.raises(ConfigError):
        LossWeights(-1, 1, 1, 1)


@given(st.lists(st.floats(0, 10), min_size=4, max_size=4), st.lists(st.floats(0, 200), min_size=4, max_size=4))
def test_total_matches_weighted_sum(terms, lam):
    w = LossWeights(*lam)
    t = dict(zip(("mse", "perc", "adv2d", "adv3d"), terms))
    out = total_generator_loss(t, w)
    expect = sum(l * x for l, x in zip(lam, terms))
    assert abs(float(out.total) - expect) <= 1e-6 * max(1.0, abs(expect))
    assert abs(sum(float(v) for v in out.weighted.values()) - float(out.total)) <= 1e-6 * max(1.0, abs(expect))


def test_identity_extractor_is_pixel_l1():
    x, y = torch.randn(3, 3, 8, 8), torch.randn(3, 3, 8, 8)
    fx = FeatureExtractor.identity()
    assert torch.isclose(perceptual_loss(x, y, fx), (x - y).abs().mean(), atol=1e-6)
    assert perceptual_loss(x, x, fx) == 0


def test_perceptual_conv_by_hand():
    conv = nn.Conv2d(3, 1, 2, stride=1, padding=0)
    with torch.no_grad():
        conv.weight.zero_()
        conv.weight[0, 0] = torch.tensor([[1.0, 0.0], [0.0, -1.0]])  # diagonal difference on red
        conv.bias.zero_()
    fx = FeatureExtractor([conv], slope=None)
    x = torch.zeros(1, 3, 4, 4)
    x[0, 0] = torch.arange(16.0).view(4, 4)
    y = torch.zeros(1, 3, 4, 4)
    y[0, 0] = torch.arange(16.0).view(4, 4) ** 2 / 10
    # feature map: a[i, j] - a[i+1, j+1], 3x3 valid positions
    ax = x[0, 0].numpy()
    ay = y[0, 0].numpy()
    fxm = ax[:3, :3] - ax[1:, 1:]
    fym = ay[:3, :3] - ay[1:, 1:]
    expect = np.abs(fxm - fym).mean()
    assert abs(float(perceptual_loss(x, y, fx)) - expect) < 1e-5


def test_perceptual_video_averages_frames():
    fx = FeatureExtractor.random(8, 2, seed=1)
    x, y = torch.randn(2, 3, 3, 8, 8), torch.randn(2, 3, 3, 8, 8)
    per_frame = [perceptual_loss(x[:, t], y[:, t], fx) for t in range(3)]
    assert torch.isclose(perceptual_loss(x, y, fx), torch.stack(per_frame).mean(), atol=1e-6)


@given(st.integers(0, 10_000))
def test_perceptual_symmetric_nonnegative(seed):
    g = torch.Generator().manual_seed(seed)
    fx = FeatureExtractor.random(4, 2, seed=seed)
    x, y = torch.randn(2, 3, 8, 8, generator=g), torch.randn(2, 3, 8, 8, generator=g)
    a, b = perceptual_loss(x, y, fx), perceptual_loss(y, x, fx)
    assert torch.isclose(a, b, atol=1e-6) and float(a) >= 0


@given(st.floats(-50, 50), st.floats(-50, 50))
def test_losses_nonnegative_finite(lr, lf):
    r, f = torch.sigmoid(torch.tensor([lr])), torch.sigmoid(torch.tensor([lf]))
    for v in (*adv_generator_losses(r, f), disc_loss(r, f)):
        assert math.isfinite(float(v)) and float(v) >= 0


def _double(fx):
    return fx.double()


def test_gradients_match_finite_differences():
    torch.manual_seed(0)
    v = torch.randn(2, 3, 6, 6, dtype=torch.float64)
    v_hat = torch.randn(2, 3, 6, 6, dtype=torch.float64, requires_grad=True)
    assert max(central_difference_check(lambda: mse_loss(v, v_hat), [v_hat], 10)) < 1e-4
    fx = _double(FeatureExtractor.random(4, 2, seed=0))
    fx.slope = None  # keep it smooth for finite differences
    assert max(central_difference_check(lambda: perceptual_loss(v, v_hat, fx), [v_hat], 10)) < 1e-4
    s = torch.tensor([0.3, 0.7], dtype=torch.float64, requires_grad=True)
    f = torch.tensor([0.4, 0.2], dtype=torch.float64, requires_grad=True)
    assert max(central_difference_check(lambda: sum(adv_generator_losses(s, f)), [s, f], 10)) < 1e-4
    assert max(central_difference_check(lambda: disc_loss(s, f), [s, f], 10)) < 1e-4


def test_extractor_frozen_and_roundtrip(tmp_path):
    fx = FeatureExtractor.random(6, 3, seed=2)
    assert all(not p.requires_grad for p in fx.parameters())
    fx.save(tmp_path / "fx.bin")
    back = FeatureExtractor.load(tmp_path / "fx.bin")
    x = torch.randn(1, 3, 16, 16)
    for a, b in zip(fx(x), back(x)):
        assert torch.equal(a, b)
    raw = (tmp_path / "fx.bin").read_bytes()
    (tmp_path / "bad.bin").write_bytes(raw[:-3])
    with pytest.raises(FormatError):
        FeatureExtractor.load(tmp_path / "bad.bin")


def test_extractor_from_inverter_taps():
    from tvp.motion import Inverter

    inv = Inverter(2, 8, 8, 16)
    fx = FeatureExtractor.from_inverter(inv, 3)
    taps = fx(torch.randn(1, 3, 16, 16))
    assert len(taps) == 3
    assert taps[0].shape[-1] >= taps[-1].shape[-1]
