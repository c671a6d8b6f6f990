import json
import math

import numpy as np
import pytest
import torch

from tvp.config import ModelConfig, PretrainConfig
from tvp.errors import ConfigError, ValidationError
from tvp.generator import StyleGenerator, freeze, modulate, param_digest, pretrain_generator
from tvp.trainer import make_optimizer

from oracles import central_difference_check


def test_adain_standardizes():
    x = torch.randn(2, 5, 8, 8, dtype=torch.float64) * 3 + 7
    out = modulate(x, torch.ones(2, 5, dtype=torch.float64), torch.zeros(2, 5, dtype=torch.float64))
    assert float(out.mean((2, 3)).abs().max()) < 1e-5
    assert float((out.std((2, 3), unbiased=False) - 1).abs().max()) < 1e-3


def test_adain_constant_channel():
    x = torch.full((1, 1, 3, 3), 4.2)
    out = modulate(x, torch.tensor([[2.0]]), torch.tensor([[-0.7]]))
    assert torch.isfinite(out).all() and torch.allclose(out, torch.full_like(out, -0.7))


def test_adain_hand_computed():
    x = torch.tensor([[[[1.0, 3.0], [5.0, 7.0]]]], dtype=torch.float64)
    out = modulate(x, torch.tensor([[2.0]], dtype=torch.float64), torch.tensor([[1.0]], dtype=torch.float64))
    sigma = math.sqrt(5)
    expect = [[2 * (v - 4) / (sigma + 1e-5) + 1 for v in row] for row in ([1, 3], [5, 7])]
    assert np.allclose(out[0, 0].numpy(), expect, atol=1e-12)


def test_adain_shape_guard():
    with pytest.raises(ValidationError):
        modulate(torch.randn(1, 3, 2, 2), torch.ones(1, 4), torch.zeros(1, 4))


def test_adain_gradient_check():
    torch.manual_seed(0)
    x = torch.randn(2, 3, 4, 4, dtype=torch.float64, requires_grad=True)
    ys = torch.randn(2, 3, dtype=torch.float64, requires_grad=True)
    yb = torch.randn(2, 3, dtype=torch.float64, requires_grad=True)
    probe = torch.randn(2, 3, 4, 4, dtype=torch.float64)
    errs = central_difference_check(lambda: (modulate(x, ys, yb) * probe).sum(), [x, ys, yb], 20)
    assert max(errs) < 1e-4


def test_synthesize_range_shape_determinism():
    torch.manual_seed(0)
    g = StyleGenerator(4, 16, 8, 32)
    w = torch.randn(3, 4, 16) * 5
    with torch.no_grad():
        a, b = g(w), g(w)
    assert a.shape == (3, 3, 32, 32)
    assert float(a.abs().max()) <= 1.0
    assert torch.equal(a, b)
    with pytest.raises(ValidationError):
        g(torch.randn(1, 3, 16))


def test_last_row_only_touches_last_layer():
    torch.manual_seed(0)
    g = StyleGenerator(4, 8, 8, 32)
    w = torch.randn(1, 4, 8)
    w2 = w.clone()
    w2[0, 3] += 1.0
    ta, tb = [], []
    out_a, out_b = g(w, ta), g(w2, tb)
    for k in range(4):
        # pre-modulation activations of layer k depend only on rows < k
        assert torch.equal(ta[k], tb[k])
    assert not torch.equal(out_a, out_b)
    w3 = w.clone()
    w3[0, 1] += 1.0
    tc = []
    g(w3, tc)
    assert torch.equal(ta[0], tc[0]) and torch.equal(ta[1], tc[1]) and not torch.equal(ta[2], tc[2])


def test_freeze_contract():
    g = StyleGenerator(2, 8, 8, 16)
    before = param_digest(g)
    freeze(g)
    assert param_digest(g) == before
    assert all(not p.requires_grad for p in g.parameters())
    with pytest.raises(ConfigError):
        make_optimizer(g.parameters(), 1e-4)


def test_bad_sizes():
    with pytest.raises(ConfigError):
        StyleGenerator(1, 8, 8, 32)
    with pytest.raises(ConfigError):
        StyleGenerator(4, 8, 8, 24)


def _frames(n, seed=0):
    from tvp.dataset import make_balanced

    clips = make_balanced(n, seed, (16, 16, 5))
    return np.concatenate([c.frames for c in clips])


def test_pretrain_zero_steps_returns_init():
    m = ModelConfig(height=16, width=16, n_layers=2, d_w=8, gen_channels=8, inv_channels=8, disc_channels=8)
    cfg = PretrainConfig(steps=0, seed=3)
    res = pretrain_generator(_frames(4), _frames(2, 1), m, cfg)
    torch.manual_seed(3)
    fresh = StyleGenerator(2, 8, 8, 16)
    assert param_digest(fresh) == res.digest
    assert param_digest(res.generator) == res.digest
    assert res.generator.frozen


@pytest.mark.slow
def test_pretrain_desk_recipe(tmp_path):
    """Default desk data and pretraining config reach held-out MSE < 0.05 ([-1, 1] units)."""
    from tvp.cli import run_make_data, run_pretrain
    from tvp.config import RunConfig

    cfg = RunConfig()
    run_make_data(cfg, tmp_path / "data")
    art = run_pretrain(cfg, tmp_path / "data", tmp_path / "gen")
    info = json.loads((tmp_path / "gen" / "pretrain.json").read_text())
    assert info["recon_mse"] < 0.05, info["recon_mse"]
    assert info["converged"]
    assert art.digest == param_digest(art.generator)
