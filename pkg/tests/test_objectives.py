import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mmdt.errors import BatchError, NumericError, ParamError, ShapeError
from mmdt.objectives import (DiscriminatorBank, LossWeights, discriminate, discriminator_loss, generator_loss,
                             pixel_loss, regularizer_loss, total_loss)


def _const(v, sides=(28, 14, 7)):
    return [torch.full((2, 1, s, s), float(v), dtype=torch.float64) for s in sides]


def test_default_weights():
    w = LossWeights()
    assert (w.lambda_r, w.lambda_g, w.lambda_d, w.lambda_p) == (1, 1, 1, 10)
    assert (w.alpha_genuine, w.alpha_recaptured) == (10, 1e-4)
    with pytest.raises(ParamError):
        LossWeights(lambda_r=-1)
    with pytest.raises(ParamError):
        LossWeights(alpha_genuine=float("inf"))


def test_pixel_loss():
    a = torch.rand(2, 3, 8, 8, dtype=torch.float64)
    assert float(pixel_loss(a, a)) == 0
    assert abs(float(pixel_loss(torch.full((1, 3, 4, 4), 0.6), torch.full((1, 3, 4, 4), 0.5))) - 0.1) < 1e-6
    rng = np.random.default_rng(5)
    x, y = rng.random((8, 8, 3)), rng.random((8, 8, 3))
    brute = sum(abs(x[i, j, c] - y[i, j, c]) for i in range(8) for j in range(8) for c in range(3)) / (8 * 8 * 3)
    assert abs(float(pixel_loss(torch.from_numpy(x), torch.from_numpy(y))) - brute) < 1e-9
    with pytest.raises(ShapeError):
        pixel_loss(a, a[:, :, :4])


def test_regularizer_loss():
    z = torch.zeros(2, 3, 4, 4, dtype=torch.float64)
    assert float(regularizer_loss(z, z)) == 0
    assert abs(float(regularizer_loss(torch.full_like(z, 0.1), z)) - 0.1) < 1e-12
    assert abs(float(regularizer_loss(z, torch.ones_like(z))) - 1e-4) < 1e-12
    with pytest.raises(BatchError):
        regularizer_loss(z[:0], z)


def test_discriminator_loss_examples():
    ones, zeros, half = _const(1), _const(0), _const(0.5)
    assert float(discriminator_loss(ones, zeros, ones, zeros)) == 0
    assert abs(float(discriminator_loss(half, half, half, half)) - 3.0) < 1e-12
    assert abs(float(discriminator_loss(zeros, ones, zeros, ones)) - 12.0) < 1e-12
    with pytest.raises(ShapeError):
        discriminator_loss(ones[:2], zeros, ones, zeros)


def test_generator_loss_examples():
    assert float(generator_loss(_const(1), _const(1))) == 0
    assert abs(float(generator_loss(_const(0), _const(0))) - 6.0) < 1e-12
    assert abs(float(generator_loss(_const(0.5), _const(0.5))) - 1.5) < 1e-12
    with pytest.raises(ShapeError):
        generator_loss(_const(0)[:1], _const(0))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=12, max_size=12), st.lists(st.floats(-3, 3), min_size=6, max_size=6))
def test_adversarial_losses_match_scalar_oracle(d_vals, g_vals):
    maps = [torch.tensor(v, dtype=torch.float64).reshape(1, 1, 1, 1) for v in d_vals]
    rg, fg, rr, fr = maps[0:3], maps[3:6], maps[6:9], maps[9:12]
    brute_d = sum((d_vals[n] - 1) ** 2 + d_vals[3 + n] ** 2 + (d_vals[6 + n] - 1) ** 2 + d_vals[9 + n] ** 2
                  for n in range(3))
    assert abs(float(discriminator_loss(rg, fg, rr, fr)) - brute_d) < 1e-9
    gm = [torch.tensor(v, dtype=torch.float64).reshape(1, 1, 1, 1) for v in g_vals]
    brute_g = sum((g_vals[n] - 1) ** 2 + (g_vals[3 + n] - 1) ** 2 for n in range(3))
    assert abs(float(generator_loss(gm[:3], gm[3:])) - brute_g) < 1e-9


def test_total_loss():
    assert float(total_loss(0.0, 0.0, 0.0, 0.0)) == 0
    assert abs(total_loss(0.1, 1.5, 3.0, 0.2) - 6.6) < 1e-9
    w = LossWeights(lambda_p=0)
    assert total_loss(1, 2, 3, 99.0, w) == total_loss(1, 2, 3, 0.0, w)
    with pytest.raises(NumericError):
        total_loss(float("nan"), 0, 0, 0)
    with pytest.raises(NumericError):
        total_loss(0, 0, torch.tensor(math.inf), 0)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0, 20), min_size=4, max_size=4))
def test_total_loss_is_linear_with_lambda_coefficients(lams):
    w = LossWeights(*lams)
    for k, lam in enumerate(lams):
        unit = [0.0] * 4
        unit[k] = 1.0
        assert abs(total_loss(*unit, w) - lam) < 1e-12


def test_discriminator_map_sides():
    torch.manual_seed(0)
    bank = DiscriminatorBank()
    assert len(bank.members) == 3
    convs = [m for m in bank.members[0].modules() if isinstance(m, torch.nn.Conv2d)]
    assert len(convs) == 8 and sum(c.stride[0] == 2 for c in convs) == 3
    with torch.no_grad():
        maps = discriminate(bank, torch.rand(1, 3, 224, 224))
    assert [tuple(m.shape) for m in maps] == [(1, 1, 28, 28), (1, 1, 14, 14), (1, 1, 7, 7)]
    with pytest.raises(ShapeError):
        discriminate(bank, torch.rand(1, 3, 112, 112))


def test_discriminator_zero_scores_and_determinism():
    bank = DiscriminatorBank(0.125, side=64)
    x = torch.rand(2, 3, 64, 64)
    a, b = discriminate(bank, x), discriminate(bank, x)
    assert all(torch.equal(p, q) for p, q in zip(a, b))
    bank.zero_scores()
    assert all(torch.count_nonzero(m) == 0 for m in discriminate(bank, x))
