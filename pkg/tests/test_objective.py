import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from kiim.objective import (
    LossBreakdown,
    composite_loss,
    composite_loss_from_logits,
    composite_loss_grad,
    cross_entropy_loss,
    land_masked_dice_loss,
    softmax,
    torch_composite,
    torch_cross_entropy,
    torch_dice,
)


def one_hot(labels, K=4):
    return np.eye(K)[labels]


def random_instance(rng, H=8, K=4):
    labels = rng.integers(0, K, (H, H))
    logits = rng.normal(0, 1.5, (H, H, K))
    L = (rng.random((H, H)) > 0.3).astype(float)
    L[0, 0] = 1.0
    return one_hot(labels, K), logits, L


# -- cross-entropy ------------------------------------------------------------


def test_ce_uniform_is_ln4():
    Y = one_hot(np.random.default_rng(0).integers(0, 4, (5, 5)))
    assert cross_entropy_loss(Y, np.full((5, 5, 4), 0.25)) == pytest.approx(math.log(4), abs=1e-12)


def test_ce_single_pixel():
    Y = one_hot(np.array([[2]]))
    Yhat = np.array([[[0.1, 0.2, 0.6, 0.1]]])
    assert cross_entropy_loss(Y, Yhat) == pytest.approx(-math.log(0.6), abs=1e-12)
    assert cross_entropy_loss(Y, Yhat) == pytest.approx(0.5108, abs=1e-4)


def test_ce_perfect_prediction_is_zero():
    Y = one_hot(np.array([[0, 1], [2, 3]]))
    assert cross_entropy_loss(Y, Y) == pytest.approx(0.0, abs=1e-12)


def test_ce_floor_keeps_it_finite():
    Y = one_hot(np.array([[1]]))
    Yhat = np.array([[[1.0, 0.0, 0.0, 0.0]]])
    assert cross_entropy_loss(Y, Yhat) == pytest.approx(-math.log(1e-8))


def test_ce_monotone_along_path():
    Y = one_hot(np.array([[1]]))
    vals = []
    for t in np.linspace(0.05, 0.95, 19):
        rest = (1 - t) / 3
        vals.append(cross_entropy_loss(Y, np.array([[[rest, t, rest, rest]]])))
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_ce_errors():
    with pytest.raises(ValueError, match="shape"):
        cross_entropy_loss(np.zeros((2, 2, 4)), np.full((2, 3, 4), 0.25))
    with pytest.raises(ValueError, match="normalized"):
        cross_entropy_loss(one_hot(np.zeros((2, 2), int)), np.full((2, 2, 4), 0.3))


# -- dice ---------------------------------------------------------------------


def test_dice_perfect_is_zero():
    Y = one_hot(np.array([[0, 1], [2, 3]]))
    assert land_masked_dice_loss(Y, Y, np.ones((2, 2))) == 0.0


def test_dice_two_class_example():
    Y = one_hot(np.ones((3, 3), int), 2)
    Yhat = np.full((3, 3, 2), 0.5)
    assert land_masked_dice_loss(Y, Yhat, np.ones((3, 3))) == pytest.approx(2.0 / 3.0, abs=1e-12)


def test_dice_ignores_pixels_outside_mask(rng):
    labels = rng.integers(0, 4, (6, 6))
    Y = one_hot(labels)
    Yhat = Y.copy()
    L = np.zeros((6, 6))
    L[:3] = 1
    Yhat[3:] = rng.dirichlet(np.ones(4), (3, 6))
    assert land_masked_dice_loss(Y, Yhat, L) == pytest.approx(0.0, abs=1e-12)


def test_dice_empty_class_scores_one():
    # class 3 absent from both truth and prediction inside the mask
    Y = one_hot(np.array([[0, 1]]))
    Yhat = Y.copy()
    assert land_masked_dice_loss(Y, Yhat, np.ones((1, 2))) == 0.0


def test_dice_errors():
    Y = one_hot(np.zeros((2, 2), int))
    with pytest.raises(ValueError, match="all zero"):
        land_masked_dice_loss(Y, Y, np.zeros((2, 2)))
    with pytest.raises(ValueError):
        land_masked_dice_loss(Y, Y, np.ones((3, 3)))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_losses_nonnegative_and_bounded(seed):
    rng = np.random.default_rng(seed)
    Y, logits, L = random_instance(rng, 4)
    p = softmax(logits)
    d = land_masked_dice_loss(Y, p, L)
    assert 0.0 <= d <= 1.0
    assert cross_entropy_loss(Y, p) >= 0.0
    # changing predictions where L == 0 leaves Dice untouched exactly
    q = p.copy()
    q[L == 0] = rng.dirichlet(np.ones(4), int((L == 0).sum()))
    assert land_masked_dice_loss(Y, q, L) == d


# -- composite ----------------------------------------------------------------------


def test_composite_endpoints(rng):
    Y, logits, L = random_instance(rng)
    p = softmax(logits)
    one = composite_loss(Y, p, L, 1.0)
    zero = composite_loss(Y, p, L, 0.0)
    assert one.total == one.ce and zero.total == zero.dice
    half = composite_loss(Y, p, L, 0.5)
    assert abs(half.total - (0.5 * half.ce + 0.5 * half.dice)) <= 1e-9
    assert half.pixels_counted == 64


def test_breakdown_arithmetic():
    b = LossBreakdown(0.5 * 0.4 + 0.5 * 0.2, 0.4, 0.2, 0.5, 1)
    assert b.total == pytest.approx(0.3)
    assert b.to_dict()["alpha"] == 0.5


def test_composite_alpha_range(rng):
    Y, logits, L = random_instance(rng)
    with pytest.raises(ValueError):
        composite_loss(Y, softmax(logits), L, 1.2)


# -- gradients ----------------------------------------------------------------------


@pytest.mark.parametrize("alpha", [0.0, 0.5, 1.0])
def test_analytic_gradient_matches_finite_differences(alpha):
    rng = np.random.default_rng(int(alpha * 10))
    Y, logits, L = random_instance(rng)
    g = composite_loss_grad(Y, logits, L, alpha)
    h = 1e-6
    fd = np.zeros_like(logits)
    for idx in np.ndindex(*logits.shape):
        up, down = logits.copy(), logits.copy()
        up[idx] += h
        down[idx] -= h
        fd[idx] = (composite_loss_from_logits(Y, up, L, alpha) - composite_loss_from_logits(Y, down, L, alpha)) / (2 * h)
    assert np.abs(g - fd).max() <= 1e-4 * np.abs(fd).max()


@pytest.mark.parametrize("alpha", [0.0, 0.3, 1.0])
def test_torch_matches_numpy_and_autograd(alpha, rng):
    Y, logits, L = random_instance(rng)
    labels = Y.argmax(-1)
    z = torch.tensor(np.moveaxis(logits, -1, 0)[None], requires_grad=True)
    total, ce, dice = torch_composite(z.log_softmax(1), torch.tensor(labels[None]), torch.tensor(L[None]), alpha)
    ref = composite_loss(Y, softmax(logits), L, alpha)
    assert total.item() == pytest.approx(ref.total, abs=1e-10)
    assert ce.item() == pytest.approx(ref.ce, abs=1e-10)
    assert dice.item() == pytest.approx(ref.dice, abs=1e-10)
    total.backward()
    grad = np.moveaxis(z.grad[0].numpy(), 0, -1)
    assert np.allclose(grad, composite_loss_grad(Y, logits, L, alpha), atol=1e-10)


def test_torch_losses_are_per_sample(rng):
    lp = torch.randn(3, 4, 5, 5, dtype=torch.float64).log_softmax(1)
    labels = torch.randint(0, 4, (3, 5, 5))
    land = torch.ones(3, 5, 5, dtype=torch.float64)
    assert torch_cross_entropy(lp, labels).shape == (3,)
    assert torch_dice(lp, labels, land).shape == (3,)


def test_unmasked_dice_uses_every_pixel():
    lp = torch.randn(1, 4, 4, 4, dtype=torch.float64).log_softmax(1)
    labels = torch.randint(0, 4, (1, 4, 4))
    land = torch.zeros(1, 4, 4, dtype=torch.float64)
    land[0, 0, 0] = 1
    _, _, masked = torch_composite(lp, labels, land, 0.5, use_land_mask=True)
    _, _, full = torch_composite(lp, labels, land, 0.5, use_land_mask=False)
    assert full.item() == pytest.approx(torch_dice(lp, labels, torch.ones_like(land)).item())
    assert masked.item() != pytest.approx(full.item())
