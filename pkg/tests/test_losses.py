import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from agfanet import losses, metrics
from agfanet.losses import combined_loss, dice_loss, foreground_weight, weighted_ce_loss
from agfanet.tensor import ShapeError, Tensor


def test_dice_loss_worked_example():
    val = dice_loss(Tensor(np.full(4, 0.5)), np.array([1, 0, 1, 0]), 1.0).item()
    assert abs(val - (1 - 3 / 5)) <= 1e-12
    assert abs(val - 0.4) <= 1e-12


def test_dice_loss_trivial_cases(rng):
    g = (rng.random(64) > 0.5).astype(float)
    for eps in (1e-9, 1.0, 5.0):
        assert abs(dice_loss(Tensor(g.copy()), g, eps).item()) <= 1e-15
    assert dice_loss(Tensor(np.zeros(8)), np.zeros(8), 1.0).item() == 0.0


def test_dice_loss_shape_mismatch():
    with pytest.raises(ShapeError):
        dice_loss(Tensor(np.zeros(4)), np.zeros(5))


def test_omega_worked_example():
    p = np.array([0.2] * 10)
    assert abs(foreground_weight(p) - 4.0) <= 1e-12
    _, omega = weighted_ce_loss(Tensor(p), np.zeros(10))
    assert abs(omega - 4.0) <= 1e-12


def test_wce_worked_example():
    loss, omega = weighted_ce_loss(Tensor(np.array([0.5, 0.5])), np.array([1, 0]))
    assert omega == 1.0
    assert abs(loss.item() - math.log(2)) <= 1e-15


def test_wce_confident_background_near_zero():
    loss, _ = weighted_ce_loss(Tensor(np.full(20, 1e-12)), np.zeros(20))
    assert 0 <= loss.item() < 1e-6


def test_omega_does_not_carry_gradient(rng):
    p = Tensor(rng.uniform(0.1, 0.9, size=6), requires_grad=True)
    g = np.array([1, 0, 0, 1, 0, 0.0])
    loss, omega = weighted_ce_loss(p, g)
    loss.backward()
    pd = p.data
    ref = -(omega * g / pd - (1 - g) / (1 - pd)) / pd.size
    np.testing.assert_allclose(p.grad, ref, rtol=1e-13)


def test_combined_defaults():
    import inspect
    sig = inspect.signature(combined_loss)
    assert sig.parameters["lam"].default == 0.6
    assert sig.parameters["epsilon"].default == 1.0
    assert losses.DEFAULT_LAMBDA == 0.6 and losses.DEFAULT_EPSILON == 1.0


@pytest.mark.parametrize("lam", [0.0, 0.25, 0.6, 1.0])
def test_combined_linear_in_lambda(rng, lam):
    logits = Tensor(rng.normal(size=(2, 4, 4, 4)))
    g = (rng.random((2, 4, 4, 4)) > 0.7).astype(float)
    t = combined_loss(logits, g, lam=lam)
    assert t.total == lam * t.l_wce + (1 - lam) * t.l_dice
    if lam == 1.0:
        assert t.total == t.l_wce
    if lam == 0.0:
        assert t.total == t.l_dice


def test_combined_rejects_bad_hyperparameters():
    with pytest.raises(ValueError):
        combined_loss(Tensor(np.zeros(4)), np.zeros(4), lam=1.5)
    with pytest.raises(ValueError):
        combined_loss(Tensor(np.zeros(4)), np.zeros(4), epsilon=0.0)


@given(hnp.arrays(bool, (4, 4, 4)), hnp.arrays(bool, (4, 4, 4)))
def test_soft_dice_agrees_with_hard_dice(p, g):
    if not (p.any() or g.any()):
        return
    loss = dice_loss(Tensor(p.astype(float)), g.astype(float), 1e-9).item()
    dice, _, _ = metrics.overlap_metrics(metrics.confusion(p, g))
    assert abs((1 - loss) - dice) <= 1e-6


@given(hnp.arrays(np.float64, 27, elements=st.floats(0, 1)), hnp.arrays(bool, 27))
def test_dice_loss_range(p, g):
    val = dice_loss(Tensor(p), g.astype(float), 1.0).item()
    assert 0.0 <= val < 1.0
