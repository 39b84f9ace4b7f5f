import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import bce_loop, soft_dice_loop
from spinseg.gradcheck import gradcheck
from spinseg.losses import bce_loss, soft_dice_loss
from spinseg.tensor import Tensor


def T(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad, dtype=np.float64)


def test_bce_perfect_prediction():
    t = np.array([[0, 1], [1, 0]], dtype=np.float64)
    assert bce_loss(T(t), t).item() <= 1e-6


def test_bce_half_is_ln2(rng):
    t = (rng.random((3, 1, 4, 4)) > 0.5).astype(float)
    assert abs(bce_loss(T(np.full(t.shape, 0.5)), t).item() - math.log(2)) < 1e-9


def test_bce_matches_loop(rng):
    for _ in range(20):
        y = rng.random((4, 4))
        t = (rng.random((4, 4)) > 0.5).astype(float)
        assert abs(bce_loss(T(y), t).item() - bce_loop(y, t)) < 1e-9


def test_bce_clamps_extremes():
    v = bce_loss(T([0.0, 1.0]), np.array([1.0, 0.0])).item()
    assert math.isfinite(v)
    assert abs(v - (-math.log(1e-7))) < 1e-6


def test_dice_cases():
    assert soft_dice_loss(T(np.ones(9)), np.ones(9)).item() == 0.0
    assert soft_dice_loss(T(np.zeros(9)), np.zeros(9)).item() == 0.0


def test_dice_matches_loop(rng):
    for _ in range(20):
        y = rng.random((2, 1, 4, 4))
        t = (rng.random((2, 1, 4, 4)) > 0.6).astype(float)
        assert abs(soft_dice_loss(T(y), t).item() - soft_dice_loop(y, t)) < 1e-9


def test_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        bce_loss(T(np.ones((2, 2))), np.ones(4))
    with pytest.raises(ValueError, match="shape"):
        soft_dice_loss(T(np.ones((2, 2))), np.ones(4))


@pytest.mark.parametrize("fn", [bce_loss, soft_dice_loss])
def test_loss_gradcheck(rng, fn):
    y = T(rng.uniform(0.05, 0.95, size=(2, 1, 3, 3)), True)
    t = (rng.random((2, 1, 3, 3)) > 0.5).astype(float)
    rep = gradcheck(lambda: fn(y, t), {"y": y})
    assert rep.passed, rep.format()


def test_bce_minimised_at_target(rng):
    t = (rng.random((4, 4)) > 0.5).astype(float)
    y = T(np.full((4, 4), 0.5), True)
    for _ in range(300):
        y.zero_grad()
        bce_loss(y, t).backward()
        y.data = np.clip(y.data - 0.5 * y.grad, 1e-7, 1 - 1e-7)
    assert np.abs(y.data - t).max() < 0.05
    assert bce_loss(y, t).item() < bce_loss(T(np.full((4, 4), 0.5)), t).item()


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_permutation_invariance(seed):
    r = np.random.default_rng(seed)
    y = r.random(16)
    t = (r.random(16) > 0.5).astype(float)
    perm = r.permutation(16)
    for fn in (bce_loss, soft_dice_loss):
        assert abs(fn(T(y), t).item() - fn(T(y[perm]), t[perm]).item()) < 1e-12
