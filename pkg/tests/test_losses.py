import math

import numpy as np
import pytest

from madgnet import tensor as T
from madgnet.errors import ConfigError, DimensionError
from madgnet.esdm import esdm_forward
from madgnet.losses import (GroundTruthSet, boundary_loss, derive_boundary, derive_distance, distance_loss,
                            network_loss, region_pool_size, region_weights, total_loss, weighted_region_loss)
from madgnet.nn import Conv2d
from madgnet.tensor import Tensor

from oracles import boundary_brute, check_op_grad, edt_brute, region_loss_straight


def random_mask(rng, h, w, p=0.4):
    return rng.random((h, w)) < p


# --- ground truth derivation --------------------------------------------------


def test_boundary_examples():
    assert not derive_boundary(np.zeros((5, 5))).any()
    full = derive_boundary(np.ones((4, 5)))
    ring = np.ones((4, 5))
    ring[1:-1, 1:-1] = 0
    np.testing.assert_array_equal(full, ring)
    sq = np.zeros((7, 7))
    sq[2:5, 2:5] = 1
    b = derive_boundary(sq)
    assert b.sum() == 8 and b[3, 3] == 0 and np.all(b[sq == 0] == 0)


@pytest.mark.parametrize("seed", range(5))
def test_boundary_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    m = random_mask(rng, 9, 11)
    np.testing.assert_array_equal(derive_boundary(m), boundary_brute(m))


def test_distance_examples():
    np.testing.assert_allclose(derive_distance(np.array([[0, 1, 1, 1, 0]])), [[0, 0.5, 1.0, 0.5, 0]])
    assert np.all(derive_distance(np.zeros((3, 3))) == 0)
    d = derive_distance(np.ones((5, 5)))
    assert d.max() == 1.0 and d[2, 2] == 1.0 and d[0, 0] == pytest.approx(1 / 3)


@pytest.mark.parametrize("seed", range(5))
def test_distance_matches_brute_force(seed):
    rng = np.random.default_rng(10 + seed)
    m = random_mask(rng, 12, 9, 0.7)
    m[0, 0] = False
    ref = edt_brute(m)
    np.testing.assert_allclose(derive_distance(m), ref / ref.max(), atol=1e-12)


def test_distance_translation_equivariant():
    m = np.zeros((16, 16), dtype=bool)
    m[3:8, 4:10] = True
    m[5, 10:12] = True
    d = derive_distance(m)
    shifted = derive_distance(np.roll(m, (4, 2), axis=(0, 1)))
    np.testing.assert_array_equal(np.roll(d, (4, 2), axis=(0, 1)), shifted)


def test_derivation_rejects_non_2d():
    with pytest.raises(DimensionError):
        derive_boundary(np.zeros((1, 4, 4)))
    with pytest.raises(DimensionError):
        derive_distance(np.zeros(4))
    with pytest.raises(DimensionError):
        GroundTruthSet.from_region(np.zeros((2, 4, 4)))


def test_ground_truth_set_shapes():
    rng = np.random.default_rng(0)
    gts = GroundTruthSet.from_region(rng.random((3, 1, 6, 6)) < 0.5)
    assert gts.region.shape == gts.boundary.shape == gts.distance.shape == (3, 1, 6, 6)
    assert set(np.unique(gts.boundary)) <= {0.0, 1.0}
    assert gts.distance.min() >= 0 and gts.distance.max() <= 1


# --- loss terms ---------------------------------------------------------------------


def test_pool_size():
    assert region_pool_size(64, 64) == 31
    assert region_pool_size(8, 12) == 7
    assert region_pool_size(9, 9) == 9


def test_uniform_mask_weights_are_one():
    assert np.all(region_weights(np.zeros((1, 1, 8, 8))) == 1.0)


@pytest.mark.parametrize("seed,h,w", [(0, 8, 8), (1, 6, 10), (2, 9, 9)])
def test_region_loss_matches_straight_line(seed, h, w):
    rng = np.random.default_rng(seed)
    g = (rng.random((2, 1, h, w)) < 0.4).astype(float)
    z = rng.standard_normal((2, 1, h, w)) * 2
    got = weighted_region_loss(Tensor(z), g).item()
    assert got == pytest.approx(region_loss_straight(z, g), abs=1e-12)


def test_region_loss_large_pool_matches_straight_line():
    rng = np.random.default_rng(3)
    g = np.zeros((1, 1, 34, 34))
    g[0, 0, 8:20, 10:25] = 1
    z = rng.standard_normal(g.shape)
    assert weighted_region_loss(Tensor(z), g).item() == pytest.approx(region_loss_straight(z, g), abs=1e-12)


def test_region_loss_perfect_prediction():
    rng = np.random.default_rng(4)
    g = (rng.random((1, 1, 8, 8)) < 0.5).astype(float)
    loss = weighted_region_loss(Tensor(np.where(g > 0, 20.0, -20.0)), g).item()
    assert 0 <= loss < 1e-6 * 2


def test_region_loss_unit_weights_is_plain_pair():
    rng = np.random.default_rng(5)
    g = (rng.random((1, 1, 6, 6)) < 0.5).astype(float)
    z = rng.standard_normal(g.shape)
    p = 1 / (1 + np.exp(-z))
    bce = -(g * np.log(p) + (1 - g) * np.log(1 - p)).mean()
    iou = 1 - ((p * g).sum() + 1) / ((p + g - p * g).sum() + 1)
    got = weighted_region_loss(Tensor(z), g, weights=np.ones_like(g)).item()
    assert got == pytest.approx(bce + iou, abs=1e-12)


def test_boundary_and_distance_losses():
    rng = np.random.default_rng(6)
    g = (rng.random((2, 1, 5, 5)) < 0.3).astype(float)
    assert boundary_loss(Tensor(np.zeros(g.shape)), g).item() == pytest.approx(math.log(2), abs=1e-15)
    d = rng.uniform(0.05, 0.95, (2, 1, 5, 5))
    assert distance_loss(Tensor(np.log(d / (1 - d))), d).item() < 1e-24
    z = rng.standard_normal(d.shape)
    p = 1 / (1 + np.exp(-z))
    assert distance_loss(Tensor(z), d).item() == pytest.approx(((p - d) ** 2).mean(), abs=1e-12)
    bce = -(g * np.log(p) + (1 - g) * np.log(1 - p)).mean()
    assert boundary_loss(Tensor(z), g).item() == pytest.approx(bce, abs=1e-12)


def test_shape_mismatch():
    with pytest.raises(DimensionError):
        weighted_region_loss(Tensor(np.zeros((1, 1, 4, 4))), np.zeros((1, 1, 4, 5)))
    with pytest.raises(DimensionError):
        boundary_loss(Tensor(np.zeros((1, 1, 4, 4))), np.zeros((1, 1, 5, 4)))
    with pytest.raises(DimensionError):
        distance_loss(Tensor(np.zeros((2, 1, 4, 4))), np.zeros((1, 1, 4, 4)))


def test_region_loss_gradient():
    rng = np.random.default_rng(7)
    g = (rng.random((2, 1, 6, 6)) < 0.5).astype(float)
    err = check_op_grad(lambda z: weighted_region_loss(z, g), [(2, 1, 6, 6)], rng)
    assert err < 1e-6
    err = check_op_grad(lambda z: boundary_loss(z, g), [(2, 1, 6, 6)], rng)
    assert err < 1e-6


# --- accumulation -----------------------------------------------------------------


def make_bundles(rng, n_heads=3, stages=(1, 2, 3, 4)):
    out = []
    for s in stages:
        y = Tensor(rng.standard_normal((2, 3, 4, 4)))
        heads = [Conv2d(3, 1, 1, rng) for _ in range(n_heads)]
        out.append(esdm_forward(y, heads, 2, stage=s))
    return out


def test_total_loss_accumulation():
    rng = np.random.default_rng(8)
    bundles = make_bundles(rng)
    gts = GroundTruthSet.from_region(rng.random((2, 1, 8, 8)) < 0.5)
    lam = {"region": 1.0, "distance": 0.5, "boundary": 2.0}
    expected = 0.0
    for b in bundles:
        expected += weighted_region_loss(b.final[0], gts.region).item()
        expected += 0.5 * distance_loss(b.final[1], gts.distance).item()
        expected += 2.0 * boundary_loss(b.final[2], gts.boundary).item()
    assert total_loss(bundles, gts, lam).item() == pytest.approx(expected, abs=1e-12)
    region_only = sum(weighted_region_loss(b.final[0], gts.region).item() for b in bundles)
    got = total_loss(bundles, gts, {"region": 1.0, "distance": 0.0, "boundary": 0.0}).item()
    assert got == pytest.approx(region_only, abs=1e-12)
    last = total_loss(bundles[-1:], gts).item()
    ref = (weighted_region_loss(bundles[-1].final[0], gts.region).item()
           + distance_loss(bundles[-1].final[1], gts.distance).item()
           + boundary_loss(bundles[-1].final[2], gts.boundary).item())
    assert last == pytest.approx(ref, abs=1e-12)


def test_network_loss_sums_labels():
    rng = np.random.default_rng(9)
    a, b = make_bundles(rng, stages=(4,)), make_bundles(rng, stages=(4,))
    g1 = GroundTruthSet.from_region(rng.random((2, 1, 8, 8)) < 0.5)
    g2 = GroundTruthSet.from_region(rng.random((2, 1, 8, 8)) < 0.5)
    got = network_loss({4: [a[0], b[0]]}, [g1, g2]).item()
    assert got == pytest.approx(total_loss(a, g1).item() + total_loss(b, g2).item(), abs=1e-12)


def test_total_loss_errors():
    rng = np.random.default_rng(10)
    gts = GroundTruthSet.from_region(rng.random((2, 1, 8, 8)) < 0.5)
    with pytest.raises(ConfigError):
        total_loss(make_bundles(rng, n_heads=1), gts)
    with pytest.raises(ConfigError):
        total_loss(make_bundles(rng), gts, {"region": 1.0, "edges": 1.0})
    with pytest.raises(ConfigError):
        total_loss(make_bundles(rng), gts, {"region": 0.0, "distance": 0.0, "boundary": 0.0})
    loss = total_loss(make_bundles(rng, n_heads=1), gts, {"region": 1.0})
    assert loss.item() >= 0


def test_losses_are_nonnegative_and_bounded():
    rng = np.random.default_rng(11)
    for _ in range(5):
        g = (rng.random((1, 1, 6, 6)) < 0.5).astype(float)
        z = Tensor(rng.standard_normal(g.shape) * 4)
        assert weighted_region_loss(z, g).item() >= 0
        assert 0 <= distance_loss(z, rng.random(g.shape)).item() <= 1
        assert boundary_loss(z, g).item() >= 0


def test_total_loss_backward_reaches_heads():
    rng = np.random.default_rng(12)
    y = Tensor(rng.standard_normal((1, 3, 4, 4)))
    heads = [Conv2d(3, 1, 1, rng) for _ in range(3)]
    gts = GroundTruthSet.from_region(rng.random((1, 1, 8, 8)) < 0.5)
    T.backward(total_loss([esdm_forward(y, heads, 2)], gts))
    assert all(np.abs(h.weight.grad).sum() > 0 for h in heads)
