import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from conftest import ring_mask
from rnca.errors import ContractError, MetricUndefinedError
from rnca.metrics import (aggregate, betti_numbers, boundary_distances, cl_dice, dice, evaluate,
                          skeletonize, write_report)

masks = arrays(bool, st.tuples(st.integers(1, 12), st.integers(1, 12)))


# ---------------------------------------------------------------------------
# dice


def test_dice_fixtures():
    a = np.zeros((4, 4), bool)
    a[0, :4] = True
    b = np.zeros((4, 4), bool)
    b[0, 2:] = True
    b[1, :2] = True
    assert dice(a, a) == 1.0
    assert dice(a, np.roll(a, 2, 0)) == 0.0
    assert dice(a, b) == 0.5
    z = np.zeros((3, 3), bool)
    assert dice(z, z) == 1.0 and dice(z, a[:3, :3]) == 0.0
    with pytest.raises(ContractError):
        dice(a, z)


@settings(max_examples=60, deadline=None)
@given(masks, st.integers(0, 2**31))
def test_dice_symmetric(a, seed):
    b = np.random.default_rng(seed).random(a.shape) < 0.5
    assert dice(a, b) == dice(b, a)
    assert 0.0 <= dice(a, b) <= 1.0


# ---------------------------------------------------------------------------
# skeleton


def test_thin_line_unchanged():
    m = np.zeros((7, 12), bool)
    m[3, 1:11] = True
    np.testing.assert_array_equal(skeletonize(m), m)
    d = np.eye(8, dtype=bool)
    np.testing.assert_array_equal(skeletonize(d), d)


def test_square_skeleton_connected():
    m = np.zeros((11, 11), bool)
    m[2:9, 2:9] = True
    s = skeletonize(m)
    assert s.any() and (s <= m).all()
    assert betti_numbers(s)[0] == 1


def test_thick_ring_skeleton_keeps_hole():
    r = ring_mask(31, 12, 6)
    s = skeletonize(r)
    assert betti_numbers(s) == (1, 1)
    assert s.sum() < r.sum() / 3


@settings(max_examples=60, deadline=None)
@given(masks)
def test_skeleton_idempotent_and_topology_preserving(m):
    s = skeletonize(m)
    assert (s <= m).all()
    np.testing.assert_array_equal(skeletonize(s), s)
    assert betti_numbers(s) == betti_numbers(m)


def test_skeleton_is_one_pixel_wide(rng):
    m = np.zeros((30, 30), bool)
    m[5:25, 8:20] = True
    s = skeletonize(m)
    # no 2x2 block survives thinning
    blocks = s[:-1, :-1] & s[1:, :-1] & s[:-1, 1:] & s[1:, 1:]
    assert not blocks.any()


# ---------------------------------------------------------------------------
# clDice


def test_cl_dice_fixtures():
    gt = np.zeros((5, 12), bool)
    gt[2, 1:11] = True
    pred = np.zeros_like(gt)
    pred[2, 1:6] = True
    assert cl_dice(gt, gt) == 1.0
    assert cl_dice(pred, gt) == pytest.approx(2 / 3)
    far = np.zeros_like(gt)
    far[0, 0:3] = True
    assert cl_dice(far, gt) == 0.0
    z = np.zeros_like(gt)
    assert cl_dice(z, z) == 1.0 and cl_dice(z, gt) == 0.0


@settings(max_examples=40, deadline=None)
@given(masks)
def test_cl_dice_self_is_one(m):
    if m.any():
        assert cl_dice(m, m) == 1.0


# ---------------------------------------------------------------------------
# Betti numbers


def test_betti_fixtures():
    sq = np.zeros((8, 8), bool)
    sq[2:6, 2:6] = True
    assert betti_numbers(sq) == (1, 0)
    r = ring_mask(21, 7, 4)
    assert betti_numbers(r) == (1, 1)
    two = np.concatenate([r, r], axis=1)
    assert betti_numbers(two) == (2, 2)
    assert betti_numbers(np.zeros((4, 4), bool)) == (0, 0)
    assert betti_numbers(np.ones((4, 4), bool)) == (1, 0)


def test_connectivity_convention():
    diag = np.eye(4, dtype=bool)
    assert betti_numbers(diag)[0] == 1  # foreground 8-connected
    # a diagonal-walled diamond: the background inside is 4-enclosed
    m = np.zeros((7, 7), bool)
    for y, x in [(1, 3), (2, 2), (2, 4), (3, 1), (3, 5), (4, 2), (4, 4), (5, 3)]:
        m[y, x] = True
    assert betti_numbers(m) == (1, 1)


def test_betti_matches_flood_fill_oracle(rng):
    for _ in range(60):
        m = rng.random((16, 16)) < rng.uniform(0.2, 0.8)
        assert betti_numbers(m) == oracles.betti(m)


@settings(max_examples=60, deadline=None)
@given(masks, st.integers(0, 3), st.integers(0, 3), st.integers(0, 3))
def test_betti_invariant_under_shift_and_rotation(m, dy, dx, k):
    p = np.pad(m, 4)
    b = betti_numbers(p)
    assert betti_numbers(np.roll(p, (dy, dx), (0, 1))) == b
    assert betti_numbers(np.rot90(p, k)) == b


def test_euler_consistency(rng):
    for _ in range(50):
        m = np.pad(rng.random((9, 9)) < 0.55, 1)
        b0, b1 = betti_numbers(m)
        assert b0 - b1 == oracles.euler_characteristic(m)


# ---------------------------------------------------------------------------
# boundary distances


def test_distance_fixtures():
    a = np.zeros((5, 8), bool)
    a[2, 1] = True
    b = np.zeros_like(a)
    b[2, 4] = True
    assert boundary_distances(a, b) == (3.0, 3.0)
    assert boundary_distances(a, a) == (0.0, 0.0)
    with pytest.raises(MetricUndefinedError):
        boundary_distances(a, np.zeros_like(a))


def test_concentric_squares_match_all_pairs():
    n = 16
    small = np.zeros((n, n), bool)
    small[6:10, 6:10] = True
    big = np.zeros((n, n), bool)
    big[4:12, 4:12] = True
    hd, assd = boundary_distances(small, big)
    want = oracles.hd_assd(small, big)
    assert hd == pytest.approx(want[0], abs=1e-6)
    assert assd == pytest.approx(want[1], abs=1e-6)
    assert hd == pytest.approx(math.hypot(2, 2))


def test_distances_match_all_pairs_random(rng):
    for _ in range(20):
        a = rng.random((14, 14)) < 0.3
        b = rng.random((14, 14)) < 0.3
        if a.any() and b.any():
            got = boundary_distances(a, b)
            want = oracles.hd_assd(a, b)
            assert got[0] == pytest.approx(want[0], abs=1e-6)
            assert got[1] == pytest.approx(want[1], abs=1e-6)


@settings(max_examples=50, deadline=None)
@given(masks, st.integers(0, 2**31))
def test_hd_dominates_assd(a, seed):
    b = np.random.default_rng(seed).random(a.shape) < 0.5
    if a.any() and b.any():
        hd, assd = boundary_distances(a, b)
        assert hd >= assd >= 0
        assert (hd == 0) == (assd == 0)


# ---------------------------------------------------------------------------
# reports


def test_evaluate_fixtures():
    r = ring_mask(21, 7, 4)
    rep = evaluate(r, r)
    assert rep.dice == 1 and rep.cl_dice == 1 and rep.topo_correct
    assert (rep.delta_beta0, rep.delta_beta1, rep.hd, rep.assd) == (0, 0, 0.0, 0.0)
    broken = r.copy()
    broken[10, 15:] = False
    rep = evaluate(broken, r)
    assert rep.delta_beta1 == 1 and not rep.topo_correct
    assert rep.delta_beta0 >= 0


def test_evaluate_empty_prediction_gives_nan_distances():
    r = ring_mask(21, 7, 4)
    rep = evaluate(np.zeros_like(r), r)
    assert math.isnan(rep.hd) and math.isnan(rep.assd)
    assert rep.dice == 0 and rep.delta_beta0 == 1


def test_aggregate_excludes_nan():
    r = ring_mask(21, 7, 4)
    reps = [evaluate(r, r), evaluate(np.zeros_like(r), r)]
    agg = aggregate(reps)
    assert agg["n"] == 2 and agg["hd_excluded"] == 1
    assert agg["hd"] == (0.0, 0.0)
    assert agg["dice"] == (0.5, 0.5)
    assert agg["topo_count"] == 1


def test_write_report_sorted_with_summary(tmp_path):
    r = ring_mask(21, 7, 4)
    rows = [("b", evaluate(r, r)), ("a", evaluate(np.zeros_like(r), r))]
    path = write_report(tmp_path / "rep.csv", rows, [("fill_", [evaluate(r, r)])])
    with open(path, newline="") as fh:
        table = list(csv.reader(fh))
    assert table[0][:3] == ["id", "dice", "cl_dice"]
    assert [row[0] for row in table[1:]] == ["a", "b", "mean", "std", "fill_mean", "fill_std"]
    assert table[1][table[0].index("hd")] == "nan"
    assert table[3][1] == "0.500000"
