import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from agfanet import metrics
from agfanet.metrics import (ConfusionCounts, MetricsReport, closing, compute_report, confusion, count_components,
                             hausdorff_distance, mean_report, overlap_metrics, postprocess)
from agfanet.tensor import ShapeError
from oracles import boundary_loops, closing_loops, components_bfs, hausdorff_all_pairs


def _blob_masks(shape_max=16):
    side = st.integers(2, shape_max)
    return st.tuples(side, side, side, st.integers(0, 2**31 - 1), st.floats(0.05, 0.6))


def _random_pair(params):
    d, h, w, seed, density = params
    r = np.random.default_rng(seed)
    a = r.random((d, h, w)) < density
    b = r.random((d, h, w)) < density
    a.flat[0] = True
    b.flat[-1] = True
    return a, b


def test_confusion_examples():
    t = np.zeros((4, 4, 4), bool)
    t[1:3, 1:3, 1:3] = True
    c = confusion(t, t)
    assert (c.tp, c.fp, c.fn, c.tn) == (8, 0, 0, 56)
    c = confusion(~t, t)
    assert c.tp == 0 and c.tn == 0


def test_confusion_matches_loop_oracle(rng):
    p, t = rng.random((8, 8, 8)) < 0.4, rng.random((8, 8, 8)) < 0.4
    tp = fp = fn = tn = 0
    for a, b in zip(p.ravel(), t.ravel()):
        tp += a and b
        fp += a and not b
        fn += b and not a
        tn += not a and not b
    assert confusion(p, t) == ConfusionCounts(tp, fp, fn, tn)


def test_confusion_rejects_shape_mismatch_and_nonbinary():
    with pytest.raises(ShapeError):
        confusion(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))
    with pytest.raises(ValueError):
        confusion(np.full((2, 2, 2), 2), np.zeros((2, 2, 2)))


def test_overlap_worked_example():
    d, r, p = overlap_metrics(ConfusionCounts(3, 1, 1, 0))
    for v in (d, r, p):
        assert abs(v - 0.75) <= 1e-12
    assert overlap_metrics(ConfusionCounts(5, 0, 0, 3)) == (1.0, 1.0, 1.0)
    assert overlap_metrics(ConfusionCounts(0, 2, 3, 1)) == (0.0, 0.0, 0.0)


def test_overlap_empty_conventions():
    assert overlap_metrics(ConfusionCounts(0, 0, 0, 10)) == (1.0, 1.0, 1.0)
    assert overlap_metrics(ConfusionCounts(0, 4, 0, 10)) == (0.0, 0.0, 0.0)


@given(hnp.arrays(bool, (5, 5, 5)), hnp.arrays(bool, (5, 5, 5)))
def test_confusion_sums_to_n_and_dice_formula(p, t):
    c = confusion(p, t)
    assert c.total == 125
    dice = overlap_metrics(c)[0]
    if 2 * c.tp + c.fp + c.fn:
        assert dice == 2 * c.tp / (2 * c.tp + c.fp + c.fn)


def test_boundary_matches_loops(rng):
    m = rng.random((7, 6, 5)) < 0.5
    np.testing.assert_array_equal(metrics.boundary(m), boundary_loops(m))


def test_hausdorff_examples():
    a = np.zeros((8, 8, 8), bool)
    b = np.zeros_like(a)
    a[1, 2, 2] = True
    b[4, 2, 2] = True
    assert hausdorff_distance(a, b) == 3.0
    assert hausdorff_distance(a, a) == 0.0
    assert hausdorff_distance(a, b, spacing=(0.5, 1, 1)) == 1.5


def test_hausdorff_empty_is_error():
    a = np.zeros((4, 4, 4), bool)
    b = a.copy()
    b[0, 0, 0] = True
    with pytest.raises(ValueError):
        hausdorff_distance(a, b)
    with pytest.raises(ValueError):
        hausdorff_distance(b, b, percentile=0)


@given(_blob_masks(), st.sampled_from([100.0, 95.0]),
       st.tuples(st.floats(0.3, 2.0), st.floats(0.3, 2.0), st.floats(0.3, 2.0)))
def test_hausdorff_matches_all_pairs(params, pct, spacing):
    a, b = _random_pair(params)
    got = hausdorff_distance(a, b, spacing, pct)
    assert abs(got - hausdorff_all_pairs(a, b, spacing, pct)) <= 1e-9


@given(_blob_masks(10))
def test_hausdorff_symmetric_and_zero_iff_same_boundary(params):
    a, b = _random_pair(params)
    assert hausdorff_distance(a, b) == hausdorff_distance(b, a)
    assert hausdorff_distance(a, a) == 0.0
    same_boundary = np.array_equal(boundary_loops(a), boundary_loops(b))
    assert (hausdorff_distance(a, b) == 0.0) == same_boundary


def test_compute_report_perfect_and_disjoint():
    t = np.zeros((6, 6, 6), bool)
    t[1:4, 1:4, 1:4] = True
    r = compute_report(t, t)
    assert (r.dice, r.recall, r.precision, r.hd_mm, r.hd95_mm) == (1.0, 1.0, 1.0, 0.0, 0.0)
    other = np.zeros_like(t)
    other[5, 5, 5] = True
    assert compute_report(other, t).dice == 0.0
    assert np.isnan(compute_report(np.zeros_like(t), t).hd_mm)


def test_report_serialization_round_trip(rng):
    p, t = rng.random((6, 6, 6)) < 0.3, rng.random((6, 6, 6)) < 0.3
    r = compute_report(p, t, (0.35, 0.35, 0.7))
    assert MetricsReport.from_text(r.to_text()) == r
    assert MetricsReport.from_json(r.to_json()) == r
    assert "hausdorff_variant=HD95" in r.to_text()
    assert r.hausdorff_mm == r.hd95_mm


def test_mean_of_identical_reports(rng):
    p, t = rng.random((6, 6, 6)) < 0.3, rng.random((6, 6, 6)) < 0.3
    r = compute_report(p, t)
    m = mean_report([r, r, r])
    assert (m.dice, m.recall, m.precision, m.hd_mm, m.hd95_mm) == (r.dice, r.recall, r.precision, r.hd_mm, r.hd95_mm)
    assert m.n_samples == 3 and m.tp == 3 * r.tp


# -- post-processing --------------------------------------------------------------------

def test_postprocess_solid_blob_fixed_point():
    m = np.zeros((10, 10, 10), bool)
    m[2:7, 3:8, 1:9] = True
    np.testing.assert_array_equal(postprocess(m), m)


def test_postprocess_removes_distant_voxel():
    m = np.zeros((12, 12, 12), bool)
    m[1:6, 1:6, 1:6] = True
    m[10, 10, 10] = True
    out = postprocess(m)
    assert not out[10, 10, 10]
    np.testing.assert_array_equal(out, m & ~(np.arange(12)[:, None, None] == 10))


def test_postprocess_closing_bridges_one_voxel_gap():
    m = np.zeros((9, 9, 13), bool)
    m[2:7, 2:7, 1:6] = True
    m[2:7, 2:7, 7:12] = True
    assert count_components(m) == 2
    closed = closing(m, 1)
    np.testing.assert_array_equal(closed, closing_loops(m, 1))
    assert closed[4, 4, 6]
    out = postprocess(m)
    assert count_components(out) == 1
    np.testing.assert_array_equal(out, closed)


def test_postprocess_empty():
    assert not postprocess(np.zeros((4, 4, 4), bool)).any()


@given(_blob_masks(12), st.integers(1, 2))
def test_postprocess_single_component_subset_of_closing(params, radius):
    m, _ = _random_pair(params)
    closed = closing_loops(m, radius)
    np.testing.assert_array_equal(closing(m, radius), closed)
    out = postprocess(m, radius)
    assert len(components_bfs(out)) <= 1
    assert not np.any(out & ~closed)
    sizes = components_bfs(closed)
    assert out.sum() == (max(sizes) if sizes else 0)


@given(_blob_masks(10))
def test_component_count_matches_bfs(params):
    m, _ = _random_pair(params)
    assert count_components(m) == len(components_bfs(m))
