import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from simgap.covering import CoverSizeError, build_cover, nearest_center, nearest_centers
from simgap.dynamics import Box, DomainError


def brute_nearest(centers, p):
    d = np.linalg.norm(centers - p, axis=1)
    k = int(np.argmin(d))  # argmin returns the first minimiser, i.e. the lowest index
    return k, float(d[k])


def test_unit_interval_quarter():
    g = build_cover(Box([0.0], [1.0]), 0.25)
    np.testing.assert_allclose(g.centers[:, 0], [0.25, 0.75])
    np.testing.assert_allclose(g.spacing, [0.5])


def test_unit_square_quarter():
    g = build_cover(Box([0.0, 0.0], [1.0, 1.0]), 0.25)
    assert g.per_dim_counts == (3, 3) and len(g) == 9
    assert np.all(g.spacing <= 2 * 0.25 / np.sqrt(2))


def test_single_center():
    g = build_cover(Box([-1.0], [1.0]), 1.0)
    np.testing.assert_array_equal(g.centers, [[0.0]])


def test_nearest_center_examples():
    g = build_cover(Box([0.0], [1.0]), 0.25)
    k, d = nearest_center(g, [0.3])
    assert k == 0 and d == pytest.approx(0.05)
    assert nearest_center(g, [0.75]) == (1, 0.0)
    assert nearest_center(g, [0.5])[0] == 0


def test_nearest_center_outside_box():
    g = build_cover(Box([0.0], [1.0]), 0.25)
    with pytest.raises(DomainError):
        nearest_center(g, [1.01])


def test_size_cap_names_count():
    with pytest.raises(CoverSizeError, match="needs 1000000 centers"):
        build_cover(Box([0.0, 0.0], [1.0, 1.0]), 0.0005 * np.sqrt(2), max_centers=10)


def test_rejects_nonpositive_epsilon():
    with pytest.raises(DomainError):
        build_cover(Box([0.0], [1.0]), 0.0)


def test_centers_inside_and_count(rng):
    g = build_cover(Box([0.0, -1.0, 2.0], [3.0, 1.0, 2.5]), 0.2)
    c = g.centers
    assert c.shape == (int(np.prod(g.per_dim_counts)), 3)
    assert g.box.contains(c).all()
    assert g.half_diagonal <= 0.2


def test_agrees_with_linear_scan(rng):
    g = build_cover(Box([-0.2, -0.25], [0.2, 0.25]), 0.01)
    assert len(g) <= 10_000
    pts = g.box.sample(rng, 500)
    # include exact ties: midpoints between adjacent centers
    c = g.centers
    pts = np.vstack([pts, 0.5 * (c[:-1:7] + c[1::7])])
    idx, dist = nearest_centers(g, pts)
    for p, k, d in zip(pts, idx, dist):
        kb, db = brute_nearest(c, p)
        assert d == pytest.approx(db, abs=1e-15)
        assert k == kb or abs(np.linalg.norm(c[k] - p) - db) <= 1e-15


def test_csv(tmp_path):
    g = build_cover(Box([0.0, 0.0], [1.0, 1.0]), 0.25)
    g.to_csv(tmp_path / "c.csv", ["x1", "x2"])
    back = np.loadtxt(tmp_path / "c.csv", delimiter=",", skiprows=1)
    np.testing.assert_array_equal(back, g.centers)


@settings(max_examples=40, deadline=None)
@given(lo=st.lists(st.floats(-5, 5), min_size=1, max_size=3),
       widths=st.lists(st.floats(0.01, 4), min_size=3, max_size=3),
       eps=st.floats(0.05, 2.0), seed=st.integers(0, 2**32 - 1))
def test_cover_property(lo, widths, eps, seed):
    box = Box(lo, np.asarray(lo) + widths[:len(lo)])
    g = build_cover(box, eps)
    pts = box.sample(np.random.default_rng(seed), 2000)
    pts = np.vstack([pts, box.lower, box.upper])
    _, d = nearest_centers(g, pts)
    assert np.all(d <= eps)
    assert np.all(g.spacing <= 2 * eps / np.sqrt(box.dim) * (1 + 1e-12))
