import numpy as np
import pytest

from simgap import dataset
from simgap.covering import CoverGrid, build_cover
from simgap.dynamics import Box, DomainError, make_pair


@pytest.fixture
def mecanum_ds():
    pair = make_pair("mecanum")
    return dataset.generate(pair, build_cover(pair.state_box, 0.5), build_cover(pair.input_box, 0.5))


def test_count_and_ordering():
    pair = make_pair("mecanum")
    sc = CoverGrid(pair.state_box, 1.5, (2, 1))
    ic = CoverGrid(pair.input_box, 1.5, (3, 1))
    ds = dataset.generate(pair, sc, ic)
    assert len(ds) == 6
    # state-major: the input index varies fastest
    np.testing.assert_array_equal(ds.x, np.repeat(sc.centers, 3, axis=0))
    np.testing.assert_array_equal(ds.u, np.tile(ic.centers, (2, 1)))


def test_mecanum_sample_values():
    pair = make_pair("mecanum")
    sc = CoverGrid(pair.state_box, 1.5, (3, 3))     # centers 0.5, 1.5, 2.5
    ic = CoverGrid(pair.input_box, 1.0, (3, 1))     # u1 in {-2/3, 0, 2/3}, u2 = 0
    ds = dataset.generate(pair, sc, ic)
    f = pair.nominal.step(ds.x, ds.u)
    np.testing.assert_array_equal(ds.f_nom, f)
    np.testing.assert_array_equal(ds.f_hat, pair.surrogate.step(ds.x, ds.u))


def test_gap_target_example():
    pair = make_pair("mecanum")
    x, u = np.array([[1.0, 1.0]]), np.array([[1.0, 0.0]])
    np.testing.assert_allclose(pair.nominal.step(x, u), [[1.3, 1.0]], atol=1e-15)
    np.testing.assert_allclose(pair.surrogate.step(x, u), [[1.276, 1.009]], atol=1e-15)
    np.testing.assert_allclose(pair.gap(x, u)[0, 0], 0.024, atol=1e-15)


def test_gap_targets_bounds_and_identity(mecanum_ds):
    for i in range(2):
        g = dataset.gap_targets(mecanum_ds, i)
        assert g.shape == (len(mecanum_ds),) and np.all(g >= 0)
    with pytest.raises(DomainError):
        dataset.gap_targets(mecanum_ds, 2)
    same = make_pair("mecanum", gain_x=1.0, gain_y=1.0, slip=0.0)
    ds = dataset.generate(same, mecanum_ds.state_cover, mecanum_ds.input_cover)
    assert np.all(dataset.gap_targets(ds, 0) == 0) and np.all(ds.f_hat == ds.f_nom)


def test_box_mismatch():
    pair = make_pair("mecanum")
    with pytest.raises(DomainError):
        dataset.generate(pair, build_cover(Box([0, 0], [1, 1]), 0.5), build_cover(pair.input_box, 0.5))


def test_regeneration_bitwise(mecanum_ds):
    again = dataset.generate(make_pair("mecanum"), mecanum_ds.state_cover, mecanum_ds.input_cover, chunk=3)
    for a in ("x", "u", "f_hat", "f_nom"):
        assert getattr(again, a).tobytes() == getattr(mecanum_ds, a).tobytes()


def test_save_load_roundtrip(tmp_path, mecanum_ds):
    dataset.save(mecanum_ds, tmp_path, seed=7)
    back = dataset.load(tmp_path)
    for a in ("x", "u", "f_hat", "f_nom"):
        assert getattr(back, a).tobytes() == getattr(mecanum_ds, a).tobytes()
    assert back.pair_id == mecanum_ds.pair_id
    assert back.state_cover.per_dim_counts == mecanum_ds.state_cover.per_dim_counts
    head = (tmp_path / "dataset.csv").read_text().splitlines()[0]
    assert head == "x1,x2,u1,u2,f_hat1,f_hat2,f_nom1,f_nom2"


def test_samples_view(mecanum_ds):
    s = mecanum_ds.samples[5]
    np.testing.assert_array_equal(s.x_r, mecanum_ds.x[5])
    np.testing.assert_array_equal(s.f_hat, mecanum_ds.f_hat[5])
