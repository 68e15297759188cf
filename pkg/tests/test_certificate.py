import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from simgap import certificate as cm
from simgap import dataset, lipestimate, trainer
from simgap.covering import build_cover
from simgap.dynamics import DomainError, make_pair
from simgap.lipnet import LipMLP


def zero_net(width=3):
    return LipMLP([np.zeros((1, width))], [np.zeros(1)], output="identity", L1=1.0)


def flat_cert(L2x=1.0, eps_x=0.1, n=2):
    pair = make_pair("pendulum")
    return cm.GapCertificate([zero_net() for _ in range(n)], np.zeros(n), np.full(n, L2x), np.zeros(n),
                             eps_x, 0.0, np.zeros(n), pair.state_box, pair.input_box)


@pytest.fixture(scope="module")
def small():
    pair = make_pair("mecanum")
    sc, ic = build_cover(pair.state_box, 0.5), build_cover(pair.input_box, 0.3)
    ds = dataset.generate(pair, sc, ic)
    cfg = trainer.TrainConfig(L1=0.05, hidden=(8,), bisect_tol=1e-3)
    res = trainer.train_all(ds, cfg)
    est = dict(L2x=[lipestimate.estimate_L2x(pair, i, n_anchors=4, n_pairs=5000) for i in range(2)],
               L2u=[lipestimate.estimate_L2u(pair, i, n_anchors=4, n_pairs=5000) for i in range(2)])
    return pair, ds, res, cm.assemble(res, est, sc, ic)


def test_inflation_arithmetic():
    oracle = 10 * math.sqrt(0.01 ** 2 + 0.014 ** 2) + 1.03 * 0.01 + 1.03 * 0.014
    assert cm.inflation_constant(10, 1.03, 1.03, 0.01, 0.014) == pytest.approx(oracle, abs=1e-15)
    assert oracle == pytest.approx(0.196767, abs=1e-6)
    assert cm.inflation_constant(0, 0, 0, 0.3, 0.2) == 0.0
    assert cm.inflation_constant(5, 2, 1, 0.0, 0.0) == 0.0


def test_flat_bound_everywhere(rng):
    cert = flat_cert()
    x = cert.state_box.sample(rng, 100)
    u = cert.input_box.sample(rng, 100)
    np.testing.assert_allclose(cm.gap_bound(cert, x, u), 0.1, rtol=0, atol=1e-17)
    assert cm.gap_bound(cert, x[0], u[0]).shape == (2,)


def test_out_of_box_query():
    with pytest.raises(DomainError):
        cm.gap_bound(flat_cert(), [0.3, 0.0], [0.0])


def test_rejects_negative_constants():
    with pytest.raises(DomainError):
        flat_cert(L2x=-1.0)


def test_bound_dominates_network_and_targets(small, rng):
    pair, ds, res, cert = small
    b = cm.gap_bound(cert, ds.x, ds.u)
    net = cm.network_values(cert, ds.x, ds.u)
    assert np.all(b >= net)
    for i in range(2):
        assert np.all(b[:, i] >= dataset.gap_targets(ds, i))


def test_assemble_refuses_unverified(small):
    pair, ds, res, _ = small
    bad = [res[0], trainer.TrainResult(1, res[1].eta, res[1].net, res[1].lam, False)]
    est = dict(L2x=[0.0, 0.0], L2u=[0.0, 0.0])
    with pytest.raises(cm.CertificateError, match="coordinate 1"):
        cm.assemble(bad, est, ds.state_cover, ds.input_cover)
    with pytest.raises(cm.CertificateError):
        cm.assemble(res[:1], est, ds.state_cover, ds.input_cover)


def test_validate_sound_and_negative_control(small):
    pair, ds, res, cert = small
    rep = cm.validate(cert, pair, n_probe=20_000, seed=3)
    assert rep.violations == 0 and rep.min_margin >= 0 and rep.probes == 20_000
    grid = cm.validate(cert, pair, n_probe=20_000, mode="grid")
    assert grid.violations == 0
    assert cm.validate(cm.without_inflation(cert), pair, n_probe=20_000, seed=3).violations > 0


def test_validate_identical_pair():
    same = make_pair("pendulum", damping=0.0, torque_gain=1.0)
    cert = flat_cert(L2x=0.0)
    rep = cm.validate(cert, same, n_probe=1000)
    assert rep.violations == 0 and rep.min_margin >= 0
    with pytest.raises(DomainError):
        cm.validate(cert, same, n_probe=0)


def test_roundtrip_bitwise(tmp_path, small, rng):
    pair, ds, res, cert = small
    cm.save(cert, tmp_path / "certificate.bin")
    back = cm.load(tmp_path / "certificate.bin")
    x = pair.state_box.sample(rng, 500)
    u = pair.input_box.sample(rng, 500)
    assert cm.gap_bound(back, x, u).tobytes() == cm.gap_bound(cert, x, u).tobytes()
    assert back.L_const.tobytes() == cert.L_const.tobytes()
    assert back.eta.tobytes() == cert.eta.tobytes()


@settings(max_examples=50, deadline=None)
@given(field=st.sampled_from(["L1", "L2x", "L2u", "eps_x", "eps_u"]), grow=st.floats(0.0, 3.0),
       seed=st.integers(0, 1000))
def test_bound_monotone_in_constants(small, field, grow, seed):
    pair, ds, res, cert = small
    rng = np.random.default_rng(seed)
    x = pair.state_box.sample(rng, 64)
    u = pair.input_box.sample(rng, 64)
    value = getattr(cert, field)
    bigger = cert.replace(**{field: value + grow if np.isscalar(value) else value + grow})
    assert np.all(cm.gap_bound(bigger, x, u) >= cm.gap_bound(cert, x, u))
