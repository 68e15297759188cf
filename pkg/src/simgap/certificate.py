"""Continuum-valid gap bounds: trained network plus a constant covering the unseen points.

For every coordinate ``i`` the bound is ``net_i(x, u) + L_i`` with

    L_i = L1_i * sqrt(eps_x**2 + eps_u**2) + L2x_i * eps_x + L2u_i * eps_u

where ``L1_i`` is the certified network Lipschitz bound, ``L2x_i``/``L2u_i``
the gap's Lipschitz constants and ``eps_x``/``eps_u`` the cover radii.
"""
from __future__ import annotations

import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import lipnet
from .covering import CoverGrid
from .dynamics import Box, DomainError, SystemPair


class CertificateError(RuntimeError):
    pass


def inflation_constant(L1, L2x, L2u, eps_x, eps_u):
    """Additive constant lifting sampled constraint satisfaction to the whole box."""
    L1, L2x, L2u = (np.asarray(v, dtype=float) for v in (L1, L2x, L2u))
    return L1 * np.sqrt(eps_x ** 2 + eps_u ** 2) + L2x * eps_x + L2u * eps_u


@dataclass(eq=False)
class GapCertificate:
    nets: list
    L1: np.ndarray
    L2x: np.ndarray
    L2u: np.ndarray
    eps_x: float
    eps_u: float
    eta: np.ndarray
    state_box: Box
    input_box: Box
    lams: list | None = None

    def __post_init__(self):
        self.L1, self.L2x, self.L2u, self.eta = (np.asarray(v, dtype=float).reshape(-1)
                                                 for v in (self.L1, self.L2x, self.L2u, self.eta))
        n = len(self.nets)
        if not all(a.size == n for a in (self.L1, self.L2x, self.L2u, self.eta)):
            raise DomainError("per-coordinate arrays must have one entry per network")
        if min(self.eps_x, self.eps_u) < 0 or any(np.any(a < 0) for a in (self.L1, self.L2x, self.L2u)):
            raise DomainError("constants and radii must be nonnegative")

    @property
    def n(self) -> int:
        return len(self.nets)

    @property
    def L_const(self) -> np.ndarray:
        return inflation_constant(self.L1, self.L2x, self.L2u, self.eps_x, self.eps_u)

    def replace(self, **kw) -> "GapCertificate":
        fields = dict(nets=self.nets, L1=self.L1, L2x=self.L2x, L2u=self.L2u, eps_x=self.eps_x,
                      eps_u=self.eps_u, eta=self.eta, state_box=self.state_box,
                      input_box=self.input_box, lams=self.lams)
        fields.update(kw)
        return GapCertificate(**fields)


def without_inflation(cert: GapCertificate) -> GapCertificate:
    """Same networks with every Lipschitz constant zeroed, so the additive constant is 0."""
    z = np.zeros(cert.n)
    return cert.replace(L1=z, L2x=z, L2u=z)


def assemble(train_results, lip_estimates, state_cover: CoverGrid, input_cover: CoverGrid) -> GapCertificate:
    """Build the certificate from verified training results and Lipschitz estimates.

    ``lip_estimates`` maps ``"L2x"`` and ``"L2u"`` to per-coordinate sequences
    of floats or :class:`~simgap.lipestimate.LipEstimate`.
    """
    results = sorted(train_results, key=lambda r: r.coordinate)
    if [r.coordinate for r in results] != list(range(len(results))):
        raise CertificateError("training results must cover every coordinate exactly once")
    for r in results:
        if not r.verified:
            raise CertificateError(f"coordinate {r.coordinate} is not verified")

    def values(key):
        return np.array([getattr(e, "value", e) for e in lip_estimates[key]], dtype=float)

    L2x, L2u = values("L2x"), values("L2u")
    if L2x.size != len(results) or L2u.size != len(results):
        raise CertificateError("need one Lipschitz estimate per coordinate")
    return GapCertificate(
        nets=[r.net for r in results], L1=[r.net.L1 for r in results], L2x=L2x, L2u=L2u,
        eps_x=state_cover.epsilon, eps_u=input_cover.epsilon, eta=[r.eta for r in results],
        state_box=state_cover.box, input_box=input_cover.box, lams=[r.lam for r in results])


def network_values(cert: GapCertificate, x, u) -> np.ndarray:
    z = np.concatenate([np.atleast_2d(x), np.atleast_2d(u)], axis=1)
    return np.stack([net(z) for net in cert.nets], axis=-1)


def gap_bound(cert: GapCertificate, x, u, check: bool = True) -> np.ndarray:
    """Per-coordinate bound ``net_i(x, u) + L_i``; ``(n,)`` for one point, ``(B, n)`` for batches."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    single = x.ndim == 1
    xs, us = np.atleast_2d(x), np.atleast_2d(u)
    if check and not (np.all(cert.state_box.contains(xs)) and np.all(cert.input_box.contains(us))):
        raise DomainError("gap bound queried outside X x U")
    out = network_values(cert, xs, us) + cert.L_const
    return out[0] if single else out


class ValidationReport(NamedTuple):
    violations: int
    max_margin: float
    min_margin: float
    probes: int
    per_coordinate: list

    def to_dict(self) -> dict:
        return dict(violations=self.violations, max_margin=self.max_margin,
                    min_margin=self.min_margin, probes=self.probes,
                    per_coordinate=self.per_coordinate)


def validate(cert: GapCertificate, pair: SystemPair, n_probe: int = 100_000, seed: int = 0,
             mode: str = "random", chunk: int = 50_000) -> ValidationReport:
    """Compare the bound with the true gap on fresh probes.

    ``mode="random"`` draws uniform probes; ``mode="grid"`` uses the centers
    of a cover product with roughly ``n_probe`` points, for deterministic audits.
    Violations count (point, coordinate) pairs where the bound is below the gap.
    """
    if n_probe < 1:
        raise DomainError("n_probe must be at least 1")
    if mode == "random":
        rng = np.random.default_rng(seed)
        xs = cert.state_box.sample(rng, n_probe)
        us = cert.input_box.sample(rng, n_probe)
    elif mode == "grid":
        dx, du = cert.state_box.dim, cert.input_box.dim
        per = max(2, int(round(n_probe ** (1.0 / (dx + du)))))
        sc = _cover_with_counts(cert.state_box, per)
        ic = _cover_with_counts(cert.input_box, per)
        xs = np.repeat(sc, len(ic), axis=0)
        us = np.tile(ic, (len(sc), 1))
    else:
        raise DomainError(f"unknown validation mode {mode!r}")
    viol = np.zeros(cert.n, dtype=np.int64)
    lo, hi = np.inf, -np.inf
    for s in range(0, xs.shape[0], chunk):
        x, u = xs[s:s + chunk], us[s:s + chunk]
        margin = gap_bound(cert, x, u) - pair.gap(x, u)
        viol += np.sum(margin < 0, axis=0)
        lo = min(lo, float(margin.min()))
        hi = max(hi, float(margin.max()))
    return ValidationReport(int(viol.sum()), hi, lo, int(xs.shape[0]), viol.tolist())


def _cover_with_counts(box: Box, per: int) -> np.ndarray:
    axes = [box.lower[d] + (np.arange(per) + 0.5) * box.widths[d] / per for d in range(box.dim)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in mesh], axis=-1)


# -- serialization -----------------------------------------------------------------

def save(cert: GapCertificate, path) -> None:
    """Write an ``npz`` archive (self-describing keys) to ``path`` exactly as named."""
    meta = dict(format="simgap-certificate 1", n=cert.n, eps_x=cert.eps_x, eps_u=cert.eps_u)
    arrays = dict(meta=np.array(json.dumps(meta)), L1=cert.L1, L2x=cert.L2x, L2u=cert.L2u,
                  eta=cert.eta, L_const=cert.L_const,
                  state_lower=cert.state_box.lower, state_upper=cert.state_box.upper,
                  input_lower=cert.input_box.lower, input_upper=cert.input_box.upper)
    for i, net in enumerate(cert.nets):
        lam = cert.lams[i] if cert.lams else None
        arrays[f"net{i}"] = np.array(lipnet.dumps_net(net, lam))
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


def load(path) -> GapCertificate:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        nets, lams = [], []
        for i in range(meta["n"]):
            net, lam = lipnet.loads_net(str(z[f"net{i}"]))
            nets.append(net)
            lams.append(lam)
        return GapCertificate(nets, z["L1"], z["L2x"], z["L2u"], float(meta["eps_x"]),
                              float(meta["eps_u"]), z["eta"], Box(z["state_lower"], z["state_upper"]),
                              Box(z["input_lower"], z["input_upper"]),
                              lams if all(lam is not None for lam in lams) else None)
