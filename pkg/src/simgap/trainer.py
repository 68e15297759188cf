"""Training of per-coordinate gap networks against the sampled gap constraints.

For a fixed level ``eta`` the network is fitted by minimising

    sum_k c1*max(0, net(z_k) - eta + margin) + c2*max(0, gap_k - net(z_k) + margin)
        - c * log det M(w, Lambda)

with Adam.  An outer bisection searches the smallest level whose trained
network passes :func:`verify_scp` exactly.
"""
from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import lipnet
from .dataset import GapDataset, gap_targets
from .lipnet import LambdaParams, LipMLP

log = logging.getLogger(__name__)

NON_PSD_PENALTY = 1e6


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    c1: float = 1.0
    c2: float = 1.0
    c: float = 1e-3
    margin: float = 1e-4
    lr: float = 5e-3
    lr_decay: float = 0.0
    max_epochs: int = 300
    batch_size: int = 0  # 0 means full batch
    seed: int = 0
    bisect_tol: float = 1e-4
    bisect_max_iter: int = 30
    eta_init: float | None = None
    L1: float | tuple = 1.0
    hidden: tuple = (64,)
    rho_convention: str = "squared"

    def __post_init__(self):
        if not (self.c1 > 0 and self.c2 > 0 and self.c > 0):
            raise ValueError("c1, c2 and c must be positive")
        if self.margin < 0:
            raise ValueError("margin must be nonnegative")
        if not self.bisect_tol > 0:
            raise ValueError("bisection tolerance must be positive")
        self.hidden = tuple(int(h) for h in np.atleast_1d(self.hidden))

    def L1_for(self, i: int) -> float:
        L = np.atleast_1d(self.L1)
        return float(L[i] if L.size > 1 else L[0])


@dataclass
class TrainResult:
    coordinate: int
    eta: float
    net: LipMLP
    lam: LambdaParams
    verified: bool
    history: list = field(default_factory=list)
    trace: list = field(default_factory=list)
    wall_time: float = 0.0

    def summary(self) -> dict:
        return dict(coordinate=self.coordinate, eta=self.eta, verified=self.verified,
                    L1=self.net.L1, epochs=len(self.history), history=self.history,
                    bisection=self.trace)


def _params(net: LipMLP, theta):
    return net.weights + net.biases + list(theta)


def loss(net: LipMLP, lam: LambdaParams, ds: GapDataset | None, i: int, eta: float,
         cfg: TrainConfig, z=None, targets=None, cache=None):
    """Total loss and gradients.

    ``z`` and ``targets`` may be given instead of ``ds`` (mini-batches).
    Returns ``(value, parts, grads)`` where ``parts`` separates the hinge and
    certificate terms and ``grads`` is ``(dW, db, dlam)``.
    """
    if z is None:
        z = ds.inputs
        targets = gap_targets(ds, i)
    if cache is None:
        cache = lipnet._forward(net, z)
    gamma = cache[-1][:, 0]
    over = gamma - eta + cfg.margin
    under = targets - gamma + cfg.margin
    hinge = cfg.c1 * np.maximum(over, 0.0).sum() + cfg.c2 * np.maximum(under, 0.0).sum()
    upstream = cfg.c1 * (over > 0) - cfg.c2 * (under > 0)
    if np.any(upstream):
        dW, db = lipnet.backprop(net, z, upstream, cache)
    else:
        dW = [np.zeros_like(w) for w in net.weights]
        db = [np.zeros_like(b) for b in net.biases]
    try:
        logdet, gW, glam = lipnet.logdet_grad(net, lam)
        cert = -cfg.c * logdet
        scale = -cfg.c
        psd = True
    except np.linalg.LinAlgError:
        lam_min, gW, glam = lipnet.min_eig_grad(net, lam)
        cert = NON_PSD_PENALTY * max(-lam_min, 0.0)
        scale = -NON_PSD_PENALTY
        psd = False
    dW = [a + scale * b for a, b in zip(dW, gW)]
    dlam = [scale * g for g in glam]
    parts = dict(hinge=float(hinge), cert=float(cert), psd=psd)
    return float(hinge + cert), parts, (dW, db, dlam)


def verify_scp(net: LipMLP, lam: LambdaParams, ds: GapDataset, i: int, eta: float,
               L1: float | None = None) -> bool:
    """Exact check of both sampled constraints plus the certificate, with no tolerance."""
    gamma = net(ds.inputs)
    g = gap_targets(ds, i)
    if not (np.all(gamma <= eta) and np.all(g - gamma <= 0.0)):
        return False
    return lipnet.cert_check(lipnet.build_cert_matrix(net, lam, L1)).psd


class _Adam:
    def __init__(self, params, lr, b1=0.9, b2=0.999, eps=1e-12):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _softplus_inv(y):
    y = max(float(y), 1e-300)
    return y + np.log(-np.expm1(-y)) if y < 30 else y


def _fresh(ds, i, eta, cfg, rng):
    widths = [ds.n + ds.m, *cfg.hidden, 1]
    level = 0.5 * (float(gap_targets(ds, i).max()) + max(eta, 0.0))
    return lipnet.init_certified(widths, cfg.L1_for(i), rng, rho_convention=cfg.rho_convention,
                                 out_bias=_softplus_inv(level))


def train_fixed_eta(ds: GapDataset, i: int, eta: float, cfg: TrainConfig,
                    init: tuple[LipMLP, LambdaParams] | None = None) -> TrainResult:
    """First-order training at a fixed level; stops as soon as the exact check passes.

    Levels below the largest gap target are infeasible (the two constraints
    at that sample contradict each other) and return unverified at once.
    """
    t0 = time.perf_counter()
    rng = np.random.default_rng([cfg.seed, i])
    if init is None:
        net, lam = _fresh(ds, i, eta, cfg, rng)
    else:
        net, lam = init[0].copy(), init[1].copy()
        net.L1 = cfg.L1_for(i)
    z_all = ds.inputs
    g_all = gap_targets(ds, i)
    if eta < g_all.max():
        return TrainResult(i, float(eta), net, lam, False, [], wall_time=time.perf_counter() - t0)
    theta = [np.log(np.maximum(d, 1e-300)) for d in lam.diags]
    B = len(ds) if cfg.batch_size <= 0 else min(cfg.batch_size, len(ds))
    params = _params(net, theta)
    opt = _Adam(params, cfg.lr)
    history = []
    verified = False
    for epoch in range(cfg.max_epochs + 1):
        lam = LambdaParams.from_log(theta)
        full = lipnet._forward(net, z_all) if B == len(ds) else None
        gamma = full[-1][:, 0] if full is not None else net(z_all)
        if (np.all(gamma <= eta) and np.all(g_all - gamma <= 0.0)
                and lipnet.cert_check(lipnet.build_cert_matrix(net, lam)).psd):
            verified = True
            break
        if epoch == cfg.max_epochs:
            break
        lr = cfg.lr / (1.0 + cfg.lr_decay * epoch)
        order = rng.permutation(len(ds)) if B < len(ds) else None
        total = hinge = cert = 0.0
        for start in range(0, len(ds), B):
            sl = slice(start, start + B) if order is None else order[start:start + B]
            lam = LambdaParams.from_log(theta)
            value, parts, (dW, db, dlam) = loss(net, lam, None, i, eta, cfg, z=z_all[sl],
                                                targets=g_all[sl], cache=full)
            dtheta = [g * d for g, d in zip(dlam, lam.diags)]
            opt.step(params, dW + db + dtheta, lr)
            total += value
            hinge += parts["hinge"]
            cert = parts["cert"]
        history.append(dict(epoch=epoch, loss=total, hinge=hinge, cert=cert))
    lam = LambdaParams.from_log(theta)
    return TrainResult(i, float(eta), net, lam, verified, history,
                       wall_time=time.perf_counter() - t0)


def bisect_eta(ds: GapDataset, i: int, cfg: TrainConfig) -> TrainResult:
    """Smallest verified level within ``cfg.bisect_tol``, warm-starting from the last success."""
    t0 = time.perf_counter()
    gmax = float(gap_targets(ds, i).max())
    hi = cfg.eta_init if cfg.eta_init is not None else (3.0 * gmax if gmax > 0 else cfg.bisect_tol)
    lo = 0.0
    trace = []
    best = None
    for attempt in range(9):
        res = train_fixed_eta(ds, i, hi, cfg)
        trace.append(dict(eta=hi, verified=res.verified, epochs=len(res.history)))
        if res.verified:
            best = res
            break
        lo = hi
        hi *= 2.0
    if best is None:
        last = res.history[-1] if res.history else {}
        raise TrainingError(f"coordinate {i}: no verified network up to eta={hi / 2:g}; last losses {last}")
    it = 0
    while hi - lo > cfg.bisect_tol and it < cfg.bisect_max_iter:
        it += 1
        mid = 0.5 * (lo + hi)
        res = train_fixed_eta(ds, i, mid, cfg, init=(best.net, best.lam))
        trace.append(dict(eta=mid, verified=res.verified, epochs=len(res.history)))
        if res.verified:
            hi, best = mid, res
        else:
            lo = mid
        log.debug("coordinate %d: eta=%g verified=%s", i, mid, res.verified)
    best.trace = trace
    best.wall_time = time.perf_counter() - t0
    return best


def train_all(ds: GapDataset, cfg: TrainConfig, workers: int = 1) -> list[TrainResult]:
    """Independent bisection per coordinate, optionally on a thread pool."""
    if workers <= 1:
        return [bisect_eta(ds, i, cfg) for i in range(ds.n)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda i: bisect_eta(ds, i, cfg), range(ds.n)))


def config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["hidden"] = list(cfg.hidden)
    d["L1"] = list(np.atleast_1d(cfg.L1).astype(float))
    return d
