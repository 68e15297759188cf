"""Small feed-forward networks with a semidefinite Lipschitz certificate.

The network maps the concatenated ``(x, u)`` vector through ``tanh`` hidden
layers to a scalar output passed through ``softplus`` (hence nonnegative).
Its Lipschitz constant is certified by positive definiteness of the block
tridiagonal matrix

    [ rho*I          -W0' L1                                   ]
    [ -L1 W0          2 L1        -W1' L2                       ]
    [                 -L2 W1       2 L2     ...                 ]
    [                              ...      2 Ll      -Wl'      ]
    [                                       -Wl        I        ]

where ``Lj`` are nonnegative diagonal multipliers.  With ``rho = L1**2`` the
bound is ``L1`` for any slope-restricted (``[0, 1]``) activations.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .dynamics import Box, DomainError

RHO_CONVENTIONS = ("squared", "linear")


def _softplus(v):
    return np.logaddexp(0.0, v)


def _sigmoid(v):
    return 0.5 * (1.0 + np.tanh(0.5 * v))


ACTIVATIONS = {
    # name: (value, derivative as a function of the pre-activation)
    "tanh": (np.tanh, lambda v: 1.0 - np.tanh(v) ** 2),
    "softplus": (_softplus, _sigmoid),
    "identity": (lambda v: v, np.ones_like),
}


@dataclass(eq=False)
class LipMLP:
    """Weights follow the ``(out, in)`` convention: layer ``j`` computes ``W[j] @ a + b[j]``."""

    weights: list
    biases: list
    hidden: str = "tanh"
    output: str = "softplus"
    L1: float | None = None
    rho_convention: str = "squared"

    def __post_init__(self):
        self.weights = [np.array(w, dtype=float, ndmin=2) for w in self.weights]
        self.biases = [np.array(b, dtype=float, ndmin=1) for b in self.biases]
        if len(self.weights) != len(self.biases) or not self.weights:
            raise DomainError("need one bias per weight matrix and at least one layer")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape[0] != b.shape[0]:
                raise DomainError(f"layer {k}: bias length {b.shape[0]} != rows {w.shape[0]}")
            if k and w.shape[1] != self.weights[k - 1].shape[0]:
                raise DomainError(f"layer {k} input width does not match layer {k - 1}")
        if self.weights[-1].shape[0] != 1:
            raise DomainError("output width must be 1")
        for a in (self.hidden, self.output):
            if a not in ACTIVATIONS:
                raise DomainError(f"unknown activation {a!r}")
        if self.rho_convention not in RHO_CONVENTIONS:
            raise DomainError(f"rho convention must be one of {RHO_CONVENTIONS}")

    @property
    def layer_widths(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def n_hidden(self) -> int:
        return len(self.weights) - 1

    @property
    def rho(self) -> float:
        if self.L1 is None:
            raise DomainError("network carries no Lipschitz target")
        return self.L1 ** 2 if self.rho_convention == "squared" else self.L1

    def copy(self) -> "LipMLP":
        return LipMLP([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                      self.hidden, self.output, self.L1, self.rho_convention)

    def __call__(self, z) -> np.ndarray:
        """Evaluate on concatenated inputs of shape ``(B, n+m)``."""
        return _forward(self, z)[-1][:, 0]


@dataclass(eq=False)
class LambdaParams:
    diags: list = field(default_factory=list)

    def __post_init__(self):
        self.diags = [np.array(d, dtype=float, ndmin=1) for d in self.diags]
        if any(np.any(d < 0) for d in self.diags):
            raise DomainError("multiplier entries must be nonnegative")

    @classmethod
    def from_log(cls, thetas) -> "LambdaParams":
        return cls([np.exp(t) for t in thetas])

    def copy(self) -> "LambdaParams":
        return LambdaParams([d.copy() for d in self.diags])


class LipCertMatrix(NamedTuple):
    matrix: np.ndarray
    block_sizes: tuple
    rho: float


class CertCheck(NamedTuple):
    psd: bool
    logdet: float


def _check_input(net: LipMLP, z) -> np.ndarray:
    z = np.atleast_2d(np.asarray(z, dtype=float))
    if z.shape[1] != net.layer_widths[0]:
        raise DomainError(f"network expects inputs of width {net.layer_widths[0]}, got {z.shape[1]}")
    return z


def _forward(net: LipMLP, z):
    """Return the list of pre-activations followed by the final output column."""
    a = _check_input(net, z)
    pre = []
    act_h = ACTIVATIONS[net.hidden][0]
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        v = a @ w.T + b
        pre.append(v)
        a = act_h(v) if k < net.n_hidden else ACTIVATIONS[net.output][0](v)
    return pre + [a]


def forward(net: LipMLP, x, u) -> np.ndarray | float:
    """Network output at ``(x, u)``; scalar for a single point, ``(B,)`` for batches."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    single = x.ndim == 1
    z = np.concatenate([np.atleast_2d(x), np.atleast_2d(u)], axis=1)
    out = net(z)
    return float(out[0]) if single else out


def backprop(net: LipMLP, z, upstream, cache=None) -> tuple[list, list]:
    """Gradients of ``sum_b upstream[b] * net(z[b])`` with respect to all weights and biases.

    ``cache`` may carry the result of a previous ``_forward(net, z)``.
    """
    z = _check_input(net, z)
    g = np.asarray(upstream, dtype=float).reshape(-1)
    if g.shape[0] != z.shape[0] or z.shape[0] == 0:
        raise DomainError("upstream gradient length must match a nonempty batch")
    if cache is None:
        cache = _forward(net, z)
    pre = cache[:-1]
    acts = [z] + [ACTIVATIONS[net.hidden][0](v) for v in pre[:-1]]
    L = len(net.weights)
    dW = [None] * L
    db = [None] * L
    delta = g[:, None] * ACTIVATIONS[net.output][1](pre[-1])
    for k in range(L - 1, -1, -1):
        dW[k] = delta.T @ acts[k]
        db[k] = delta.sum(axis=0)
        if k:
            delta = (delta @ net.weights[k]) * ACTIVATIONS[net.hidden][1](pre[k - 1])
    return dW, db


def input_gradient(net: LipMLP, z) -> np.ndarray:
    """d net / d z per sample, shape ``(B, n+m)``."""
    z = _check_input(net, z)
    cache = _forward(net, z)
    pre = cache[:-1]
    delta = ACTIVATIONS[net.output][1](pre[-1])
    for k in range(len(net.weights) - 1, 0, -1):
        delta = (delta @ net.weights[k]) * ACTIVATIONS[net.hidden][1](pre[k - 1])
    return delta @ net.weights[0]


def _blocks(net: LipMLP, lam: LambdaParams):
    widths = net.layer_widths
    if len(lam.diags) != net.n_hidden or any(
            d.shape[0] != h for d, h in zip(lam.diags, widths[1:-1])):
        raise DomainError(f"multipliers {[d.shape[0] for d in lam.diags]} do not match hidden widths {widths[1:-1]}")
    sizes = tuple(widths)
    offs = np.concatenate([[0], np.cumsum(sizes)])
    return sizes, offs


def build_cert_matrix(net: LipMLP, lam: LambdaParams, L1: float | None = None,
                      rho_convention: str | None = None) -> LipCertMatrix:
    """Assemble the certificate matrix for Lipschitz bound ``L1`` (defaults to ``net.L1``)."""
    L1 = net.L1 if L1 is None else L1
    conv = rho_convention or net.rho_convention
    if L1 is None or not L1 > 0:
        raise DomainError(f"Lipschitz bound must be positive, got {L1}")
    rho = L1 ** 2 if conv == "squared" else L1
    sizes, offs = _blocks(net, lam)
    M = np.zeros((offs[-1], offs[-1]))
    s = lambda j: slice(offs[j], offs[j + 1])  # noqa: E731
    M[s(0), s(0)] = rho * np.eye(sizes[0])
    nh = net.n_hidden
    for j in range(1, nh + 1):
        d = lam.diags[j - 1]
        M[s(j), s(j)] = np.diag(2.0 * d)
        off = -d[:, None] * net.weights[j - 1]
        M[s(j), s(j - 1)] = off
        M[s(j - 1), s(j)] = off.T
    M[s(nh + 1), s(nh + 1)] = np.eye(sizes[-1])
    M[s(nh + 1), s(nh)] = -net.weights[nh]
    M[s(nh), s(nh + 1)] = -net.weights[nh].T
    return LipCertMatrix(M, sizes, rho)


def cert_check(matrix) -> CertCheck:
    """Cholesky test; success certifies positive definiteness and yields log det."""
    M = matrix.matrix if isinstance(matrix, LipCertMatrix) else np.asarray(matrix, dtype=float)
    try:
        C = np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        return CertCheck(False, -np.inf)
    return CertCheck(True, float(2.0 * np.sum(np.log(np.diag(C)))))


def cert_matrix_grad(net: LipMLP, lam: LambdaParams, G: np.ndarray) -> tuple[list, list]:
    """Gradient of ``tr(G M)`` for symmetric ``G`` with respect to the weights and multipliers.

    With ``G = M^{-1}`` this is the gradient of ``log det M``; with ``G = v v'``
    it is the gradient of the Rayleigh quotient ``v' M v``.
    """
    sizes, offs = _blocks(net, lam)
    s = lambda j: slice(offs[j], offs[j + 1])  # noqa: E731
    nh = net.n_hidden
    dW = [np.zeros_like(w) for w in net.weights]
    dlam = []
    for j in range(1, nh + 1):
        d = lam.diags[j - 1]
        Gj = G[s(j), s(j - 1)]
        dW[j - 1] = -2.0 * d[:, None] * Gj
        dlam.append(2.0 * np.diag(G[s(j), s(j)]) - 2.0 * np.sum(net.weights[j - 1] * Gj, axis=1))
    dW[nh] = -2.0 * G[s(nh + 1), s(nh)]
    return dW, dlam


def logdet_grad(net: LipMLP, lam: LambdaParams, L1: float | None = None) -> tuple[float, list, list]:
    """``log det M`` and its gradients; raises ``LinAlgError`` if ``M`` is not positive definite."""
    cm = build_cert_matrix(net, lam, L1)
    C = np.linalg.cholesky(cm.matrix)
    Cinv = np.linalg.inv(C)
    G = Cinv.T @ Cinv
    dW, dlam = cert_matrix_grad(net, lam, G)
    return float(2.0 * np.sum(np.log(np.diag(C)))), dW, dlam


def min_eig_grad(net: LipMLP, lam: LambdaParams, L1: float | None = None) -> tuple[float, list, list]:
    """Smallest eigenvalue of ``M`` and its gradient (used when the factorization fails)."""
    cm = build_cert_matrix(net, lam, L1)
    vals, vecs = np.linalg.eigh(cm.matrix)
    v = vecs[:, 0]
    dW, dlam = cert_matrix_grad(net, lam, np.outer(v, v))
    return float(vals[0]), dW, dlam


def empirical_lipschitz(net: LipMLP, state_box: Box, input_box: Box, trials: int = 10_000,
                        seed: int = 0) -> float:
    """Largest observed slope ``|net(p) - net(q)| / ||p - q||`` over random pairs in X x U.

    Half of the pairs are independent uniform draws, the other half are
    close pairs (relative offset 1e-3), which probe local slopes.
    """
    if trials < 1:
        raise DomainError("trials must be at least 1")
    rng = np.random.default_rng(seed)
    lo = np.concatenate([state_box.lower, input_box.lower])
    hi = np.concatenate([state_box.upper, input_box.upper])
    best = 0.0
    done = 0
    while done < trials:
        k = min(50_000, trials - done)
        p = rng.uniform(lo, hi, size=(k, lo.size))
        q = rng.uniform(lo, hi, size=(k, lo.size))
        near = np.arange(k) % 2 == 1
        q[near] = np.clip(p[near] + 1e-3 * (hi - lo) * rng.standard_normal((near.sum(), lo.size)), lo, hi)
        dist = np.linalg.norm(p - q, axis=1)
        ok = dist > 1e-12
        slopes = np.abs(net(p[ok]) - net(q[ok])) / dist[ok]
        if slopes.size:
            best = max(best, float(slopes.max()))
        done += k
    return best


def init_certified(widths, L1: float, rng: np.random.Generator, hidden: str = "tanh",
                   output: str = "softplus", rho_convention: str = "squared",
                   out_bias: float = 0.0) -> tuple[LipMLP, LambdaParams]:
    """Random network with multipliers whose certificate matrix is positive definite at ``L1``."""
    widths = list(widths)
    weights = [rng.standard_normal((o, i)) / np.sqrt(i) for i, o in zip(widths[:-1], widths[1:])]
    biases = [np.zeros(o) for o in widths[1:]]
    biases[-1][:] = out_bias
    net = LipMLP(weights, biases, hidden, output, L1, rho_convention)
    lam = LambdaParams([np.ones(h) for h in widths[1:-1]])
    # shrink the product of layer norms below the target, then rescale multipliers
    norms = [np.linalg.norm(w, 2) for w in net.weights]
    scale = (0.5 * L1 / np.prod(norms)) ** (1.0 / len(norms)) if np.prod(norms) > 0 else 1.0
    for w in net.weights:
        w *= min(1.0, scale)
    for _ in range(200):
        if net.n_hidden:
            a = np.linalg.norm(net.weights[0], 2)
            lam = LambdaParams([np.full(h, net.rho / max(a * a, 1e-300)) for h in widths[1:-1]])
        if cert_check(build_cert_matrix(net, lam)).psd:
            return net, lam
        for w in net.weights:
            w *= 0.7
    raise RuntimeError("could not initialise a certified network")


# -- serialization -----------------------------------------------------------------

_MAGIC = "simgap-lipmlp 1"


def _fmt(a) -> str:
    return " ".join(repr(float(v)) for v in np.ravel(a))


def dumps_net(net: LipMLP, lam: LambdaParams | None = None) -> str:
    """Self-describing text; floats are written with ``repr`` so round trips are exact."""
    lines = [_MAGIC, "widths " + " ".join(map(str, net.layer_widths)),
             f"hidden {net.hidden}", f"output {net.output}",
             f"L1 {'none' if net.L1 is None else repr(float(net.L1))}",
             f"rho {net.rho_convention}"]
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        lines.append(f"W{k} {w.shape[0]} {w.shape[1]}")
        lines.extend(_fmt(row) for row in w)
        lines.append(f"b{k} {b.shape[0]}")
        lines.append(_fmt(b))
    if lam is not None:
        for k, d in enumerate(lam.diags):
            lines.append(f"lambda{k + 1} {d.shape[0]}")
            lines.append(_fmt(d))
    lines.append("end")
    return "\n".join(lines) + "\n"


def save_net(path, net: LipMLP, lam: LambdaParams | None = None) -> None:
    Path(path).write_text(dumps_net(net, lam))


def load_net(path) -> tuple[LipMLP, LambdaParams | None]:
    return loads_net(Path(path).read_text())


def loads_net(text: str) -> tuple[LipMLP, LambdaParams | None]:
    lines = text.splitlines()
    if not lines or lines[0] != _MAGIC:
        raise DomainError("not a serialized network")
    it = iter(lines[1:])
    head = {}
    for _ in range(5):
        key, _, val = next(it).partition(" ")
        head[key] = val
    widths = [int(v) for v in head["widths"].split()]
    weights, biases, diags = [], [], []
    for line in it:
        tag, *dims = line.split()
        if tag == "end":
            break
        if tag.startswith("W"):
            rows, cols = map(int, dims)
            weights.append(np.array([[float(v) for v in next(it).split()] for _ in range(rows)]).reshape(rows, cols))
        elif tag.startswith("b"):
            biases.append(np.array([float(v) for v in next(it).split()]))
        elif tag.startswith("lambda"):
            diags.append(np.array([float(v) for v in next(it).split()]))
    net = LipMLP(weights, biases, head["hidden"], head["output"],
                 None if head["L1"] == "none" else float(head["L1"]), head["rho"])
    if net.layer_widths != widths:
        raise DomainError(f"declared widths {widths} disagree with stored layers")
    if diags or net.n_hidden == 0:
        return net, LambdaParams(diags)
    return net, None
