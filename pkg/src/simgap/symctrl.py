"""Grid abstractions and fixed-point controller synthesis for gap-inflated systems.

The uncertain system is ``x' in f(x, u) + [-gamma(x, u), gamma(x, u)]``.  For
a state cell with center ``xc`` and half-widths ``r`` and an input ``uc`` the
abstraction over-approximates all successors by the box

    f(xc, uc) +/- (Lf @ r + gamma_bar)

where ``Lf`` bounds the nominal map's per-dimension sensitivity and
``gamma_bar`` is the certified gap at the center plus the network's Lipschitz
bound times the cell half-diagonal.  Successor cells are those whose interior
meets the box; a box leaving the state domain marks the pair unsafe.

Invariance is the greatest fixed point of the controllable predecessor; the
reach-avoid game is the least fixed point, recorded as a rank per cell.
"""
from __future__ import annotations

import csv
import io
import itertools
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import certificate as certmod
from .dynamics import Box, DiscreteSystem, DomainError

_EDGE_TOL = 1e-9


# -- grids ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class StateGrid:
    """Uniform partition of a box into ``counts`` cells; cells are half-open ``[lo, hi)``
    except the last one per axis, which also holds the upper face."""

    box: Box
    counts: tuple

    def __post_init__(self):
        object.__setattr__(self, "counts", tuple(int(c) for c in np.atleast_1d(self.counts)))
        if len(self.counts) != self.box.dim or min(self.counts) < 1:
            raise DomainError("one positive cell count per dimension is required")

    @property
    def dim(self) -> int:
        return self.box.dim

    @property
    def size(self) -> int:
        return int(np.prod(self.counts))

    @property
    def widths(self) -> np.ndarray:
        return self.box.widths / np.asarray(self.counts, dtype=float)

    @property
    def radius(self) -> np.ndarray:
        return self.widths / 2.0

    def centers(self, idx=None) -> np.ndarray:
        multi = self.unravel(np.arange(self.size) if idx is None else idx)
        return self.box.lower + (multi + 0.5) * self.widths

    def unravel(self, idx) -> np.ndarray:
        return np.stack(np.unravel_index(np.asarray(idx), self.counts), axis=-1)

    def ravel(self, multi) -> np.ndarray:
        multi = np.asarray(multi)
        return np.ravel_multi_index(tuple(np.moveaxis(multi, -1, 0)), self.counts)

    def quantize(self, points) -> np.ndarray:
        """Flat cell index per point, ``-1`` outside the box."""
        p = np.atleast_2d(np.asarray(points, dtype=float))
        multi = np.floor((p - self.box.lower) / self.widths).astype(np.int64)
        multi = np.minimum(multi, np.asarray(self.counts) - 1)
        inside = self.box.contains(p)
        multi = np.clip(multi, 0, None)
        out = self.ravel(multi)
        return np.where(inside, out, -1)

    def cells_inside(self, box: Box) -> np.ndarray:
        """Mask of cells entirely contained in ``box``."""
        c = self.centers()
        return np.all((c - self.radius >= box.lower - _EDGE_TOL * self.widths)
                      & (c + self.radius <= box.upper + _EDGE_TOL * self.widths), axis=-1)

    def cells_touching(self, box: Box) -> np.ndarray:
        """Mask of cells whose closure meets ``box``."""
        c = self.centers()
        return np.all((c + self.radius >= box.lower) & (c - self.radius <= box.upper), axis=-1)


@dataclass(frozen=True, eq=False)
class InputGrid:
    """Lattice of ``counts`` points per axis including both faces of the input box
    (a single point sits at the center)."""

    box: Box
    counts: tuple

    def __post_init__(self):
        object.__setattr__(self, "counts", tuple(int(c) for c in np.atleast_1d(self.counts)))
        if len(self.counts) != self.box.dim or min(self.counts) < 1:
            raise DomainError("one positive point count per dimension is required")

    @property
    def size(self) -> int:
        return int(np.prod(self.counts))

    def axis_values(self, d: int) -> np.ndarray:
        if self.counts[d] == 1:
            return np.array([self.box.center[d]])
        return np.linspace(self.box.lower[d], self.box.upper[d], self.counts[d])

    def values(self) -> np.ndarray:
        mesh = np.meshgrid(*[self.axis_values(d) for d in range(self.box.dim)], indexing="ij")
        return np.stack([g.ravel() for g in mesh], axis=-1)

    def central_index(self) -> int:
        v = self.values()
        return int(np.argmin(np.linalg.norm(v - self.box.center, axis=1)))


# -- uncertain system and abstraction --------------------------------------------------

@dataclass(frozen=True, eq=False)
class UncertainSystem:
    """Nominal map with an additive, certified, coordinate-wise disturbance bound.

    ``cert=None`` gives the disturbance-free model; ``gamma_scale`` multiplies
    the bound pointwise.
    """

    nominal: DiscreteSystem
    cert: certmod.GapCertificate | None = None
    gamma_scale: float = 1.0

    def gamma(self, x, u) -> np.ndarray:
        x = np.atleast_2d(x)
        if self.cert is None:
            return np.zeros((x.shape[0], self.nominal.n))
        return self.gamma_scale * certmod.gap_bound(self.cert, x, np.atleast_2d(u), check=False)

    def gamma_over_cell(self, xc, uc, radius) -> np.ndarray:
        """Bound on gamma over a whole state cell with exact input ``uc``."""
        if self.cert is None:
            return np.zeros((np.atleast_2d(xc).shape[0], self.nominal.n))
        spread = self.cert.L1 * float(np.linalg.norm(radius))
        return self.gamma(xc, uc) + self.gamma_scale * spread


@dataclass(eq=False)
class Abstraction:
    sgrid: StateGrid
    igrid: InputGrid
    lo: np.ndarray       # (cells, inputs, n) first successor multi-index
    hi: np.ndarray       # (cells, inputs, n) last successor multi-index (inclusive)
    unsafe: np.ndarray   # (cells, inputs) successor box leaves the domain

    def successors(self, cell: int, inp: int) -> np.ndarray:
        if self.unsafe[cell, inp]:
            return np.empty(0, dtype=np.int64)
        ranges = [np.arange(a, b + 1) for a, b in zip(self.lo[cell, inp], self.hi[cell, inp])]
        mesh = np.meshgrid(*ranges, indexing="ij")
        return np.sort(self.sgrid.ravel(np.stack([g.ravel() for g in mesh], axis=-1)))


def abstract(sys: UncertainSystem, sgrid: StateGrid, igrid: InputGrid,
             nominal_lipschitz=None) -> Abstraction:
    """Over-approximating finite abstraction of ``sys`` on the given grids."""
    nom = sys.nominal
    if sgrid.box != nom.state_box:
        raise DomainError("state grid does not cover the system's state box")
    if igrid.box != nom.input_box:
        raise DomainError("input grid does not match the system's input box")
    Lf = nom.growth_bound if nominal_lipschitz is None else np.asarray(nominal_lipschitz, dtype=float)
    if Lf is None:
        raise DomainError("a growth bound for the nominal map is required")
    Lf = np.atleast_2d(Lf)
    xc = sgrid.centers()
    uc = igrid.values()
    Nc, Nu, n = xc.shape[0], uc.shape[0], nom.n
    r = sgrid.radius
    growth = Lf @ r
    lo = np.empty((Nc, Nu, n), dtype=np.int32)
    hi = np.empty((Nc, Nu, n), dtype=np.int32)
    unsafe = np.empty((Nc, Nu), dtype=bool)
    box = sgrid.box
    w = sgrid.widths
    cmax = np.asarray(sgrid.counts) - 1
    for j in range(Nu):
        u = np.broadcast_to(uc[j], (Nc, uc.shape[1]))
        f = nom.step(xc, u)
        half = growth + sys.gamma_over_cell(xc, u, r)
        a, b = f - half, f + half
        unsafe[:, j] = np.any(a < box.lower, axis=1) | np.any(b > box.upper, axis=1)
        lo[:, j] = np.clip(np.floor((a - box.lower) / w + _EDGE_TOL), 0, cmax)
        hi[:, j] = np.clip(np.ceil((b - box.lower) / w - _EDGE_TOL) - 1, 0, cmax)
        hi[:, j] = np.maximum(hi[:, j], lo[:, j])
    return Abstraction(sgrid, igrid, lo, hi, unsafe)


def abstraction_from_table(table: dict) -> Abstraction:
    """Abstraction from an explicit table: per cell, per input either ``None`` (unsafe)
    or ``[lo_0, ..., lo_{n-1}, hi_0, ..., hi_{n-1}]`` inclusive successor multi-indices."""
    counts = tuple(table["counts"])
    n = len(counts)
    sg = StateGrid(Box(table["lower"], table["upper"]), counts)
    ig = InputGrid(Box.from_bounds(*[(0.0, 1.0)]), (int(table["inputs"]),))
    trans = table["transitions"]
    if len(trans) != sg.size or any(len(row) != ig.size for row in trans):
        raise DomainError("transition table does not match the grid")
    lo = np.zeros((sg.size, ig.size, n), dtype=np.int32)
    hi = np.zeros_like(lo)
    unsafe = np.zeros((sg.size, ig.size), dtype=bool)
    for c, row in enumerate(trans):
        for j, rect in enumerate(row):
            if rect is None:
                unsafe[c, j] = True
            else:
                lo[c, j], hi[c, j] = rect[:n], rect[n:]
    if np.any(lo > hi) or np.any(hi >= np.asarray(counts)) or np.any(lo < 0):
        raise DomainError("successor rectangle outside the grid")
    return Abstraction(sg, ig, lo, hi, unsafe)


def toy_abstraction() -> tuple[Abstraction, dict]:
    """Bundled 5x5 hand-built abstraction with its safe, target and avoid cell lists."""
    table = json.loads((resources.files("simgap") / "configs" / "toy5x5.json").read_text())
    return abstraction_from_table(table), {k: table[k] for k in ("safe", "target", "avoid")}


def _prefix(mask: np.ndarray, counts) -> np.ndarray:
    P = mask.reshape(counts).astype(np.int64)
    for ax in range(P.ndim):
        P = np.cumsum(P, axis=ax)
    return np.pad(P, [(1, 0)] * P.ndim)


def _rect_sum(P: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    n = lo.shape[-1]
    total = np.zeros(lo.shape[:-1], dtype=np.int64)
    for corner in itertools.product((0, 1), repeat=n):
        idx = tuple(np.where(bit, hi[..., d] + 1, lo[..., d]) for d, bit in enumerate(corner))
        sign = -1 if (n - sum(corner)) % 2 else 1
        total += sign * P[idx]
    return total


def _rect_all(abs_: Abstraction, mask: np.ndarray) -> np.ndarray:
    """``[cell, input]`` is True iff every successor lies in ``mask`` and the pair is safe."""
    P = _prefix(mask, abs_.sgrid.counts)
    area = np.prod(abs_.hi.astype(np.int64) - abs_.lo + 1, axis=-1)
    return (_rect_sum(P, abs_.lo, abs_.hi) == area) & ~abs_.unsafe


def _rect_max(abs_: Abstraction, values: np.ndarray, cells: np.ndarray) -> np.ndarray:
    """Maximum of ``values`` over each successor rectangle, for the listed cells."""
    lo, hi = abs_.lo[cells], abs_.hi[cells]
    ext = (hi - lo).max(axis=(0, 1)) + 1 if cells.size else np.ones(lo.shape[-1], dtype=int)
    V = values.reshape(abs_.sgrid.counts)
    out = np.full(lo.shape[:-1], -np.inf)
    for off in itertools.product(*[range(int(e)) for e in ext]):
        idx = tuple(np.minimum(lo[..., d] + off[d], hi[..., d]) for d in range(lo.shape[-1]))
        out = np.maximum(out, V[idx])
    return out


# -- controllers -------------------------------------------------------------------------

@dataclass(frozen=True)
class InvarianceSpec:
    safe: Box
    kind: str = field(default="invariance", init=False)

    def to_dict(self) -> dict:
        return dict(kind=self.kind, safe=[self.safe.lower.tolist(), self.safe.upper.tolist()])


@dataclass(frozen=True)
class ReachAvoidSpec:
    target: Box
    obstacles: tuple = ()
    kind: str = field(default="reach_avoid", init=False)

    def to_dict(self) -> dict:
        return dict(kind=self.kind, target=[self.target.lower.tolist(), self.target.upper.tolist()],
                    obstacles=[[o.lower.tolist(), o.upper.tolist()] for o in self.obstacles])


def spec_from_dict(d: dict):
    if d["kind"] == "invariance":
        return InvarianceSpec(Box(*d["safe"]))
    return ReachAvoidSpec(Box(*d["target"]), tuple(Box(*o) for o in d["obstacles"]))


@dataclass(eq=False)
class SymbolicController:
    sgrid: StateGrid
    igrid: InputGrid
    winning: np.ndarray          # (cells,) bool
    inputs: np.ndarray           # (cells,) chosen input index, -1 outside the winning set
    rank: np.ndarray | None = None
    spec: dict = field(default_factory=dict)
    iterations: int = 0

    @property
    def size(self) -> int:
        return int(self.winning.sum())

    def input_index(self, x) -> int:
        c = int(self.sgrid.quantize(x)[0])
        if c < 0 or not self.winning[c]:
            return -1
        return int(self.inputs[c])

    def input_for(self, x):
        k = self.input_index(x)
        return None if k < 0 else self.igrid.values()[k]


def synth_invariance(abs_: Abstraction, safe_cells) -> SymbolicController:
    """Maximal controlled-invariant subset of ``safe_cells`` (mask or index collection)."""
    W = _as_mask(safe_cells, abs_.sgrid.size)
    it = 0
    while True:
        it += 1
        ok = _rect_all(abs_, W) & W[:, None]
        Wn = ok.any(axis=1)
        if np.array_equal(Wn, W):
            break
        W = Wn
    inputs = np.where(W, np.argmax(ok, axis=1), -1)
    return SymbolicController(abs_.sgrid, abs_.igrid, W, inputs, None,
                              dict(kind="invariance"), it)


def synth_reach_avoid(abs_: Abstraction, target_cells, avoid_cells) -> SymbolicController:
    """Least fixed point of the reach-avoid game with worst-case ranks.

    A cell gets rank ``k`` once some input sends every successor into cells of
    rank below ``k``; the chosen input minimises the worst successor rank,
    ties going to the lowest input index.
    """
    N = abs_.sgrid.size
    T = _as_mask(target_cells, N)
    A = _as_mask(avoid_cells, N)
    if np.any(T & A):
        raise DomainError("target and avoid sets intersect")
    rank = np.full(N, np.inf)
    rank[T] = 0
    inputs = np.full(N, -1, dtype=np.int64)
    inputs[T] = 0
    W = T.copy()
    k = 0
    while True:
        k += 1
        ok = _rect_all(abs_, W) & ~(W | A)[:, None]
        new = np.flatnonzero(ok.any(axis=1))
        if new.size == 0:
            break
        worst = _rect_max(abs_, rank, new)
        worst[~ok[new]] = np.inf
        inputs[new] = np.argmin(worst, axis=1)
        rank[new] = k
        W[new] = True
    return SymbolicController(abs_.sgrid, abs_.igrid, W, np.where(W, inputs, -1), rank,
                              dict(kind="reach_avoid"), k)


def _as_mask(cells, N) -> np.ndarray:
    arr = np.asarray(cells)
    if arr.dtype == bool:
        if arr.shape != (N,):
            raise DomainError("cell mask has the wrong length")
        return arr.copy()
    mask = np.zeros(N, dtype=bool)
    idx = np.asarray(list(cells) if not isinstance(cells, np.ndarray) else cells, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= N):
        raise DomainError("cell index outside the grid")
    mask[idx] = True
    return mask


def spec_cells(sgrid: StateGrid, spec):
    """Cell masks for a specification: ``safe`` for invariance, ``(target, avoid)`` for reach-avoid."""
    if isinstance(spec, InvarianceSpec):
        return sgrid.cells_inside(spec.safe)
    target = sgrid.cells_inside(spec.target)
    avoid = np.zeros(sgrid.size, dtype=bool)
    for ob in spec.obstacles:
        avoid |= sgrid.cells_touching(ob)
    return target & ~avoid, avoid


def synthesize(abs_: Abstraction, spec) -> SymbolicController:
    if isinstance(spec, InvarianceSpec):
        ctl = synth_invariance(abs_, spec_cells(abs_.sgrid, spec))
    else:
        ctl = synth_reach_avoid(abs_, *spec_cells(abs_.sgrid, spec))
    ctl.spec = spec.to_dict()
    return ctl


# -- closed loop ------------------------------------------------------------------------

@dataclass
class Verdict:
    satisfied: bool
    reason: str
    first_violation: int | None = None
    reached_at: int | None = None
    left_winning_at: int | None = None

    def to_dict(self) -> dict:
        return dict(satisfied=self.satisfied, reason=self.reason,
                    first_violation=self.first_violation, reached_at=self.reached_at,
                    left_winning_at=self.left_winning_at)


@dataclass
class Trajectory:
    states: np.ndarray
    inputs: np.ndarray
    in_spec: np.ndarray
    verdict: Verdict

    def to_csv(self, path) -> None:
        n, m = self.states.shape[1], self.inputs.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step"] + [f"x{k + 1}" for k in range(n)] + [f"u{k + 1}" for k in range(m)] + ["in_spec"])
            for k in range(self.states.shape[0]):
                u = self.inputs[k] if k < self.inputs.shape[0] else np.full(m, np.nan)
                w.writerow([k] + [repr(float(v)) for v in self.states[k]]
                           + [repr(float(v)) for v in u] + [int(self.in_spec[k])])


def _state_ok(spec, x) -> tuple[bool, str | None]:
    if isinstance(spec, InvarianceSpec):
        return (True, None) if spec.safe.contains(x) else (False, "left safe set")
    for ob in spec.obstacles:
        if ob.contains(x):
            return False, "obstacle contact"
    return True, None


def rollout(controller: SymbolicController, executing: DiscreteSystem, x0, steps: int) -> Trajectory:
    """Closed loop: quantize, look up, step ``executing``.

    Outside the winning domain the controller has no entry; the input closest
    to the center of U is applied and the event is recorded.  Reach-avoid runs
    stop once the target box is entered.
    """
    spec = spec_from_dict(controller.spec)
    dom = executing.state_box
    values = controller.igrid.values()
    fallback = values[controller.igrid.central_index()]
    x = np.asarray(x0, dtype=float)
    states, inputs, flags = [x.copy()], [], []
    if controller.input_index(x) < 0:
        ok, _ = _state_ok(spec, x)
        return Trajectory(np.array(states), np.empty((0, values.shape[1])), np.array([ok]),
                          Verdict(False, "outside winning domain"))
    verdict = None
    left_at = None
    for k in range(steps + 1):
        ok, why = _state_ok(spec, x)
        if ok and not dom.contains(x):
            ok, why = False, "left state domain"
        flags.append(ok)
        if not ok:
            verdict = Verdict(False, why, first_violation=k)
            break
        if isinstance(spec, ReachAvoidSpec) and spec.target.contains(x):
            verdict = Verdict(True, "reached target", reached_at=k)
            break
        if k == steps:
            break
        j = controller.input_index(x)
        if j < 0:
            left_at = k if left_at is None else left_at
            u = fallback
        else:
            u = values[j]
        inputs.append(u)
        x = executing.step(x, u)
        states.append(x.copy())
    if verdict is None:
        if isinstance(spec, InvarianceSpec):
            verdict = Verdict(True, "stayed safe")
        else:
            verdict = Verdict(False, "target not reached")
    verdict.left_winning_at = left_at
    return Trajectory(np.array(states), np.array(inputs).reshape(-1, values.shape[1]),
                      np.array(flags), verdict)


def disturbed_rollouts(controller: SymbolicController, sys: UncertainSystem, x0s, steps: int,
                       seed: int = 0) -> np.ndarray:
    """Batch closed loops under extreme-corner disturbances ``+/- gamma(x, u)`` drawn at random.

    Returns the step of first violation per trajectory (``-1`` when none).
    Reach-avoid trajectories are frozen once they enter the target.
    """
    spec = spec_from_dict(controller.spec)
    rng = np.random.default_rng(seed)
    values = controller.igrid.values()
    x = np.array(x0s, dtype=float)
    B = x.shape[0]
    first = np.full(B, -1)
    alive = np.ones(B, dtype=bool)
    for k in range(steps + 1):
        if isinstance(spec, InvarianceSpec):
            bad = ~spec.safe.contains(x)
        else:
            bad = np.zeros(B, dtype=bool)
            for ob in spec.obstacles:
                bad |= ob.contains(x)
            alive &= ~spec.target.contains(x) | bad
        bad |= ~sys.nominal.state_box.contains(x)
        idx = np.where(alive & bad)[0]
        first[idx] = k
        alive &= ~bad
        if k == steps or not alive.any():
            break
        cells = controller.sgrid.quantize(x[alive])
        j = np.where(cells >= 0, controller.inputs[np.maximum(cells, 0)], -1)
        lost = j < 0
        j[lost] = controller.igrid.central_index()
        u = values[j]
        xa = x[alive]
        sign = rng.choice([-1.0, 1.0], size=xa.shape)
        x[alive] = sys.nominal.step(xa, u) + sign * sys.gamma(xa, u)
    return first


# -- persistence ---------------------------------------------------------------------------

def save_controller(ctl: SymbolicController, path) -> None:
    meta = dict(format="simgap-controller 1", spec=ctl.spec, iterations=ctl.iterations,
                state_counts=list(ctl.sgrid.counts), input_counts=list(ctl.igrid.counts))
    arrays = dict(meta=np.array(json.dumps(meta, sort_keys=True)), winning=ctl.winning,
                  inputs=ctl.inputs, state_lower=ctl.sgrid.box.lower, state_upper=ctl.sgrid.box.upper,
                  input_lower=ctl.igrid.box.lower, input_upper=ctl.igrid.box.upper)
    if ctl.rank is not None:
        arrays["rank"] = ctl.rank
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_controller(path) -> SymbolicController:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        sg = StateGrid(Box(z["state_lower"], z["state_upper"]), tuple(meta["state_counts"]))
        ig = InputGrid(Box(z["input_lower"], z["input_upper"]), tuple(meta["input_counts"]))
        rank = z["rank"] if "rank" in z.files else None
        return SymbolicController(sg, ig, z["winning"].copy(), z["inputs"].copy(), rank,
                                  meta["spec"], meta["iterations"])


def write_winning_csv(ctl: SymbolicController, path) -> None:
    cells = np.flatnonzero(ctl.winning)
    centers = ctl.sgrid.centers(cells)
    us = ctl.igrid.values()[ctl.inputs[cells]]
    n, m = centers.shape[1], us.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cell"] + [f"x{k + 1}" for k in range(n)] + [f"u{k + 1}" for k in range(m)] + ["rank"])
        for c, xc, u in zip(cells, centers, us):
            rk = "" if ctl.rank is None else int(ctl.rank[c])
            w.writerow([int(c)] + [repr(float(v)) for v in xc] + [repr(float(v)) for v in u] + [rk])
