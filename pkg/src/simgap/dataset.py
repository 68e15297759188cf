"""Paired one-step transitions of the nominal model and the surrogate on a cover product."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .covering import CoverGrid
from .dynamics import Box, DomainError, SystemPair


class GapSample(NamedTuple):
    x_r: np.ndarray
    u_s: np.ndarray
    f_hat: np.ndarray
    f_nom: np.ndarray


@dataclass(frozen=True, eq=False)
class GapDataset:
    x: np.ndarray
    u: np.ndarray
    f_hat: np.ndarray
    f_nom: np.ndarray
    state_cover: CoverGrid
    input_cover: CoverGrid
    pair_id: str

    def __len__(self):
        return self.x.shape[0]

    @property
    def n(self) -> int:
        return self.x.shape[1]

    @property
    def m(self) -> int:
        return self.u.shape[1]

    @property
    def inputs(self) -> np.ndarray:
        """Concatenated ``(x, u)`` rows, the network input."""
        return np.concatenate([self.x, self.u], axis=1)

    @property
    def samples(self) -> list[GapSample]:
        return [GapSample(*row) for row in zip(self.x, self.u, self.f_hat, self.f_nom)]

    def subset(self, idx) -> "GapDataset":
        return GapDataset(self.x[idx], self.u[idx], self.f_hat[idx], self.f_nom[idx],
                          self.state_cover, self.input_cover, self.pair_id)


def generate(pair: SystemPair, state_cover: CoverGrid, input_cover: CoverGrid,
             chunk: int = 4096) -> GapDataset:
    """Evaluate both systems on every (state center, input center) combination.

    Rows are state-major: the input index varies fastest.
    """
    if state_cover.box != pair.state_box or input_cover.box != pair.input_box:
        raise DomainError("covers do not match the pair's state/input boxes")
    xs = state_cover.centers
    us = input_cover.centers
    N, M = len(xs), len(us)
    x = np.repeat(xs, M, axis=0)
    u = np.tile(us, (N, 1))
    f_hat = np.empty_like(x)
    f_nom = np.empty_like(x)
    step = max(1, chunk) * M
    for start in range(0, N * M, step):
        sl = slice(start, start + step)
        f_hat[sl] = pair.surrogate.step(x[sl], u[sl])
        f_nom[sl] = pair.nominal.step(x[sl], u[sl])
    return GapDataset(x, u, f_hat, f_nom, state_cover, input_cover, pair.pair_id)


def gap_targets(ds: GapDataset, i: int) -> np.ndarray:
    """``|f_hat_i - f_i|`` per sample for coordinate ``i`` (0-based)."""
    if not 0 <= i < ds.n:
        raise DomainError(f"coordinate index {i} out of range for n={ds.n}")
    return np.abs(ds.f_hat[:, i] - ds.f_nom[:, i])


def _cover_meta(c: CoverGrid) -> dict:
    return dict(lower=c.box.lower.tolist(), upper=c.box.upper.tolist(),
                epsilon=c.epsilon, counts=list(c.per_dim_counts))


def _cover_from_meta(d: dict) -> CoverGrid:
    return CoverGrid(Box(d["lower"], d["upper"]), float(d["epsilon"]), tuple(d["counts"]))


def save(ds: GapDataset, directory, seed=None) -> tuple[Path, Path]:
    """Write ``dataset.csv`` and its ``dataset.json`` sidecar into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    n, m = ds.n, ds.m
    header = ([f"x{k + 1}" for k in range(n)] + [f"u{k + 1}" for k in range(m)]
              + [f"f_hat{k + 1}" for k in range(n)] + [f"f_nom{k + 1}" for k in range(n)])
    table = np.concatenate([ds.x, ds.u, ds.f_hat, ds.f_nom], axis=1)
    csv_path = directory / "dataset.csv"
    with open(csv_path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        np.savetxt(fh, table, fmt="%.17g", delimiter=",")
    meta = dict(pair_id=ds.pair_id, n=n, m=m, N=len(ds.state_cover), M=len(ds.input_cover),
                samples=len(ds), eps_x=ds.state_cover.epsilon, eps_u=ds.input_cover.epsilon,
                state_cover=_cover_meta(ds.state_cover), input_cover=_cover_meta(ds.input_cover),
                seed=seed)
    meta_path = directory / "dataset.json"
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return csv_path, meta_path


def load(directory) -> GapDataset:
    directory = Path(directory)
    meta = json.loads((directory / "dataset.json").read_text())
    n, m = meta["n"], meta["m"]
    with open(directory / "dataset.csv", newline="") as fh:
        header = next(csv.reader(fh))
        table = np.loadtxt(fh, delimiter=",", ndmin=2)
    if len(header) != 3 * n + m or table.shape[1] != 3 * n + m:
        raise DomainError("dataset.csv columns disagree with its sidecar")
    return GapDataset(table[:, :n].copy(), table[:, n:n + m].copy(),
                      table[:, n + m:2 * n + m].copy(), table[:, 2 * n + m:].copy(),
                      _cover_from_meta(meta["state_cover"]), _cover_from_meta(meta["input_cover"]),
                      meta["pair_id"])
