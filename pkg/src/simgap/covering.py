"""Finite epsilon-nets over boxes.

A cover is a uniform axis-aligned grid whose cells have half-diagonal at most
``epsilon``; the centers of those cells form the net.  Every point of the box
is then within Euclidean distance ``epsilon`` of some center.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .dynamics import Box, DomainError

DEFAULT_MAX_CENTERS = 10**7


class CoverSizeError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class CoverGrid:
    box: Box
    epsilon: float
    per_dim_counts: tuple

    @property
    def spacing(self) -> np.ndarray:
        return self.box.widths / np.asarray(self.per_dim_counts, dtype=float)

    @property
    def size(self) -> int:
        return math.prod(self.per_dim_counts)

    def __len__(self):
        return self.size

    def axis_centers(self, d: int) -> np.ndarray:
        h = self.spacing[d]
        return self.box.lower[d] + (np.arange(self.per_dim_counts[d]) + 0.5) * h

    @property
    def centers(self) -> np.ndarray:
        """All centers, shape ``(size, dim)``, row-major (last dimension varies fastest)."""
        axes = [self.axis_centers(d) for d in range(self.box.dim)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in mesh], axis=-1)

    @property
    def half_diagonal(self) -> float:
        return float(np.sqrt(np.sum((self.spacing / 2.0) ** 2)))

    def to_csv(self, path, labels=None) -> None:
        labels = labels or [f"c{d + 1}" for d in range(self.box.dim)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(labels)
            for row in self.centers:
                w.writerow([repr(float(v)) for v in row])


def build_cover(box: Box, epsilon: float, max_centers: int = DEFAULT_MAX_CENTERS) -> CoverGrid:
    """Smallest uniform grid on ``box`` whose cell half-diagonal is at most ``epsilon``.

    Spacing per dimension is capped at ``2 epsilon / sqrt(d)``.
    """
    if not epsilon > 0:
        raise DomainError(f"epsilon must be positive, got {epsilon}")
    d = box.dim
    hmax = 2.0 * epsilon / math.sqrt(d)
    counts = [max(1, math.ceil(w / hmax - 1e-12)) for w in box.widths]
    # rounding in the line above may undershoot by one; repair against the exact test
    while True:
        h = box.widths / np.asarray(counts, dtype=float)
        if np.sqrt(np.sum((h / 2.0) ** 2)) <= epsilon:
            break
        k = int(np.argmax(h))
        counts[k] += 1
    total = math.prod(counts)
    if total > max_centers:
        raise CoverSizeError(f"cover of {box} at epsilon={epsilon} needs {total} centers "
                             f"(cap {max_centers})")
    return CoverGrid(box, float(epsilon), tuple(int(c) for c in counts))


def nearest_centers(grid: CoverGrid, points) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`nearest_center`; returns flat indices and distances."""
    p = np.atleast_2d(np.asarray(points, dtype=float))
    if p.shape[-1] != grid.box.dim:
        raise DomainError(f"points must have width {grid.box.dim}")
    if not np.all(grid.box.contains(p)):
        raise DomainError("point outside the cover's box")
    h = grid.spacing
    t = (p - grid.box.lower) / h - 0.5
    # round half toward the lower index
    idx = np.ceil(t - 0.5).astype(np.int64)
    idx = np.clip(idx, 0, np.asarray(grid.per_dim_counts) - 1)
    centers = grid.box.lower + (idx + 0.5) * h
    dist = np.sqrt(np.sum((p - centers) ** 2, axis=-1))
    flat = np.ravel_multi_index(tuple(idx.T), grid.per_dim_counts)
    return flat, dist


def nearest_center(grid: CoverGrid, point) -> tuple[int, float]:
    """Closed-form nearest center of ``point``; ties break toward the lower grid index."""
    flat, dist = nearest_centers(grid, np.asarray(point, dtype=float).reshape(1, -1))
    return int(flat[0]), float(dist[0])
