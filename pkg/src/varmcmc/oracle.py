"""Dense-grid ground truth for one- and two-dimensional posteriors.

The unnormalized log density is evaluated at cell midpoints of a uniform
grid; everything else (normalizer, moments, modes, basins) is read off that
array.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from varmcmc.io import write_table

BOUNDARY_MASS = 1e-6


class GridError(ValueError):
    pass


@dataclass
class GridPosterior:
    box: list[tuple[float, float]]
    resolution: int
    log_values: np.ndarray

    def __post_init__(self):
        if len(self.box) not in (1, 2):
            raise GridError("grid dimension must be 1 or 2")
        self.log_norm = float(logsumexp(self.log_values) + np.log(self.cell_volume))

    @property
    def dim(self) -> int:
        return len(self.box)

    @property
    def edges(self) -> list[np.ndarray]:
        return [np.linspace(lo, hi, self.resolution + 1) for lo, hi in self.box]

    @property
    def centers(self) -> list[np.ndarray]:
        return [0.5 * (e[1:] + e[:-1]) for e in self.edges]

    @property
    def cell_volume(self) -> float:
        return float(np.prod([(hi - lo) / self.resolution for lo, hi in self.box]))

    def points(self) -> np.ndarray:
        """Cell midpoints, shape ``(resolution**dim, dim)``, C order."""
        mesh = np.meshgrid(*self.centers, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def density(self) -> np.ndarray:
        """Normalized density at cell midpoints; ``density().sum() * cell_volume == 1``."""
        return np.exp(self.log_values - self.log_norm)

    def weights(self) -> np.ndarray:
        """Probability mass of each cell."""
        return self.density() * self.cell_volume


def build_grid(target, box, resolution: int = 400, check_boundary: bool = True) -> GridPosterior:
    """Evaluate ``target`` (batched: ``(B, d) -> (B,)``) on a midpoint grid."""
    box = [(float(lo), float(hi)) for lo, hi in box]
    if resolution < 16:
        raise GridError("resolution must be at least 16")
    if not all(np.isfinite([lo, hi]).all() and hi > lo for lo, hi in box):
        raise GridError("box must be finite with lo < hi")
    shell = GridPosterior(box, resolution, np.zeros((resolution,) * len(box)))
    vals = np.asarray(target(shell.points()), dtype=float).reshape((resolution,) * len(box))
    grid = GridPosterior(box, resolution, vals)
    if check_boundary:
        w = grid.weights()
        edge = np.zeros(w.shape, dtype=bool)
        for ax in range(w.ndim):
            idx = [slice(None)] * w.ndim
            idx[ax] = [0, -1]
            edge[tuple(idx)] = True
        if w[edge].max() > BOUNDARY_MASS:
            raise GridError("grid box too small")
    return grid


def grid_moments(grid: GridPosterior, mask=None):
    """Mean and covariance under the grid weights, optionally restricted to ``mask``."""
    w = grid.weights()
    if mask is not None:
        w = np.where(mask, w, 0.0)
    w = w.ravel() / w.sum()
    pts = grid.points()
    mean = w @ pts
    diff = pts - mean
    cov = (w[:, None] * diff).T @ diff
    return mean, cov


def _neighbour_offsets(dim: int):
    if dim == 1:
        return [(-1,), (1,)]
    return [(a, b) for a in (-1, 0, 1) for b in (-1, 0, 1) if (a, b) != (0, 0)]


def _ascent_pointer(values: np.ndarray) -> np.ndarray:
    """Flat index of the best cell among each cell and its neighbours."""
    shape = values.shape
    best = values.copy()
    ptr = np.arange(values.size).reshape(shape)
    flat_idx = np.arange(values.size).reshape(shape)
    padded = np.pad(values, 1, constant_values=-np.inf)
    padded_idx = np.pad(flat_idx, 1, constant_values=-1)
    for off in _neighbour_offsets(values.ndim):
        sl = tuple(slice(1 + o, 1 + o + n) for o, n in zip(off, shape))
        cand, cand_idx = padded[sl], padded_idx[sl]
        better = cand > best
        best = np.where(better, cand, best)
        ptr = np.where(better, cand_idx, ptr)
    return ptr.ravel()


def local_maxima(grid: GridPosterior) -> list[tuple[int, ...]]:
    """Cells strictly higher than every neighbour (8-neighbourhood in 2-D)."""
    ptr = _ascent_pointer(grid.log_values)
    roots = np.nonzero(ptr == np.arange(ptr.size))[0]
    return [np.unravel_index(r, grid.log_values.shape) for r in roots]


def basin_partition(grid: GridPosterior) -> np.ndarray:
    """Label each cell by the local maximum its steepest-ascent path reaches.

    Labels are ``0..n_modes-1`` in the order of ``local_maxima``.
    """
    ptr = _ascent_pointer(grid.log_values)
    while True:
        nxt = ptr[ptr]
        if np.array_equal(nxt, ptr):
            break
        ptr = nxt
    roots = np.nonzero(ptr == np.arange(ptr.size))[0]
    lookup = np.full(ptr.size, -1)
    lookup[roots] = np.arange(roots.size)
    return lookup[ptr].reshape(grid.log_values.shape)


def locate(grid: GridPosterior, theta) -> np.ndarray:
    """Grid cell index (per dimension) containing each point; clipped to the box."""
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    out = []
    for k, (lo, hi) in enumerate(grid.box):
        i = np.floor((theta[:, k] - lo) / (hi - lo) * grid.resolution).astype(int)
        out.append(np.clip(i, 0, grid.resolution - 1))
    return np.stack(out, axis=1)


def basin_of(grid: GridPosterior, labels: np.ndarray, theta) -> np.ndarray:
    """Basin label of each point in ``theta``."""
    idx = locate(grid, theta)
    return labels[tuple(idx.T)]


def write_grid_csv(grid: GridPosterior, path, comments=()):
    """Cell midpoints and normalized density, one row per cell."""
    names = ["x", "y"][: grid.dim] + ["density"]
    rows = np.column_stack([grid.points(), grid.density().ravel()])
    write_table(path, names, rows.tolist(), comments)


def write_moments_csv(mean, cov, path, label: str = "all", comments=()):
    mean = np.atleast_1d(mean)
    cov = np.atleast_2d(cov)
    rows = [[label, "mean", i, "", float(m)] for i, m in enumerate(mean)]
    rows += [[label, "cov", i, j, float(cov[i, j])] for i in range(cov.shape[0]) for j in range(cov.shape[1])]
    write_table(path, ["region", "quantity", "i", "j", "value"], rows, comments)
