"""Coarse-grid L2 projection onto piecewise constants and observation streams."""

from __future__ import annotations

import struct
import warnings
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .fe_space import FESpace
from .linalg import finalize
from .mesh import CoarseGrid


class ObservationError(ValueError):
    pass


class ObservationOperator:
    """``I_H``: fine coefficients -> coarse cell averages.

    ``P[c, j] = (1/|c|) * integral over c of phi_j``, integrated with the
    fine quadrature; each quadrature point belongs to the cell containing it.
    Vector fields are handled component by component.
    """

    def __init__(self, space: FESpace, grid: CoarseGrid):
        self.space = space
        self.grid = grid
        ed = space.elements
        nt, nq = ed.jxw.shape
        self.cell_of_qp = grid.locate(ed.points.reshape(-1, 2)).reshape(nt, nq)
        measures = np.bincount(self.cell_of_qp.ravel(), weights=ed.jxw.ravel(), minlength=grid.n_cells)
        if np.any(measures <= 0):
            empty = np.flatnonzero(measures <= 0)
            raise ObservationError(f"coarse cells {empty.tolist()} receive no fine quadrature weight")
        self.W = measures
        self._jxw = ed.jxw
        self._points = ed.points

        nl = space.n_local
        rows = np.repeat(self.cell_of_qp[:, :, None], nl, axis=2)
        cols = np.broadcast_to(space.scalar_dof_map[:, None, :], (nt, nq, nl))
        vals = ed.jxw[:, :, None] * ed.values[None, :, :] / measures[self.cell_of_qp][:, :, None]
        self.P = finalize(sp.coo_matrix((vals.ravel(), (rows.ravel(), cols.ravel())),
                                        shape=(grid.n_cells, space.n_scalar)))

    @property
    def H(self) -> tuple[float, float]:
        return self.grid.cell_size

    @property
    def n_cells(self) -> int:
        return self.grid.n_cells

    def _split(self, coeffs: np.ndarray) -> np.ndarray:
        coeffs = np.asarray(coeffs, dtype=float)
        n = self.space.n_scalar
        if coeffs.ndim != 1 or coeffs.shape[0] % n or coeffs.shape[0] // n not in (1, 2):
            raise ObservationError(f"coefficient vector of length {coeffs.shape[0]} does not match the fine space")
        return coeffs.reshape(-1, n)

    def observe(self, coeffs: np.ndarray) -> np.ndarray:
        """Cell averages; shape (n_cells,) for scalars, (2, n_cells) for vectors."""
        parts = self._split(coeffs)
        out = np.stack([self.P @ p for p in parts])
        return out[0] if len(parts) == 1 else out

    def project_function(self, f, t=None) -> np.ndarray:
        """Cell averages of a closed-form field ``f(x, y[, t])`` using fine quadrature."""
        x, y = self._points[..., 0], self._points[..., 1]
        vals = np.asarray(f(x, y) if t is None else f(x, y, t), dtype=float)
        vals = np.broadcast_to(vals, vals.shape[:-2] + x.shape) if vals.ndim >= 2 else np.broadcast_to(vals, x.shape)
        flat = vals.reshape(-1, x.size)
        avgs = [np.bincount(self.cell_of_qp.ravel(), weights=self._jxw.ravel() * v,
                            minlength=self.n_cells) / self.W for v in flat]
        return np.stack(avgs) if vals.ndim == 3 else avgs[0]

    def normal_matrix(self) -> sp.csr_matrix:
        """``P^T W P`` on the scalar fine space."""
        return finalize(self.P.T @ sp.diags(self.W) @ self.P)

    def adjoint_weighted(self, averages: np.ndarray) -> np.ndarray:
        """``P^T W d`` on the scalar fine space."""
        return self.P.T @ (self.W * np.asarray(averages, dtype=float))

    def coarse_l2_sq(self, averages: np.ndarray) -> float:
        """Squared L2 norm of a piecewise-constant coarse field (summed over components)."""
        a = np.atleast_2d(averages)
        return float(np.sum(self.W * a * a))


def build_observation_operator(space: FESpace, H: float) -> ObservationOperator:
    h = space.mesh.h_max
    if H < h / np.sqrt(2) - 1e-14:
        warnings.warn(f"coarse size H={H:g} is finer than the mesh (h={h:g})", stacklevel=2)
    return ObservationOperator(space, CoarseGrid.covering(space.mesh, H))


def observe(op: ObservationOperator, coeffs: np.ndarray) -> np.ndarray:
    return op.observe(coeffs)


class ObservationStream:
    """Coarse data of the reference state; level ``n`` is the data at ``t0 + (n+1) dt``."""

    kind = "abstract"

    def __init__(self, dt: float, t0: float = 0.0, n_levels: int | None = None):
        self.dt = float(dt)
        self.t0 = float(t0)
        self.n_levels = n_levels

    def time(self, n: int) -> float:
        return self.t0 + (n + 1) * self.dt

    def _check(self, n: int):
        if n < 0 or (self.n_levels is not None and n >= self.n_levels):
            raise ObservationError(f"time level {n} not available (stream has {self.n_levels} levels)")

    def sample(self, n: int) -> dict:
        raise NotImplementedError


class ManufacturedStream(ObservationStream):
    """Projections of a closed-form solution, evaluated on demand."""

    kind = "manufactured"

    def __init__(self, solution, op_u: ObservationOperator, op_T: ObservationOperator,
                 op_S: ObservationOperator, dt: float, t0: float = 0.0, n_levels: int | None = None):
        super().__init__(dt, t0, n_levels)
        self.solution = solution
        self.op_u, self.op_T, self.op_S = op_u, op_T, op_S

    def sample(self, n: int) -> dict:
        self._check(n)
        t = self.time(n)
        return {
            "u": self.op_u.project_function(self.solution.u, t),
            "T": self.op_T.project_function(self.solution.T, t),
            "S": self.op_S.project_function(self.solution.S, t),
        }


_MAGIC = b"CDAOBS1\x00"
_HEADER = struct.Struct("<8s2d2d2q q 2d")


class ReferenceStream(ObservationStream):
    """Stored projections of a reference (DNS) run."""

    kind = "reference"

    def __init__(self, grid: CoarseGrid, dt: float, t0: float = 0.0, capacity: int = 0):
        super().__init__(dt, t0, 0)
        self.grid = grid
        nc = grid.n_cells
        self._data = np.zeros((max(capacity, 0), 4, nc))

    def append(self, u_avg: np.ndarray, T_avg: np.ndarray, S_avg: np.ndarray) -> None:
        n = self.n_levels
        if n == len(self._data):
            grow = np.zeros((max(16, len(self._data)),) + self._data.shape[1:])
            self._data = np.concatenate([self._data, grow])
        self._data[n, :2] = u_avg
        self._data[n, 2] = T_avg
        self._data[n, 3] = S_avg
        self.n_levels = n + 1

    @property
    def data(self) -> np.ndarray:
        """Array (n_levels, 4, n_cells): u1, u2, T, S averages."""
        return self._data[: self.n_levels]

    def sample(self, n: int) -> dict:
        self._check(n)
        d = self._data[n]
        return {"u": d[:2].copy(), "T": d[2].copy(), "S": d[3].copy()}

    def save(self, path) -> None:
        g = self.grid
        header = _HEADER.pack(_MAGIC, *g.cell_size, *g.origin, *g.counts, self.n_levels, self.t0, self.dt)
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(np.ascontiguousarray(self.data, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "ReferenceStream":
        raw = Path(path).read_bytes()
        if len(raw) < _HEADER.size:
            raise ObservationError(f"{path}: truncated observation record")
        magic, hx, hy, ox, oy, nx, ny, n_levels, t0, dt = _HEADER.unpack_from(raw)
        if magic != _MAGIC:
            raise ObservationError(f"{path}: not an observation record")
        grid = CoarseGrid((ox, oy), (hx, hy), (int(nx), int(ny)))
        body = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
        expected = n_levels * 4 * grid.n_cells
        if body.size != expected:
            raise ObservationError(f"{path}: expected {expected} values, found {body.size}")
        stream = cls(grid, dt, t0, capacity=n_levels)
        stream._data[:] = body.reshape(n_levels, 4, grid.n_cells)
        stream.n_levels = int(n_levels)
        return stream


def sample_reference(stream: ObservationStream, n: int) -> dict:
    """Coarse data for (u, T, S) at the stream's time level ``n`` (t = t0 + (n+1) dt)."""
    return stream.sample(n)
