"""Sparse storage helpers and the residual-checked linear solve."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

DIRECT_TOL = 1e-10
ITERATIVE_TOL = 1e-8


class SolverError(RuntimeError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class SingularMatrixError(SolverError):
    pass


class ConvergenceError(SolverError):
    pass


@dataclass
class SolveReport:
    iterations: int
    residual: float
    wall_time: float
    backend: str = "lu"


def finalize(A) -> sp.csr_matrix:
    """Canonical CSR: duplicates summed, sorted columns, tiny entries pruned."""
    A = sp.csr_matrix(A)
    A.sum_duplicates()
    A.data[np.abs(A.data) < 1e-300] = 0.0
    A.eliminate_zeros()
    A.sort_indices()
    return A


def _check_inputs(A, b):
    if A.shape[0] != A.shape[1]:
        raise SolverError(f"matrix must be square, got {A.shape}")
    if b.shape[0] != A.shape[0]:
        raise SolverError(f"rhs length {b.shape[0]} does not match matrix size {A.shape[0]}")
    if not np.all(np.isfinite(b)) or not np.all(np.isfinite(A.data)):
        raise SolverError("NaN or Inf in linear system")


def residual_norm(A, x, b) -> float:
    return float(np.linalg.norm(b - A @ x))


def solve(A, b, tol: float | None = None, backend: str = "lu", maxiter: int = 2000,
          ordering: str = "COLAMD"):
    """Solve ``A x = b`` and return ``(x, SolveReport)``.

    The residual in the report is recomputed from ``A`` and ``x`` after the
    solve; a solve whose relative residual exceeds ``tol`` raises.
    """
    A = sp.csr_matrix(A)
    b = np.asarray(b, dtype=float)
    _check_inputs(A, b)
    if tol is None:
        tol = DIRECT_TOL if backend == "lu" else ITERATIVE_TOL
    if not 0 < tol <= 1e-2:
        raise SolverError(f"tolerance must lie in (0, 1e-2], got {tol}")
    bnorm = float(np.linalg.norm(b))
    start = time.perf_counter()

    if bnorm == 0.0:
        x = np.zeros_like(b)
        return x, SolveReport(0, 0.0, time.perf_counter() - start, backend)

    if backend == "lu":
        try:
            lu = spla.splu(A.tocsc(), permc_spec=ordering)
        except RuntimeError as exc:
            raise SingularMatrixError(str(exc)) from exc
        x = lu.solve(b)
        iterations = 0
        for _ in range(2):
            r = b - A @ x
            if np.linalg.norm(r) <= tol * bnorm:
                break
            x = x + lu.solve(r)
            iterations += 1
    elif backend == "gmres":
        try:
            ilu = spla.spilu(A.tocsc(), drop_tol=1e-6, fill_factor=20)
        except RuntimeError as exc:
            raise SingularMatrixError(str(exc)) from exc
        M = spla.LinearOperator(A.shape, ilu.solve)
        count = [0]

        def _cb(_):
            count[0] += 1

        x, info = spla.gmres(A, b, rtol=tol, atol=0.0, restart=60, maxiter=maxiter, M=M,
                             callback=_cb, callback_type="pr_norm")
        iterations = count[0]
        if info > 0:
            rep = SolveReport(iterations, residual_norm(A, x, b), time.perf_counter() - start, backend)
            raise ConvergenceError("GMRES iteration budget exhausted", rep)
    else:
        raise SolverError(f"unknown solver backend {backend!r}")

    res = residual_norm(A, x, b)
    report = SolveReport(iterations, res, time.perf_counter() - start, backend)
    if not np.all(np.isfinite(x)):
        raise SingularMatrixError("solution contains NaN or Inf", report)
    if res > tol * bnorm:
        raise ConvergenceError(f"relative residual {res / bnorm:.2e} above tolerance {tol:.1e}", report)
    return x, report
