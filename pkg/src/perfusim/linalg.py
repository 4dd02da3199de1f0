"""Iterative sparse solvers.

``solve_sparse`` wraps SciPy's Krylov methods (CG for symmetric matrices,
restarted GMRES otherwise) with a diagonal preconditioner and verifies the
true residual on exit. ``ReusedFactorization`` serves sequences of slowly
changing matrices, as in time stepping: an LU factorization of an earlier
matrix preconditions GMRES and is refreshed only when it stops paying off.
"""

from __future__ import annotations

import logging

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fem import SparseSystem

logger = logging.getLogger(__name__)


class SolverError(RuntimeError):
    """Linear solver breakdown or iteration limit."""

    def __init__(self, message, residual=float("nan"), iterations=0):
        super().__init__(f"{message} (relative residual {residual:.3e} after {iterations} iterations)")
        self.residual = residual
        self.iterations = iterations


def is_symmetric(A, rtol=1e-14) -> bool:
    A = sp.csr_matrix(A)
    diff = abs(A - A.T)
    scale = abs(A).max() if A.nnz else 0.0
    return diff.nnz == 0 or diff.max() <= rtol * scale


def _jacobi(A):
    d = A.diagonal().copy()
    d[d == 0.0] = 1.0
    inv = 1.0 / d
    return spla.LinearOperator(A.shape, matvec=lambda x: inv * x, dtype=float)


def krylov_solve(A, b, tol=1e-10, max_iter=10_000, method="auto", preconditioner="jacobi", x0=None, restart=50):
    """Solve ``A x = b``; returns ``(x, info)``.

    ``info`` holds ``iterations``, ``residual`` (true relative residual) and
    ``method``. Raises :class:`SolverError` if ``tol`` is not reached.
    """
    A = sp.csr_matrix(A)
    b = np.asarray(b, float)
    nb = np.linalg.norm(b)
    if nb == 0.0:
        return np.zeros_like(b), {"iterations": 0, "residual": 0.0, "method": "trivial"}
    if method == "auto":
        method = "cg" if is_symmetric(A) else "gmres"
    if preconditioner == "jacobi":
        M = _jacobi(A)
    elif preconditioner is None or preconditioner == "none":
        M = None
    else:
        M = preconditioner
    count = [0]

    def tick(*_):
        count[0] += 1

    x = np.zeros_like(b) if x0 is None else np.array(x0, float)
    res = np.linalg.norm(A @ x - b) / nb
    # restart until the true residual meets tol; guards against drift of the
    # recursively updated residual
    while res > tol and count[0] < max_iter:
        budget = max_iter - count[0]
        if method == "cg":
            x, flag = spla.cg(A, b, x0=x, rtol=tol, atol=0.0, maxiter=budget, M=M, callback=tick)
        elif method == "gmres":
            x, flag = spla.gmres(
                A, b, x0=x, rtol=tol, atol=0.0, restart=restart, maxiter=max(1, budget // restart + 1),
                M=M, callback=tick, callback_type="pr_norm",
            )
        else:
            raise ValueError(f"unknown method {method!r}")
        if flag < 0 or not np.all(np.isfinite(x)):
            raise SolverError(f"{method} breakdown", float("nan"), count[0])
        new_res = np.linalg.norm(A @ x - b) / nb
        if flag > 0 and new_res >= res:
            res = new_res
            break
        res = new_res
    if res > tol:
        raise SolverError(f"{method} did not converge", res, count[0])
    return x, {"iterations": count[0], "residual": res, "method": method}


def solve_sparse(system: SparseSystem, tol=1e-10, max_iter=10_000, method="auto", preconditioner="jacobi"):
    """Solve a :class:`SparseSystem` to relative residual ``tol``.

    Constraints are applied first (identity rows, column elimination), so
    symmetric matrices stay symmetric and are handled by CG.
    """
    s = system.applied()
    x, _ = krylov_solve(s.matrix, s.rhs, tol=tol, max_iter=max_iter, method=method, preconditioner=preconditioner)
    return x


class ReusedFactorization:
    """GMRES preconditioned by an LU factorization of an earlier matrix.

    A new factorization is computed when none exists, on request, or when
    the preconditioned solve needs more than ``max_lagged_iterations``.
    """

    def __init__(self, tol=1e-10, max_lagged_iterations=20, restart=40):
        self.tol = tol
        self.max_lagged_iterations = max_lagged_iterations
        self.restart = restart
        self._lu = None
        self._A = None
        self._fresh = False
        self.factorizations = 0
        self.last_iterations = 0

    def invalidate(self):
        self._lu = None

    def set_matrix(self, A, refactor=False):
        self._A = sp.csc_matrix(A)
        self._fresh = False
        if refactor or self._lu is None:
            self._factor()

    def _factor(self):
        self._lu = spla.splu(self._A, permc_spec="COLAMD")
        self.factorizations += 1
        self._fresh = True

    def solve(self, b, x0=None):
        b = np.asarray(b, float)
        nb = np.linalg.norm(b)
        if nb == 0.0:
            self.last_iterations = 0
            return np.zeros_like(b)
        if self._fresh:
            x = self._refine(self._lu.solve(b), b, nb)
            if x is not None:
                self.last_iterations = 0
                return x
        M = spla.LinearOperator(self._A.shape, matvec=self._lu.solve, dtype=float)
        try:
            x, info = krylov_solve(
                self._A, b, tol=self.tol, max_iter=self.max_lagged_iterations,
                method="gmres", preconditioner=M, x0=x0, restart=self.restart,
            )
            self.last_iterations = info["iterations"]
            return x
        except SolverError:
            logger.debug("reused factorization exhausted, refactoring")
        self._factor()
        x = self._refine(self._lu.solve(b), b, nb)
        if x is None:
            res = np.linalg.norm(self._A @ self._lu.solve(b) - b) / nb
            raise SolverError("direct solve failed to reach tolerance", res, 0)
        self.last_iterations = 0
        return x

    def solve_many(self, B, X0=None, max_sweeps=8):
        """Solve ``A X = B`` for several right-hand sides (columns).

        Preconditioned Richardson sweeps ``X += LU^-1 (B - A X)`` share one
        multi-column back-substitution; columns that stall fall back to
        :meth:`solve`.
        """
        B = np.asarray(B, float)
        if B.ndim == 1:
            return self.solve(B, X0)
        X = np.zeros_like(B) if X0 is None else np.array(X0, float)
        nb = np.linalg.norm(B, axis=0)
        nb[nb == 0.0] = 1.0
        R = B - self._A @ X
        res = np.linalg.norm(R, axis=0) / nb
        sweeps = 0
        while np.any(res > self.tol) and sweeps < max_sweeps:
            X = X + self._lu.solve(np.asfortranarray(R))
            R = B - self._A @ X
            new = np.linalg.norm(R, axis=0) / nb
            sweeps += 1
            if np.any((new > self.tol) & (new > 0.5 * res)):
                res = new
                break
            res = new
        total = sweeps
        for k in np.flatnonzero(res > self.tol):
            X[:, k] = self.solve(B[:, k], X[:, k])
            total = max(total, sweeps + self.last_iterations)
        self.last_iterations = total
        return X

    def _refine(self, x, b, nb, steps=3):
        # a few steps of iterative refinement with the exact factorization
        for _ in range(steps + 1):
            r = b - self._A @ x
            if np.linalg.norm(r) <= self.tol * nb:
                return x
            x = x + self._lu.solve(r)
        return None
