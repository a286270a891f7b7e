"""Sparse direct solves and a generalized eigensolver for the
smallest-magnitude eigenpairs.

The factorization is a sparse LU (reusable across right-hand sides); the
eigensolver is shift-invert subspace iteration at shift zero with
B-orthonormalization and a Rayleigh-Ritz projection.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class SingularMatrixError(RuntimeError):
    def __init__(self, message: str, row: int | None = None):
        super().__init__(message)
        self.row = row


class EigenConvergenceError(RuntimeError):
    def __init__(self, message: str, residuals: np.ndarray | None = None):
        super().__init__(message)
        self.residuals = residuals


class Factorization:
    """Sparse LU of a square matrix, reusable for many solves.

    Solves are deterministic and read-only once constructed, so a single
    factorization may serve concurrent solves.
    """

    PIVOT_FLOOR = 1e-14  # relative to the largest pivot

    def __init__(self, A: sp.spmatrix, check_pivots: bool = True):
        A = sp.csc_matrix(A)
        n, m = A.shape
        if n != m:
            raise ValueError(f"matrix must be square, got {A.shape}")
        csr = A.tocsr()
        row_counts = np.diff(csr.indptr)
        empty = np.nonzero(row_counts == 0)[0]
        if empty.size:
            raise SingularMatrixError(
                f"row {int(empty[0])} is structurally empty", row=int(empty[0])
            )
        try:
            self._lu = spla.splu(A)
        except RuntimeError as err:
            raise SingularMatrixError(f"factorization failed: {err}") from err
        # check_pivots=False admits consistent systems whose matrix carries a
        # benign near-null direction (e.g. adjoint solves at a converged
        # symmetric branch point); callers then verify the solve residual.
        if check_pivots:
            diag = np.abs(self._lu.U.diagonal())
            floor = self.PIVOT_FLOOR * diag.max() if diag.size else 0.0
            tiny = np.nonzero(diag <= floor)[0]
            if tiny.size:
                k = int(tiny[0])
                orig = int(np.nonzero(self._lu.perm_r == k)[0][0]) if k < n else k
                raise SingularMatrixError(
                    f"numerically singular pivot at elimination step {k} (row {orig})", row=orig
                )
        self.shape = A.shape

    def solve(self, b: np.ndarray, trans: str = "N") -> np.ndarray:
        return self._lu.solve(np.asarray(b, dtype=float), trans=trans)


def factor_solve(A: sp.spmatrix, b: np.ndarray) -> np.ndarray:
    """Solve A x = b by sparse LU. For repeated solves keep a Factorization."""
    return Factorization(A).solve(b)


def matrix_norm_estimate(A: sp.spmatrix) -> float:
    """Cheap upper bound on ||A|| (max absolute row sum)."""
    return float(abs(A).sum(axis=1).max())


def _b_orthonormalize(V: np.ndarray, B: sp.spmatrix) -> np.ndarray:
    """Return V' spanning the same space with V'^T B V' = I."""
    G = V.T @ (B @ V)
    G = 0.5 * (G + G.T)
    # Cholesky with a small eigenvalue cleanup fallback for near-rank-deficient V.
    try:
        L = scipy.linalg.cholesky(G, lower=True)
        return scipy.linalg.solve_triangular(L, V.T, lower=True).T
    except scipy.linalg.LinAlgError:
        w, Q = scipy.linalg.eigh(G)
        keep = w > 1e-12 * w.max()
        return (V @ Q[:, keep]) / np.sqrt(w[keep])


def smallest_eigenpairs(
    A: sp.spmatrix,
    B: sp.spmatrix,
    n: int,
    tol: float = 1e-8,
    maxit: int = 300,
    seed: int = 0,
) -> list[tuple[float, np.ndarray]]:
    """The n smallest-|mu| solutions of A x = mu B x.

    A must be symmetric and nonsingular, B symmetric positive definite.
    Shift-invert subspace iteration at shift 0: iterate V <- A^{-1} B V,
    B-orthonormalize, then solve the projected Rayleigh-Ritz problem.
    Returned eigenvectors are B-normalized and sorted by |mu| ascending;
    each satisfies ||A x - mu B x|| <= tol * ||x||.
    """
    A = sp.csr_matrix(A)
    B = sp.csr_matrix(B)
    dim = A.shape[0]
    if n < 1:
        raise ValueError(f"need n >= 1 eigenpairs, got {n}")
    if n > dim:
        raise ValueError(f"requested {n} eigenpairs from a {dim}-dimensional problem")
    m = min(max(2 * n, n + 4), dim)

    lu = Factorization(A)
    rng = np.random.default_rng(seed)
    V = rng.standard_normal((dim, m))
    theta = np.zeros(m)
    residuals = np.full(n, np.inf)
    for _ in range(maxit):
        W = np.column_stack([lu.solve(col) for col in (B @ V).T])
        W = _b_orthonormalize(W, B)
        Ap = W.T @ (A @ W)
        Ap = 0.5 * (Ap + Ap.T)
        theta, Y = scipy.linalg.eigh(Ap)  # B-projected Gram is identity
        order = np.argsort(np.abs(theta))
        theta = theta[order]
        V = W @ Y[:, order]
        AX = A @ V[:, :n]
        BX = B @ V[:, :n]
        residuals = np.array(
            [np.linalg.norm(AX[:, i] - theta[i] * BX[:, i]) / np.linalg.norm(V[:, i]) for i in range(n)]
        )
        if np.all(residuals <= tol):
            return [(float(theta[i]), V[:, i].copy()) for i in range(n)]
    raise EigenConvergenceError(
        f"eigensolver did not reach tol {tol:g} in {maxit} iterations "
        f"(residuals {np.array2string(residuals, precision=2)})",
        residuals=residuals,
    )
