"""Assembly and Newton solution of the augmented branch-point system

    residual(u, lam)            = 0
    jacobian_u(u, lam) @ phi    = 0
    h1_inner(phi, phi) - 1      = 0

whose isolated solutions are simple singular points of the discretized
problem, together with the eigenpair-seeded initialization that turns a
feasible pair (u~, lam~) into a converged branch-point state.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import assembly, sparse
from .mesh import TriMesh

log = logging.getLogger(__name__)


class SolveError(RuntimeError):
    pass


@dataclass
class BranchPointState:
    """Triple (u, lam, phi) solving the augmented system on a given mesh.

    At tolerance tol a valid state satisfies
        ||residual(u, lam)|| <= tol,
        ||jacobian_u(u, lam) @ phi|| <= tol,
        |h1_norm(phi)^2 - 1| <= tol.
    """

    u: np.ndarray
    lam: float
    phi: np.ndarray

    def copy(self) -> "BranchPointState":
        return BranchPointState(self.u.copy(), float(self.lam), self.phi.copy())


def ms_residual(mesh: TriMesh, state: BranchPointState) -> np.ndarray:
    """Stacked residual over free vertices, length 2*n_free + 1."""
    free = assembly.free_indices(mesh)
    r1 = assembly.residual(mesh, state.u, state.lam)[free]
    J = assembly.jacobian_u(mesh, state.u, state.lam)
    r2 = (J @ state.phi)[free]
    r3 = assembly.h1_inner(mesh, state.phi, state.phi) - 1.0
    return np.concatenate([r1, r2, [r3]])


def ms_jacobian(mesh: TriMesh, state: BranchPointState) -> sp.csc_matrix:
    """Bordered Newton matrix of the augmented system.

    Block rows are (u-equation, phi-equation, normalization) against block
    columns (du, dlam, dphi):

        [ F_u          F_lam        0              ]
        [ F_uu[.]phi   F_ulam phi   F_u            ]
        [ 0            0            2 (phi, .)_H1  ]

    assembled on the free-vertex block. The matrix stays nonsingular at
    simple singular points even though F_u alone is singular there.
    """
    free = assembly.free_indices(mesh)
    J = assembly.jacobian_u(mesh, state.u, state.lam)[free][:, free]
    Flam = assembly.residual_lambda(mesh, state.u)[free]
    D2 = assembly.second_derivative_matrix(mesh, state.u, state.phi)[free][:, free]
    mixed = assembly.mixed_derivative_action(mesh, state.phi)[free]
    norm_row = (2.0 * (assembly.h1_gram(mesh) @ state.phi))[free]

    nf = len(free)
    col = lambda v: sp.csc_matrix(v.reshape(nf, 1))
    row = lambda v: sp.csc_matrix(v.reshape(1, nf))
    zero_nf = sp.csc_matrix((nf, nf))
    return sp.bmat(
        [
            [J, col(Flam), zero_nf],
            [D2, col(mixed), J],
            [row(np.zeros(nf)), sp.csc_matrix((1, 1)), row(norm_row)],
        ],
        format="csc",
    )


def _pack(mesh: TriMesh, state: BranchPointState) -> np.ndarray:
    free = assembly.free_indices(mesh)
    return np.concatenate([state.u[free], [state.lam], state.phi[free]])


def _unpack(mesh: TriMesh, x: np.ndarray) -> BranchPointState:
    free = assembly.free_indices(mesh)
    nf = len(free)
    n = mesh.num_vertices
    u = np.zeros(n)
    phi = np.zeros(n)
    u[free] = x[:nf]
    phi[free] = x[nf + 1 :]
    return BranchPointState(u, float(x[nf]), phi)


def _fix_sign(state: BranchPointState) -> BranchPointState:
    """Make the largest-magnitude phi coefficient positive (gauge fixing)."""
    k = int(np.argmax(np.abs(state.phi)))
    if state.phi[k] < 0.0:
        state.phi = -state.phi
    return state


def ms_solve(
    mesh: TriMesh,
    guess: BranchPointState,
    tol: float = 1e-9,
    maxit: int = 30,
) -> BranchPointState:
    """Newton on the augmented system with a monolithic bordered solve.

    Backtracking halves the step (at most 8 times) whenever the stacked
    residual norm would increase. The phi sign is gauge-fixed on return,
    so re-solving a converged state reproduces it.
    """
    u = np.asarray(guess.u, dtype=float).copy()
    phi = np.asarray(guess.phi, dtype=float).copy()
    if u.shape != (mesh.num_vertices,) or phi.shape != (mesh.num_vertices,):
        raise ValueError("guess fields are not sized to the mesh")
    if assembly.h1_norm(mesh, phi) < 0.1:
        raise SolveError("guess phi is (nearly) zero; the normalization row would be degenerate")
    dirichlet = assembly.dirichlet_mask(mesh)
    u[dirichlet] = 0.0
    phi[dirichlet] = 0.0
    state = BranchPointState(u, float(guess.lam), phi)

    x = _pack(mesh, state)
    r = ms_residual(mesh, state)
    rnorm = np.linalg.norm(r)
    for _ in range(maxit):
        if rnorm <= tol:
            return _fix_sign(state)
        A = ms_jacobian(mesh, state)
        try:
            step = sparse.Factorization(A).solve(-r)
        except sparse.SingularMatrixError as err:
            raise SolveError(
                f"singular bordered matrix (degenerate or multiple singular point): {err}"
            ) from err
        alpha = 1.0
        for _ in range(8):
            trial = _unpack(mesh, x + alpha * step)
            r_trial = ms_residual(mesh, trial)
            if np.linalg.norm(r_trial) < rnorm:
                break
            alpha *= 0.5
        else:
            trial = _unpack(mesh, x + alpha * step)
            r_trial = ms_residual(mesh, trial)
        state = trial
        x = x + alpha * step
        r = r_trial
        rnorm = np.linalg.norm(r)
    if rnorm <= tol:
        return _fix_sign(state)
    raise SolveError(f"no convergence in {maxit} iterations (residual {rnorm:.3e})")


def ms_initialize(
    mesh: TriMesh,
    u_seed: np.ndarray,
    lam_seed: float,
    n: int = 5,
    tol: float = 1e-9,
    maxit: int = 30,
    seed_residual_tol: float = 1e-8,
) -> BranchPointState:
    """Locate the branch point nearest a feasible pair (u_seed, lam_seed).

    Computes the n smallest-magnitude eigenpairs of
        jacobian_u(u_seed, lam_seed) x = mu M x
    on the free block, runs ms_solve from each H1-normalized eigenvector,
    and selects among the converged candidates the one minimizing
    ||u_seed - u_i||_H1. Ties are broken by |lam_i - lam_seed|, then by
    smaller lam_i. All candidates are logged.
    """
    if n < 1:
        raise ValueError(f"need n >= 1 eigenpair seeds, got {n}")
    u_seed = np.asarray(u_seed, dtype=float)
    res0 = assembly.residual(mesh, u_seed, lam_seed)
    if np.linalg.norm(res0) > seed_residual_tol:
        raise SolveError(
            f"seed pair is not feasible: ||residual|| = {np.linalg.norm(res0):.3e} "
            f"> {seed_residual_tol:g}"
        )
    free = assembly.free_indices(mesh)
    J = assembly.jacobian_u(mesh, u_seed, lam_seed)[free][:, free].tocsr()
    M, _ = assembly.gram_matrices(mesh)
    Mf = M[free][:, free].tocsr()
    pairs = sparse.smallest_eigenpairs(J, Mf, n)

    candidates: list[BranchPointState] = []
    for i, (mu, x) in enumerate(pairs):
        phi = np.zeros(mesh.num_vertices)
        phi[free] = x
        phi /= assembly.h1_norm(mesh, phi)
        guess = BranchPointState(u_seed.copy(), float(lam_seed), phi)
        try:
            state = ms_solve(mesh, guess, tol=tol, maxit=maxit)
        except SolveError as err:
            log.info("seed %d (mu = %.4e): failed (%s)", i, mu, err)
            continue
        log.info(
            "seed %d (mu = %.4e): converged to lam = %.8f, ||u_seed - u|| = %.3e",
            i, mu, state.lam, assembly.h1_norm(mesh, u_seed - state.u),
        )
        candidates.append(state)
    if not candidates:
        raise SolveError(f"all {n} eigenpair-seeded solves failed")

    dist = np.array([assembly.h1_norm(mesh, u_seed - c.u) for c in candidates])
    # Candidates at (numerically) minimal distance are ties; among them pick
    # the one nearest the seed parameter, then the smaller parameter.
    tie = 1e-6 * (1.0 + dist.min())
    tied = [i for i in range(len(candidates)) if dist[i] <= dist.min() + tie]
    best = min(tied, key=lambda i: (abs(candidates[i].lam - lam_seed), candidates[i].lam))
    return candidates[best]
