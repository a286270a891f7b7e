"""P1 finite-element assembly for the cubic-quintic Allen-Cahn residual

    -0.25 * lap(u) - lam*u - u^3 + u^5 = 0,   u = 0 on the outer boundary,

together with every derivative the Newton, branch-point and shape-gradient
machinery needs, H1 inner products, and the analytic derivative of the
augmented residual with respect to vertex coordinates.

Fields are flat coefficient vectors of nodal values (one per mesh vertex).
Dirichlet handling is symmetric elimination: identity rows and columns on
all outer-boundary vertices, so every assembled operator stays symmetric
where the weak form is. Matrices K (stiffness) and M (mass) use closed-form
element matrices; nonlinear terms use a 7-point triangle rule exact for
polynomials of degree 5. Assembly order is fixed, so results are bitwise
reproducible run to run.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .mesh import TriMesh

DIFFUSION = 0.25  # coefficient fixed by the governing equation

# Symmetric 7-point triangle quadrature, exact for degree 5. Barycentric
# points double as P1 basis values; weights sum to 1 (scaled by area).
_QW = np.array(
    [0.225]
    + [0.132394152788506] * 3
    + [0.125939180544827] * 3
)
_a1, _b1 = 0.059715871789770, 0.470142064105115
_a2, _b2 = 0.797426985353087, 0.101286507323456
_QP = np.array(
    [
        [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
        [_a1, _b1, _b1],
        [_b1, _a1, _b1],
        [_b1, _b1, _a1],
        [_a2, _b2, _b2],
        [_b2, _a2, _b2],
        [_b2, _b2, _a2],
    ]
)


class _Workspace:
    """Per-mesh geometry tables and Gram matrices, cached on the mesh."""

    def __init__(self, mesh: TriMesh):
        tri = mesh.triangles
        x = mesh.vertices[:, 0][tri]  # (m, 3)
        y = mesh.vertices[:, 1][tri]
        # b_i = y_j - y_k, c_i = x_k - x_j for (i, j, k) cyclic: the P1
        # gradient of basis i on the element is (b_i, c_i) / (2A).
        self.b = y[:, [1, 2, 0]] - y[:, [2, 0, 1]]
        self.c = x[:, [2, 0, 1]] - x[:, [1, 2, 0]]
        self.area = 0.5 * (
            (x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0])
            - (x[:, 2] - x[:, 0]) * (y[:, 1] - y[:, 0])
        )
        self.tri = tri
        n = mesh.num_vertices
        rows = np.repeat(tri, 3, axis=1).ravel()
        cols = np.tile(tri, (1, 3)).ravel()
        self._ij = (rows, cols)

        ke = (
            self.b[:, :, None] * self.b[:, None, :] + self.c[:, :, None] * self.c[:, None, :]
        ) / (4.0 * self.area)[:, None, None]
        me = (self.area / 12.0)[:, None, None] * (np.ones((3, 3)) + np.eye(3))
        self.K = sp.csr_matrix((ke.ravel(), self._ij), shape=(n, n))
        self.M = sp.csr_matrix((me.ravel(), self._ij), shape=(n, n))
        self.KM = (self.K + self.M).tocsr()

        self.dirichlet = mesh.boundary_vertex_mask("outer")
        self.free = np.nonzero(~self.dirichlet)[0]
        self.free_corner = (~self.dirichlet).astype(float)[tri]  # (m, 3)
        keep = sp.diags((~self.dirichlet).astype(float))
        self.ident_dirichlet = sp.diags(self.dirichlet.astype(float)).tocsr()
        self.K_bc = (keep @ self.K @ keep).tocsr()
        self.M_bc = (keep @ self.M @ keep).tocsr()

    def scatter_matrix(self, elem: np.ndarray) -> sp.csr_matrix:
        n = len(self.dirichlet)
        return sp.csr_matrix((elem.ravel(), self._ij), shape=(n, n))

    def scatter_vector(self, elem: np.ndarray) -> np.ndarray:
        n = len(self.dirichlet)
        return np.bincount(self.tri.ravel(), weights=elem.ravel(), minlength=n)


def workspace(mesh: TriMesh) -> _Workspace:
    if "assembly" not in mesh._cache:
        mesh._cache["assembly"] = _Workspace(mesh)
    return mesh._cache["assembly"]


def dirichlet_mask(mesh: TriMesh) -> np.ndarray:
    """True on vertices where the solution is constrained to zero."""
    return workspace(mesh).dirichlet


def free_indices(mesh: TriMesh) -> np.ndarray:
    return workspace(mesh).free


def gram_matrices(mesh: TriMesh) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """(M, K): mass and stiffness over the full vertex set, exact for P1."""
    ws = workspace(mesh)
    return ws.M, ws.K


def h1_inner(mesh: TriMesh, a: np.ndarray, b: np.ndarray) -> float:
    """Full H1 inner product a^T (K + M) b."""
    return float(a @ (workspace(mesh).KM @ b))


def h1_gram(mesh: TriMesh) -> sp.csr_matrix:
    """The H1 Gram matrix K + M over the full vertex set."""
    return workspace(mesh).KM


def h1_norm(mesh: TriMesh, a: np.ndarray) -> float:
    return float(np.sqrt(max(h1_inner(mesh, a, a), 0.0)))


def _check_field(mesh: TriMesh, u: np.ndarray, name: str = "field") -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if u.shape != (mesh.num_vertices,):
        raise ValueError(f"{name} has shape {u.shape}, expected ({mesh.num_vertices},)")
    return u


def _quad_values(ws: _Workspace, u: np.ndarray) -> np.ndarray:
    """Values of a nodal field at the 7 quadrature points, shape (m, 7)."""
    return u[ws.tri] @ _QP.T


def residual(mesh: TriMesh, u: np.ndarray, lam: float) -> np.ndarray:
    """Weak residual paired with every nodal test function.

    Entry i is the integral of
        0.25 grad(u).grad(psi_i) - lam*u*psi_i - u^3*psi_i + u^5*psi_i
    for free vertices; constrained entries are set to u_i (identity rows).
    """
    ws = workspace(mesh)
    u = _check_field(mesh, u, "u")
    out = DIFFUSION * (ws.K @ u) - lam * (ws.M @ u)
    uq = _quad_values(ws, u)
    uq2 = uq * uq
    fq = (uq2 * uq2 - uq2) * uq  # -u^3 + u^5; lam-term handled through M above
    elem = (ws.area[:, None] * (fq * _QW)) @ _QP
    out += ws.scatter_vector(elem)
    out[ws.dirichlet] = u[ws.dirichlet]
    return out


def residual_lambda(mesh: TriMesh, u: np.ndarray) -> np.ndarray:
    """Derivative of the residual in lam: -(M u) on free entries, else 0."""
    ws = workspace(mesh)
    u = _check_field(mesh, u, "u")
    out = -(ws.M @ u)
    out[ws.dirichlet] = 0.0
    return out


def jacobian_u(mesh: TriMesh, u: np.ndarray, lam: float) -> sp.csr_matrix:
    """Derivative of the residual in u.

    Free block entries: 0.25 grad(psi_j).grad(psi_i)
                        - (lam + 3u^2 - 5u^4) psi_j psi_i,
    Dirichlet rows and columns replaced by identity (symmetric elimination,
    applied here by masking element contributions before scattering).
    """
    ws = workspace(mesh)
    u = _check_field(mesh, u, "u")
    uq = _quad_values(ws, u)
    uq2 = uq * uq
    cq = (5.0 * uq2 - 3.0) * uq2  # -3u^2 + 5u^4
    w = ws.area[:, None] * (cq * _QW)  # (m, 7)
    elem = np.einsum("mq,qi,qj->mij", w, _QP, _QP)
    elem *= ws.free_corner[:, :, None] * ws.free_corner[:, None, :]
    A = DIFFUSION * ws.K_bc - lam * ws.M_bc + ws.scatter_matrix(elem) + ws.ident_dirichlet
    return A.tocsr()


def second_derivative_matrix(mesh: TriMesh, u: np.ndarray, phi: np.ndarray) -> sp.csr_matrix:
    """u-derivative of the action jacobian_u(u, lam) @ phi.

    Entries: integral of (-6u + 20u^3) phi psi_j psi_i; Dirichlet rows zeroed.
    """
    ws = workspace(mesh)
    u = _check_field(mesh, u, "u")
    phi = _check_field(mesh, phi, "phi")
    uq = _quad_values(ws, u)
    pq = _quad_values(ws, phi)
    cq = (20.0 * (uq * uq) - 6.0) * uq * pq  # -6u + 20u^3
    w = ws.area[:, None] * (cq * _QW)
    elem = np.einsum("mq,qi,qj->mij", w, _QP, _QP)
    elem *= ws.free_corner[:, :, None]  # zero Dirichlet rows
    return ws.scatter_matrix(elem)


def mixed_derivative_action(mesh: TriMesh, phi: np.ndarray) -> np.ndarray:
    """lam-derivative of jacobian_u(u, lam) @ phi: -(M phi) on free entries."""
    return residual_lambda(mesh, phi)


def _field_b(ws: _Workspace, F: np.ndarray) -> np.ndarray:
    """Sum F_i b_i per element: 2A times the x-derivative of the P1 field."""
    return np.einsum("mi,mi->m", F[ws.tri], ws.b)


def _field_c(ws: _Workspace, F: np.ndarray) -> np.ndarray:
    return np.einsum("mi,mi->m", F[ws.tri], ws.c)


def coordinate_gradient(
    mesh: TriMesh,
    u: np.ndarray,
    lam: float,
    phi: np.ndarray,
    adjoint: np.ndarray,
) -> np.ndarray:
    """Derivative of adjoint^T R(u, lam, phi; X) in the vertex coordinates X.

    R stacks the residual, the Jacobian action on phi, and the H1
    normalization of phi, restricted to free vertices; `adjoint` is ordered
    (psi_u, psi_phi, psi_ell) with length 2*n_free + 1. Every element
    integral is differentiated analytically through the element area and
    the P1 basis gradients; quadrature-point values of nodal fields are
    mesh-independent, so only those two enter. Entries at fixed vertices
    are zeroed. Returns an (n, 2) vertex field.
    """
    ws = workspace(mesh)
    u = _check_field(mesh, u, "u")
    phi = _check_field(mesh, phi, "phi")
    adjoint = np.asarray(adjoint, dtype=float)
    nf = len(ws.free)
    if adjoint.shape != (2 * nf + 1,):
        raise ValueError(f"adjoint has shape {adjoint.shape}, expected ({2 * nf + 1},)")
    n = mesh.num_vertices
    wu = np.zeros(n)
    wu[ws.free] = adjoint[:nf]
    wp = np.zeros(n)
    wp[ws.free] = adjoint[nf : 2 * nf]
    wl = float(adjoint[-1])

    # Quadrature (area-scaled later): value integrand paired with the adjoint.
    uq = _quad_values(ws, u)
    pq = _quad_values(ws, phi)
    wuq = _quad_values(ws, wu)
    wpq = _quad_values(ws, wp)
    uq2 = uq * uq
    sq = (
        (-lam + (uq2 * uq2 - uq2)) * uq * wuq
        - (lam + (3.0 - 5.0 * uq2) * uq2) * pq * wpq
        + wl * pq * pq
    )
    value = sq @ _QW  # (m,)

    # Gradient integrand: with Ba = sum_i a_i b_i and Ca = sum_i a_i c_i,
    # A * grad(a).grad(w) = (Ba*Bw + Ca*Cw) / (4A).
    Bu, Cu = _field_b(ws, u), _field_c(ws, u)
    Bp, Cp = _field_b(ws, phi), _field_c(ws, phi)
    Bwu, Cwu = _field_b(ws, wu), _field_c(ws, wu)
    Bwp, Cwp = _field_b(ws, wp), _field_c(ws, wp)
    P = DIFFUSION * (Bu * Bwu + Cu * Cwu) + DIFFUSION * (Bp * Bwp + Cp * Cwp) + wl * (Bp**2 + Cp**2)

    def dB(F):  # dBa/dy_i per element corner, shape (m, 3)
        Ft = F[ws.tri]
        return Ft[:, [2, 0, 1]] - Ft[:, [1, 2, 0]]

    def dC(F):  # dCa/dx_i
        Ft = F[ws.tri]
        return Ft[:, [1, 2, 0]] - Ft[:, [2, 0, 1]]

    dP_dy = (
        DIFFUSION * (dB(u) * Bwu[:, None] + Bu[:, None] * dB(wu))
        + DIFFUSION * (dB(phi) * Bwp[:, None] + Bp[:, None] * dB(wp))
        + wl * 2.0 * Bp[:, None] * dB(phi)
    )
    dP_dx = (
        DIFFUSION * (dC(u) * Cwu[:, None] + Cu[:, None] * dC(wu))
        + DIFFUSION * (dC(phi) * Cwp[:, None] + Cp[:, None] * dC(wp))
        + wl * 2.0 * Cp[:, None] * dC(phi)
    )

    # I_e = A*value + P/(4A); dA/dx_i = b_i/2, dA/dy_i = c_i/2.
    A = ws.area
    common = (value - P / (4.0 * A**2))[:, None]
    gx = 0.5 * ws.b * common + dP_dx / (4.0 * A)[:, None]
    gy = 0.5 * ws.c * common + dP_dy / (4.0 * A)[:, None]

    out = np.zeros((n, 2))
    np.add.at(out[:, 0], ws.tri, gx)
    np.add.at(out[:, 1], ws.tri, gy)
    out[mesh.fixed_vertices] = 0.0
    return out
