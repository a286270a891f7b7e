import numpy as np
import pytest

from bifshape import assembly, sparse
from bifshape import mesh as msh
from bifshape import moore_spence as ms

J01 = 2.404826  # first zero of the Bessel function J0
J11 = 3.831706
J31 = 6.380162


@pytest.fixture(scope="session")
def disk01():
    return msh.gen_unit_disk(0.1)


@pytest.fixture(scope="session")
def disk005():
    return msh.gen_unit_disk(0.05)


@pytest.fixture(scope="session")
def disk02():
    return msh.gen_unit_disk(0.2)


@pytest.fixture(scope="session")
def square01():
    return msh.gen_rounded_square(2.0, 0.1, 0.08)


def unit_eigenpairs(mesh, n, seed=0, tol=1e-10):
    """H1-normalized eigenfunctions of the trivial-branch linearization,
    i.e. generalized eigenpairs of (0.25 K, M) on the free block."""
    free = assembly.free_indices(mesh)
    M, K = assembly.gram_matrices(mesh)
    Kf = (assembly.DIFFUSION * K)[free][:, free].tocsr()
    Mf = M[free][:, free].tocsr()
    out = []
    for mu, x in sparse.smallest_eigenpairs(Kf, Mf, n, seed=seed, tol=tol):
        v = np.zeros(mesh.num_vertices)
        v[free] = x
        out.append((mu, v / assembly.h1_norm(mesh, v)))
    return out


@pytest.fixture(scope="session")
def disk01_eig(disk01):
    return unit_eigenpairs(disk01, 1)[0]


@pytest.fixture(scope="session")
def disk01_state(disk01):
    return ms.ms_initialize(disk01, np.zeros(disk01.num_vertices), 1.3, n=3)


def two_triangle_square():
    """Unit square split along the diagonal (0, 0)-(1, 1)."""
    return msh.TriMesh(
        vertices=np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]),
        triangles=np.array([[0, 1, 2], [0, 2, 3]]),
        boundary_edges=np.array([[0, 1], [1, 2], [2, 3], [3, 0]]),
        boundary_tags=["outer"] * 4,
    )
