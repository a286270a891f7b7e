import numpy as np
import pytest

from bifshape import assembly as asm
from bifshape import moore_spence as ms
from bifshape import sparse as bsp

from conftest import J01, unit_eigenpairs


def _random_state(mesh, seed=0, lam=1.9):
    rng = np.random.default_rng(seed)
    d = asm.dirichlet_mask(mesh)
    u = 0.4 * rng.standard_normal(mesh.num_vertices)
    phi = 0.6 * rng.standard_normal(mesh.num_vertices)
    u[d] = 0.0
    phi[d] = 0.0
    return ms.BranchPointState(u, lam, phi)


class TestMsResidual:
    def test_discrete_eigenpair_is_solution(self, disk01):
        mu, v = unit_eigenpairs(disk01, 1)[0]
        state = ms.BranchPointState(np.zeros(disk01.num_vertices), mu, v)
        r = ms.ms_residual(disk01, state)
        assert np.linalg.norm(r) <= 1e-8

    def test_zero_phi_normalization_block(self, disk01):
        state = ms.BranchPointState(
            np.zeros(disk01.num_vertices), 1.0, np.zeros(disk01.num_vertices)
        )
        r = ms.ms_residual(disk01, state)
        assert r[-1] == pytest.approx(-1.0)
        assert np.linalg.norm(r[:-1]) == 0.0

    def test_no_kernel_at_lambda_zero(self, disk01):
        _, v = unit_eigenpairs(disk01, 1)[0]
        state = ms.BranchPointState(np.zeros(disk01.num_vertices), 0.0, v)
        r = ms.ms_residual(disk01, state)
        free = asm.free_indices(disk01)
        nf = len(free)
        _, K = asm.gram_matrices(disk01)
        expected = (asm.DIFFUSION * (K @ v))[free]
        assert np.allclose(r[nf : 2 * nf], expected, atol=1e-12)
        assert np.linalg.norm(expected) > 0.01

    def test_length(self, disk01):
        state = _random_state(disk01)
        nf = len(asm.free_indices(disk01))
        assert ms.ms_residual(disk01, state).shape == (2 * nf + 1,)


class TestMsJacobian:
    def test_fd_directional(self, disk02):
        state = _random_state(disk02, seed=5)
        A = ms.ms_jacobian(disk02, state)
        free = asm.free_indices(disk02)
        nf = len(free)
        rng = np.random.default_rng(6)

        def stacked(x):
            st = ms.BranchPointState(state.u.copy(), float(x[nf]), state.phi.copy())
            st.u = state.u.copy()
            st.u[free] = x[:nf]
            st.phi = state.phi.copy()
            st.phi[free] = x[nf + 1 :]
            return ms.ms_residual(disk02, st)

        x0 = np.concatenate([state.u[free], [state.lam], state.phi[free]])
        for _ in range(10):
            w = rng.standard_normal(2 * nf + 1)
            errs = []
            eps = [1e-3, 1e-4]
            for e in eps:
                fd = (stacked(x0 + e * w) - stacked(x0 - e * w)) / (2 * e)
                errs.append(np.linalg.norm(fd - A @ w))
            assert errs[1] < 2e-2 * errs[0] + 1e-12  # second-order decay

    def test_phi_row_u_block_vanishes_at_origin(self, disk02):
        _, v = unit_eigenpairs(disk02, 1)[0]
        state = ms.BranchPointState(np.zeros(disk02.num_vertices), 1.3, v)
        A = ms.ms_jacobian(disk02, state).toarray()
        nf = len(asm.free_indices(disk02))
        assert np.abs(A[nf : 2 * nf, :nf]).max() == 0.0

    def test_norm_row_lambda_entry_zero(self, disk02):
        state = _random_state(disk02, seed=7)
        A = ms.ms_jacobian(disk02, state)
        nf = len(asm.free_indices(disk02))
        assert A[2 * nf, nf] == 0.0


class TestMsSolve:
    def test_disk_first_branch_point(self, disk005):
        state = ms.ms_initialize(disk005, np.zeros(disk005.num_vertices), 1.3, n=5)
        exact = 0.25 * J01**2
        assert abs(state.lam - exact) / exact < 0.01

    def test_rounded_square_first_mode(self, square01):
        state = ms.ms_initialize(square01, np.zeros(square01.num_vertices), 1.1, n=3)
        exact = np.pi**2 / 8.0  # perfect-square value; fillets shift it up a bit
        assert abs(state.lam - exact) / exact < 0.05

    def test_invariants_at_convergence(self, disk01_state, disk01):
        st = disk01_state
        assert np.linalg.norm(asm.residual(disk01, st.u, st.lam)) <= 1e-9
        J = asm.jacobian_u(disk01, st.u, st.lam)
        assert np.linalg.norm((J @ st.phi)[asm.free_indices(disk01)]) <= 1e-9
        assert abs(asm.h1_inner(disk01, st.phi, st.phi) - 1.0) <= 1e-9

    def test_discrete_exactness(self, disk01, disk01_state):
        # For u = 0 the augmented system reduces to the discrete eigenproblem.
        mu, _ = unit_eigenpairs(disk01, 1)[0]
        assert asm.h1_norm(disk01, disk01_state.u) <= 1e-9
        assert abs(disk01_state.lam - mu) <= 1e-8

    def test_zero_phi_guess_rejected(self, disk01):
        guess = ms.BranchPointState(
            np.zeros(disk01.num_vertices), 1.3, np.zeros(disk01.num_vertices)
        )
        with pytest.raises(ms.SolveError, match="phi"):
            ms.ms_solve(disk01, guess)

    def test_sign_fix_idempotent(self, disk01, disk01_state):
        again = ms.ms_solve(disk01, disk01_state)
        assert abs(again.lam - disk01_state.lam) <= 1e-10
        assert asm.h1_norm(disk01, again.phi - disk01_state.phi) <= 1e-10
        assert disk01_state.phi[np.argmax(np.abs(disk01_state.phi))] > 0

    def test_bordered_matrix_factorizable_at_convergence(self, disk01, disk01_state):
        # F_u is singular at the branch point, yet the bordered system still
        # factorizes; for the symmetric pitchfork the adjoint-consistent
        # solve stays accurate even though one pivot is at machine level.
        A = ms.ms_jacobian(disk01, disk01_state)
        f = bsp.Factorization(A, check_pivots=False)
        nf = len(asm.free_indices(disk01))
        rhs = np.zeros(2 * nf + 1)
        rhs[nf] = 1.0
        psi = f.solve(rhs, trans="T")
        assert np.linalg.norm(A.T @ psi - rhs) < 1e-9 * max(np.linalg.norm(psi), 1.0)


class TestMsInitialize:
    def test_selects_nearest_in_lambda_among_trivial_roots(self, disk005):
        # At seed 3.5 both the 1.4458 and 3.6705 branch points root at u = 0;
        # the eigenvalues may swap order, so the nearer-in-lambda one wins.
        state = ms.ms_initialize(disk005, np.zeros(disk005.num_vertices), 3.5, n=5)
        exact = 0.25 * 3.831706**2
        assert abs(state.lam - exact) / exact < 0.02

    def test_n_zero_rejected(self, disk01):
        with pytest.raises(ValueError):
            ms.ms_initialize(disk01, np.zeros(disk01.num_vertices), 1.3, n=0)

    def test_infeasible_seed_rejected(self, disk01):
        bad = np.ones(disk01.num_vertices)
        bad[asm.dirichlet_mask(disk01)] = 0.0
        with pytest.raises(ms.SolveError, match="feasible"):
            ms.ms_initialize(disk01, bad, 1.3, n=2)

    def test_wrong_size_guess(self, disk01):
        with pytest.raises(ValueError):
            ms.ms_solve(disk01, ms.BranchPointState(np.zeros(3), 1.0, np.zeros(3)))
