import numpy as np
import pytest

from bifshape import assembly as asm
from bifshape import continuation as cont

from conftest import J01


class TestNewton:
    def test_converges_to_trivial_below_first_eigenvalue(self, disk01):
        # 0 is locally unique below the first bifurcation (eigenvalue bound).
        u = cont.newton(disk01, np.zeros(disk01.num_vertices), 1.0)
        assert asm.h1_norm(disk01, u) == 0.0

    def test_deflated_collision_at_seed(self, disk01):
        # Seeding exactly on a deflated solution is a collision; below the
        # first branch there is no nontrivial solution to escape to anyway.
        with pytest.raises(cont.NewtonError):
            cont.newton(
                disk01, np.zeros(disk01.num_vertices), 1.0,
                deflation_set=(np.zeros(disk01.num_vertices),),
            )

    def test_deflated_finds_nothing_below_first_branch(self, disk01, disk01_eig):
        _, v = disk01_eig
        with pytest.raises(cont.NewtonError):
            cont.newton(disk01, 0.01 * v, 1.0, deflation_set=(np.zeros(disk01.num_vertices),))

    def test_nontrivial_solution_has_eigenfunction_sign_pattern(self, disk01, disk01_eig):
        # Plain Newton needs a seed beyond the unstable small-amplitude leg;
        # amplitudes below ~2.5 in the H1 norm fall back to the trivial
        # solution (subcritical pitchfork structure).
        _, v = disk01_eig
        u = cont.newton(disk01, 3.5 * v, 2.0)
        assert np.linalg.norm(asm.residual(disk01, u, 2.0)) <= 1e-9
        assert asm.h1_norm(disk01, u) > 1.0
        core = np.abs(v) > 0.2 * np.abs(v).max()
        assert np.all(np.sign(u[core]) == np.sign(v[core]))

    def test_deflation_prevents_reconvergence(self, disk01, disk01_eig):
        # Without deflation the seed falls straight back onto u; with u
        # deflated the solve must end anywhere but there.
        _, v = disk01_eig
        u = cont.newton(disk01, 3.5 * v, 2.0)
        same = cont.newton(disk01, 1.05 * u, 2.0)
        assert asm.h1_norm(disk01, same - u) < 1e-6
        try:
            other = cont.newton(disk01, 1.05 * u, 2.0, deflation_set=(u,))
        except cont.NewtonError:
            return
        assert asm.h1_norm(disk01, other - u) > 1e-3


@pytest.fixture(scope="module")
def disk_diagram(disk01):
    return cont.deflated_continuation(disk01, 0.0, 3.0, 0.1, max_branches=8, n_seed=3)


class TestDeflatedContinuation:
    def test_exactly_one_birth_cluster_near_first_eigenvalue(self, disk_diagram):
        births = disk_diagram.birth_values()
        assert len(births) == 1
        assert abs(births[0] - 0.25 * J01**2) / (0.25 * J01**2) < 0.01

    def test_nontrivial_branches_form_sign_pairs(self, disk_diagram, disk01):
        nontrivial = disk_diagram.nontrivial()
        assert len(nontrivial) in (2, 4)
        unpaired = list(nontrivial)
        while unpaired:
            b = unpaired.pop()
            lam, _, u = b.samples[0]
            partner = None
            for other in unpaired:
                for lam2, _, u2 in other.samples:
                    if lam2 == lam and asm.h1_norm(disk01, u + u2) < 1e-6:
                        partner = other
                        break
                if partner:
                    break
            assert partner is not None, f"branch {b.id} has no sign partner"
            unpaired.remove(partner)

    def test_z2_closure(self, disk_diagram, disk01):
        # Oddness makes -u a solution whenever u is one.
        for b in disk_diagram.nontrivial():
            lam, _, u = b.samples[-1]
            assert np.linalg.norm(asm.residual(disk01, -u, lam)) <= 1e-9

    def test_samples_reverify_residual(self, disk_diagram, disk01):
        rng = np.random.default_rng(0)
        all_samples = [s for b in disk_diagram.branches for s in b.samples]
        for k in rng.choice(len(all_samples), size=12, replace=False):
            lam, _, u = all_samples[k]
            assert np.linalg.norm(asm.residual(disk01, u, lam)) <= 1e-9

    def test_branch_zero_is_trivial(self, disk_diagram):
        b0 = disk_diagram.branches[0]
        assert b0.id == 0
        assert b0.diagnostics().max() == 0.0
        assert len(b0.samples) == 31

    def test_bad_ranges(self, disk01):
        with pytest.raises(ValueError):
            cont.deflated_continuation(disk01, 3.0, 1.0, 0.1)
        with pytest.raises(ValueError):
            cont.deflated_continuation(disk01, 0.0, 1.0, -0.1)

    def test_dilated_diagram_scales_as_inverse_square(self, disk02):
        # Branch-birth locations of the dilated disk are s^-2 times those of
        # the unit disk; check the first two distinct birth values.
        s = 1.25
        scaled = disk02.with_vertices(s * disk02.vertices)
        d_unit = cont.deflated_continuation(disk02, 0.0, 4.4, 0.2, max_branches=10, n_seed=3)
        d_scaled = cont.deflated_continuation(scaled, 0.0, 4.4 / s**2, 0.2 / s**2, max_branches=10, n_seed=3)
        b_unit = d_unit.birth_values()
        b_scaled = d_scaled.birth_values()
        assert len(b_unit) >= 2 and len(b_scaled) >= 2
        for unit_val, scaled_val in zip(b_unit[:2], b_scaled[:2]):
            assert scaled_val == pytest.approx(unit_val / s**2, rel=0.01)


class TestArclength:
    def test_trivial_branch_is_straight(self, disk01):
        br = cont.arclength_continue(disk01, np.zeros(disk01.num_vertices), 0.5, 0.1, 10)
        assert br.fold_points == []
        assert br.diagnostics().max() == 0.0
        assert np.allclose(np.diff(br.lambdas()), 0.1, atol=1e-8)

    def test_first_branch_fold(self, disk01, disk01_eig):
        _, v = disk01_eig
        u = cont.newton(disk01, 3.5 * v, 2.0)
        br = cont.arclength_continue(
            disk01, u, 2.0, -0.15, 60, amplitude_floor=0.05, lam_window=(0.5, 2.5)
        )
        assert len(br.fold_points) == 1
        lam_fold, u_fold = br.fold_points[0]
        assert lam_fold < 0.25 * J01**2
        assert np.linalg.norm(asm.residual(disk01, u_fold, lam_fold)) <= 1e-8
        # the fold is the parameter minimum of the traced curve
        assert lam_fold <= br.lambdas().min() + 1e-4

    def test_fold_localization(self, disk01, disk01_eig):
        # re-localizing at a much tighter tolerance must agree within the
        # stated 1e-4 bracket of the default run
        _, v = disk01_eig
        u = cont.newton(disk01, 3.5 * v, 2.0)
        br = cont.arclength_continue(disk01, u, 2.0, -0.15, 40, amplitude_floor=0.3)
        lam_fold, _ = br.fold_points[0]
        br2 = cont.arclength_continue(
            disk01, u, 2.0, -0.15, 40, amplitude_floor=0.3, fold_lambda_tol=1e-6
        )
        assert abs(br2.fold_points[0][0] - lam_fold) <= 1e-4

    def test_zero_ds(self, disk01):
        with pytest.raises(ValueError):
            cont.arclength_continue(disk01, np.zeros(disk01.num_vertices), 0.5, 0.0, 5)

    def test_requires_solution(self, disk01):
        bad = np.ones(disk01.num_vertices)
        bad[asm.dirichlet_mask(disk01)] = 0.0
        with pytest.raises(ValueError):
            cont.arclength_continue(disk01, bad, 0.5, 0.1, 5)

    def test_birth_estimate_from_tail(self, disk01, disk01_eig):
        mu, v = disk01_eig
        u = cont.newton(disk01, 3.5 * v, 2.0)
        br = cont.arclength_continue(
            disk01, u, 2.0, -0.15, 80, amplitude_floor=0.02, lam_window=(0.5, 2.5)
        )
        est = br.birth_estimate()
        assert est == pytest.approx(mu, abs=1e-4)


class TestDiagnosticsAndExport:
    def test_point_eval_linear_exact(self, disk02):
        # P1 interpolation reproduces linear functions pointwise.
        u = 2.0 * disk02.vertices[:, 0] - 0.5 * disk02.vertices[:, 1] + 0.25
        assert cont.point_eval(disk02, u, (0.2, -0.3)) == pytest.approx(2 * 0.2 + 0.15 + 0.25)

    def test_point_diagnostic_descriptor(self, disk02):
        u = disk02.vertices[:, 0].copy()
        val = cont.diagnostic_value(disk02, u, ("point", 0.5, 0.0))
        assert val == pytest.approx(0.5, abs=1e-12)

    def test_export_csv_schema(self, disk01, tmp_path):
        d = cont.deflated_continuation(disk01, 1.2, 1.8, 0.2, max_branches=4, n_seed=1)
        csv_path = tmp_path / "diagram.csv"
        cont.export_diagram(d, disk01, csv_path, tmp_path / "fields")
        lines = csv_path.read_text().strip().splitlines()
        assert lines[0] == "branch_id,lambda,diagnostic,is_fold"
        assert len(lines) > 1
        assert (tmp_path / "fields" / "branch_000.json").exists()
