"""Newton's method with deflation, deflated continuation over a parameter
range, pseudo-arclength path following with fold localization, and
bifurcation-diagram bookkeeping.

Deflation premultiplies the residual by prod_i(1/||u - u_i||_U^2 + 1) so
Newton cannot reconverge to known solutions; new branches are discovered by
deflated solves seeded from existing solutions and from small eigenfunction
perturbations of the trivial branch.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import assembly, sparse
from .mesh import TriMesh, mesh_checksum

log = logging.getLogger(__name__)


class NewtonError(RuntimeError):
    pass


class DeflationCollisionError(NewtonError):
    """The iterate coincides with a deflated solution."""


def _deflation(mesh, u, roots, KM):
    """Deflation factor and its u-gradient at u.

    factor = prod_i (1/||u - u_i||_U^2 + 1); exponent 2 and shift 1 are the
    standard published parameters.
    """
    m = 1.0
    dm = np.zeros_like(u)
    for r in roots:
        diff = u - r
        grad_nsq = 2.0 * (KM @ diff)
        nsq = 0.5 * float(diff @ grad_nsq)
        if nsq < 1e-20:
            raise DeflationCollisionError("iterate collides with a deflated solution")
        f = 1.0 / nsq + 1.0
        fp = -(1.0 / nsq**2) * grad_nsq
        dm = dm * f + m * fp
        m *= f
    return m, dm


def newton(
    mesh: TriMesh,
    u0: np.ndarray,
    lam: float,
    tol: float = 1e-9,
    maxit: int = 25,
    deflation_set: tuple[np.ndarray, ...] = (),
) -> np.ndarray:
    """Solve residual(u, lam) = 0 with undamped Newton steps plus
    residual-monotone backtracking (factor 1/2, at most 8 halvings).

    With a nonempty deflation set the residual is premultiplied by the
    deflation factor, so the returned solution differs from every deflated
    one; the Newton step is the plain step rescaled through the rank-one
    structure of the deflated Jacobian.
    """
    KM = assembly.h1_gram(mesh)
    u = np.asarray(u0, dtype=float).copy()
    dirichlet = assembly.dirichlet_mask(mesh)
    u[dirichlet] = 0.0

    F = assembly.residual(mesh, u, lam)
    m, dm = _deflation(mesh, u, deflation_set, KM)
    merit = m * np.linalg.norm(F)
    merit0 = merit
    history = [merit]
    for _ in range(maxit):
        if merit <= tol:
            return u
        if not np.isfinite(merit) or merit > 1e8 * (merit0 + 1.0):
            raise NewtonError(f"Newton diverged (deflated residual {merit:.3e})")
        # Hovering iterations (typical for deflated solves with no nearby
        # solution) are cut short once the merit stops improving.
        if len(history) >= 7 and history[-1] > 0.9 * history[-7]:
            raise NewtonError(f"Newton stagnated (deflated residual {merit:.3e})")
        J = assembly.jacobian_u(mesh, u, lam)
        try:
            delta = sparse.Factorization(J.tocsc()).solve(-F)
        except sparse.SingularMatrixError as err:
            raise NewtonError(f"singular Jacobian: {err}") from err
        if deflation_set:
            scale = 1.0 - float(dm @ delta) / m
            if abs(scale) < 1e-14:
                raise NewtonError("deflated Newton step degenerate")
            delta = delta / scale
        alpha = 1.0
        for _ in range(8):
            u_try = u + alpha * delta
            u_try[dirichlet] = 0.0
            F_try = assembly.residual(mesh, u_try, lam)
            m_try, dm_try = _deflation(mesh, u_try, deflation_set, KM)
            if m_try * np.linalg.norm(F_try) < merit:
                break
            alpha *= 0.5
        else:
            u_try = u + alpha * delta
            u_try[dirichlet] = 0.0
            F_try = assembly.residual(mesh, u_try, lam)
            m_try, dm_try = _deflation(mesh, u_try, deflation_set, KM)
        u, F, m, dm = u_try, F_try, m_try, dm_try
        merit = m * np.linalg.norm(F)
        history.append(merit)
    if merit <= tol:
        return u
    raise NewtonError(f"no convergence in {maxit} iterations (deflated residual {merit:.3e})")


def point_eval(mesh: TriMesh, u: np.ndarray, xy) -> float:
    """Value of the piecewise-linear field at a point inside the mesh."""
    p = np.asarray(xy, dtype=float)
    key = ("ptloc", float(p[0]), float(p[1]))
    tri = mesh.triangles
    if key not in mesh._cache:
        v = mesh.vertices
        p0, p1, p2 = v[tri[:, 0]], v[tri[:, 1]], v[tri[:, 2]]

        def cross(a, b):
            return a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]

        w0 = cross(p1 - p, p2 - p)
        w1 = cross(p2 - p, p0 - p)
        w2 = cross(p0 - p, p1 - p)
        total = w0 + w1 + w2
        inside = (w0 >= -1e-12 * total) & (w1 >= -1e-12 * total) & (w2 >= -1e-12 * total)
        hits = np.nonzero(inside)[0]
        if not hits.size:
            raise ValueError(f"point {tuple(p)} lies outside the mesh")
        k = int(hits[0])
        bary = np.array([w0[k], w1[k], w2[k]]) / total[k]
        mesh._cache[key] = (k, bary)
    k, bary = mesh._cache[key]
    return float(u[tri[k]] @ bary)


def diagnostic_value(mesh: TriMesh, u: np.ndarray, descriptor) -> float:
    """Scalar plotted on the diagram's vertical axis.

    descriptor is either "h1_norm" or ("point", x, y) for a point evaluation.
    """
    if descriptor == "h1_norm":
        return assembly.h1_norm(mesh, u)
    if isinstance(descriptor, (tuple, list)) and descriptor[0] == "point":
        return point_eval(mesh, u, descriptor[1:3])
    raise ValueError(f"unknown diagnostic descriptor {descriptor!r}")


@dataclass
class Branch:
    """One solution branch: ordered (lam, diagnostic, coefficients) samples.

    birth_hint records the trivial-branch eigenvalue crossing whose
    eigenfunction seeded the branch when that is how it was found;
    birth_refined is filled in by arclength refinement when the traced
    curve reaches the trivial branch.
    """

    id: int
    samples: list = field(default_factory=list)
    fold_points: list = field(default_factory=list)
    birth_hint: float | None = None
    birth_refined: float | None = None
    alive: bool = True

    def lambdas(self) -> np.ndarray:
        return np.array([s[0] for s in self.samples])

    def diagnostics(self) -> np.ndarray:
        return np.array([s[1] for s in self.samples])

    @staticmethod
    def _extrapolate(samples) -> float | None:
        """lam at zero amplitude, linear in amplitude^2 from the two
        smallest-amplitude samples.

        Only valid when the curve genuinely approaches the trivial branch:
        the smallest amplitude must be well below the branch maximum and the
        extrapolated stretch short compared to the sampled one, otherwise
        the quadratic fold shape would be extrapolated instead."""
        amps = np.array([s[1] for s in samples])
        if len(amps) < 2 or amps.max() <= 0:
            return None
        order = np.argsort(amps)
        a1, a2 = amps[order[0]], amps[order[1]]
        if a1 > 0.35 * amps.max() or a2 <= a1:
            return None
        if a1**2 > 2.0 * (a2**2 - a1**2):
            return None
        l1, l2 = samples[order[0]][0], samples[order[1]][0]
        slope = (l2 - l1) / (a2**2 - a1**2)
        return float(l1 - slope * a1**2)

    def birth_estimate(self) -> float | None:
        """Parameter where the branch meets the trivial branch: the refined
        arclength estimate when available, else the verified seeding
        crossing, else extrapolation of this branch's own samples."""
        if self.birth_refined is not None:
            return self.birth_refined
        if self.birth_hint is not None:
            return self.birth_hint
        return self._extrapolate(self.samples)


@dataclass
class Diagram:
    """Set of branches over a parameter range; branch 0 is the trivial one."""

    branches: list
    lam_range: tuple[float, float]
    diagnostic: object = "h1_norm"

    def nontrivial(self) -> list:
        return [b for b in self.branches if b.id != 0]

    def birth_values(self, cluster_rtol: float = 0.02) -> list[float]:
        """Distinct branch-birth parameters, clustered within cluster_rtol."""
        vals = sorted(v for b in self.nontrivial() if (v := b.birth_estimate()) is not None)
        clusters: list[list[float]] = []
        for v in vals:
            if clusters and abs(v - clusters[-1][-1]) <= cluster_rtol * max(abs(v), 1.0):
                clusters[-1].append(v)
            else:
                clusters.append([v])
        return [float(np.mean(c)) for c in clusters]


def deflated_continuation(
    mesh: TriMesh,
    lam_start: float,
    lam_end: float,
    dlam: float,
    max_branches: int = 12,
    n_seed: int = 5,
    eps_seed: float = 1e-2,
    tol: float = 1e-9,
    newton_maxit: int = 25,
    discovery_maxit: int = 20,
    diagnostic="h1_norm",
    trivial_tol: float = 1e-6,
    dedupe_tol: float = 1e-6,
) -> Diagram:
    """Sweep the parameter upward, continuing known branches and attempting
    deflated discovery solves at every step.

    Discovery seeds are the previous-step solutions of all branches plus
    +/- eps_seed times each H1-normalized eigenfunction of the trivial-branch
    linearization (those whose crossing lies in range). Per-step failures
    are logged and skipped.
    """
    if dlam <= 0.0:
        raise ValueError(f"need dlam > 0, got {dlam}")
    if lam_end < lam_start:
        raise ValueError(f"need lam_end >= lam_start, got [{lam_start}, {lam_end}]")
    n_steps = max(1, int(round((lam_end - lam_start) / dlam)))
    lams = lam_start + (lam_end - lam_start) * np.arange(n_steps + 1) / n_steps

    nv = mesh.num_vertices
    zero = np.zeros(nv)
    free = assembly.free_indices(mesh)
    M, K = assembly.gram_matrices(mesh)
    Kf = (assembly.DIFFUSION * K)[free][:, free].tocsr()
    Mf = M[free][:, free].tocsr()
    n_seed_eff = min(n_seed, len(free))
    crossings = []
    if n_seed_eff >= 1:
        for mu, x in sparse.smallest_eigenpairs(Kf, Mf, n_seed_eff):
            v = np.zeros(nv)
            v[free] = x
            v /= assembly.h1_norm(mesh, v)
            if mu <= lams[-1]:
                crossings.append((float(mu), v))
    log.info("trivial-branch crossings in range: %s", [round(c[0], 4) for c in crossings])

    trivial = Branch(id=0)
    diagram = Diagram(branches=[trivial], lam_range=(float(lams[0]), float(lams[-1])), diagnostic=diagnostic)
    current: dict[int, np.ndarray] = {}

    for lam in lams:
        lam = float(lam)
        trivial.samples.append((lam, diagnostic_value(mesh, zero, diagnostic), zero))
        previous = dict(current)
        current = {0: zero}

        # Continue every live nontrivial branch from its previous solution.
        for b in diagram.nontrivial():
            if not b.alive or b.id not in previous:
                continue
            try:
                u = newton(mesh, previous[b.id], lam, tol=tol, maxit=newton_maxit)
            except NewtonError as err:
                log.info("branch %d ends at lam = %.4f (%s)", b.id, lam, err)
                b.alive = False
                continue
            if assembly.h1_norm(mesh, u) < trivial_tol:
                log.info("branch %d merges into the trivial branch at lam = %.4f", b.id, lam)
                b.alive = False
                continue
            duplicate = False
            for other_id, other_u in current.items():
                if other_id != 0 and assembly.h1_norm(mesh, u - other_u) < dedupe_tol * (
                    1.0 + assembly.h1_norm(mesh, u)
                ):
                    duplicate = True
                    break
            if duplicate:
                log.info("branch %d coincides with another branch at lam = %.4f", b.id, lam)
                b.alive = False
                continue
            b.samples.append((lam, diagnostic_value(mesh, u, diagnostic), u))
            current[b.id] = u

        # Deflated discovery from previous solutions and tangent seeds; a
        # tangent seed carries its crossing as the candidate birth value.
        seeds: list[tuple[np.ndarray, float | None, np.ndarray | None]] = []
        for b in diagram.nontrivial():
            if b.id in previous:
                seeds.append((previous[b.id], None, None))
        for mu, v in crossings:
            seeds.append((eps_seed * v, mu, v))
            seeds.append((-eps_seed * v, mu, v))

        for seed, hint, mode in seeds:
            if len(diagram.branches) - 1 >= max_branches:
                break
            roots = tuple(current.values())
            try:
                u = newton(mesh, seed, lam, tol=tol, maxit=discovery_maxit, deflation_set=roots)
            except NewtonError:
                continue
            if assembly.h1_norm(mesh, u) < trivial_tol:
                continue
            known = any(
                assembly.h1_norm(mesh, u - other) < dedupe_tol * (1.0 + assembly.h1_norm(mesh, u))
                for bid, other in current.items()
                if bid != 0
            )
            if known:
                continue
            # The solve may land in a different mode family than its seed;
            # the crossing is attributed only when the solution projects
            # dominantly onto the seeding eigenfunction.
            if mode is not None:
                proj = abs(assembly.h1_inner(mesh, u, mode))
                if proj < 0.5 * assembly.h1_norm(mesh, u):
                    hint = None
            branch = Branch(id=len(diagram.branches), birth_hint=hint)
            branch.samples.append((lam, diagnostic_value(mesh, u, diagnostic), u))
            diagram.branches.append(branch)
            current[branch.id] = u
            log.info("new branch %d discovered at lam = %.4f (hint %s)", branch.id, lam, hint)

    return diagram


def _arc_norm(mesh, du, dlam) -> float:
    return float(np.sqrt(assembly.h1_inner(mesh, du, du) + dlam**2))


def _arc_corrector(mesh, u_pred, lam_pred, t_u, t_lam, tol, maxit):
    """Newton corrector for F(u, lam) = 0 with the secant-orthogonality row
    <t_u, u - u_pred>_U + t_lam (lam - lam_pred) = 0."""
    free = assembly.free_indices(mesh)
    KM = assembly.h1_gram(mesh)
    u = u_pred.copy()
    lam = float(lam_pred)
    row_u = (KM @ t_u)[free]
    for _ in range(maxit):
        F = assembly.residual(mesh, u, lam)[free]
        orth = assembly.h1_inner(mesh, t_u, u - u_pred) + t_lam * (lam - lam_pred)
        res = np.concatenate([F, [orth]])
        if np.linalg.norm(res) <= tol:
            return u, lam
        J = assembly.jacobian_u(mesh, u, lam)[free][:, free]
        Flam = assembly.residual_lambda(mesh, u)[free]
        A = sp.bmat(
            [[J, sp.csc_matrix(Flam.reshape(-1, 1))], [sp.csc_matrix(row_u.reshape(1, -1)), sp.csc_matrix([[t_lam]])]],
            format="csc",
        )
        step = sparse.Factorization(A).solve(-res)
        u = u.copy()
        u[free] += step[:-1]
        lam += float(step[-1])
        if not np.isfinite(lam) or abs(lam) > 1e8:
            break
    raise NewtonError("arclength corrector did not converge")


def arclength_continue(
    mesh: TriMesh,
    u0: np.ndarray,
    lam0: float,
    ds: float,
    n_steps: int,
    tol: float = 1e-9,
    maxit: int = 25,
    diagnostic="h1_norm",
    fold_lambda_tol: float = 1e-4,
    fold_slope_tol: float = 1e-3,
    amplitude_floor: float = 0.0,
    lam_window: tuple[float, float] | None = None,
) -> Branch:
    """Pseudo-arclength continuation with a secant predictor.

    The sign of ds selects the initial parameter direction; |ds| is the
    step in the combined metric (H1 on u, Euclidean on lam). A fold is
    flagged whenever the secant slope dlam/ds changes sign between
    consecutive steps, then localized by shrinking steps until the lambda
    bracket is below fold_lambda_tol and the secant slope below
    fold_slope_tol. On corrector divergence the step is halved up to 8
    times before aborting with the partial branch.
    """
    if ds == 0.0:
        raise ValueError("ds must be nonzero")
    u0 = np.asarray(u0, dtype=float)
    r0 = np.linalg.norm(assembly.residual(mesh, u0, lam0))
    if r0 > 10.0 * tol:
        raise ValueError(f"(u0, lam0) does not solve the problem (residual {r0:.3e})")

    free = assembly.free_indices(mesh)
    branch = Branch(id=-1)
    branch.samples.append((float(lam0), diagnostic_value(mesh, u0, diagnostic), u0.copy()))

    # Natural tangent at the start: J du/dlam = -F_lam, direction sign(ds).
    J = assembly.jacobian_u(mesh, u0, lam0)[free][:, free].tocsc()
    Flam = assembly.residual_lambda(mesh, u0)[free]
    du = np.zeros(mesh.num_vertices)
    du[free] = sparse.Factorization(J).solve(-Flam)
    scale = _arc_norm(mesh, du, 1.0)
    t_u, t_lam = du / scale, 1.0 / scale
    if ds < 0.0:
        t_u, t_lam = -t_u, -t_lam
    step = abs(ds)

    u, lam = u0.copy(), float(lam0)
    prev_slope = None
    for _ in range(n_steps):
        accepted = False
        for _ in range(9):
            try:
                u_new, lam_new = _arc_corrector(
                    mesh, u + step * t_u, lam + step * t_lam, t_u, t_lam, tol, maxit
                )
                accepted = True
                break
            except (NewtonError, sparse.SingularMatrixError):
                step *= 0.5
        if not accepted:
            log.info("arclength aborted at lam = %.4f after step halvings", lam)
            break

        d_u, d_lam = u_new - u, lam_new - lam
        arc = _arc_norm(mesh, d_u, d_lam)
        slope = d_lam / arc if arc > 0 else 0.0
        if prev_slope is not None and slope * prev_slope < 0.0:
            fold_u, fold_lam = _bisect_fold(
                mesh, u, lam, t_u, t_lam, step, prev_slope, tol, maxit,
                fold_lambda_tol, fold_slope_tol,
            )
            branch.fold_points.append((float(fold_lam), fold_u))
            log.info("fold localized at lam = %.6f", fold_lam)

        # Secant tangent for the next predictor.
        t_u, t_lam = d_u / arc, d_lam / arc
        u, lam = u_new, lam_new
        prev_slope = slope
        branch.samples.append((float(lam), diagnostic_value(mesh, u, diagnostic), u.copy()))
        step = min(step * 1.2, abs(ds))

        if amplitude_floor > 0.0 and assembly.h1_norm(mesh, u) < amplitude_floor:
            break
        if lam_window is not None and not (lam_window[0] <= lam <= lam_window[1]):
            break
    return branch


def _bisect_fold(mesh, u_a, lam_a, t_u, t_lam, step, incoming_slope, tol, maxit, lam_tol, slope_tol):
    """Localize the parameter turning point between two arclength samples.

    Ternary search for the lambda extremum of the corrected curve
    parametrized by the predictor step length s in [0, step]; the incoming
    slope sign tells whether lambda peaks (fold from above) or bottoms out.
    """
    sense = 1.0 if incoming_slope > 0.0 else -1.0

    def corrected(s):
        if s == 0.0:
            return u_a, lam_a
        return _arc_corrector(mesh, u_a + s * t_u, lam_a + s * t_lam, t_u, t_lam, tol, maxit)

    lo, hi = 0.0, step
    best = (u_a, lam_a)
    for _ in range(80):
        m1 = lo + (hi - lo) / 3.0
        m2 = hi - (hi - lo) / 3.0
        u1, l1 = corrected(m1)
        u2, l2 = corrected(m2)
        if sense * l1 < sense * l2:
            lo, best = m1, (u2, l2)
        else:
            hi, best = m2, (u1, l1)
        gap = abs(l2 - l1)
        arc = _arc_norm(mesh, u2 - u1, l2 - l1)
        if gap <= lam_tol and (arc == 0.0 or gap / arc <= slope_tol):
            break
    return best[0], best[1]


def refine_with_arclength(
    mesh: TriMesh,
    diagram: Diagram,
    ds: float,
    n_steps: int = 60,
    tol: float = 1e-9,
) -> None:
    """Complement a swept diagram with backward arclength traces.

    From each nontrivial branch's lowest-amplitude sample the branch is
    traced toward decreasing parameter: the trace passes the branch's fold
    (recorded on the branch) and, when it climbs back to the trivial
    solution, yields a refined branch-birth estimate from the vanishing
    amplitude tail. Failures are logged and skipped.
    """
    lo, hi = diagram.lam_range
    span = max(hi - lo, 1e-12)
    window = (lo - 0.5 * span, hi + 0.1 * span)
    for b in diagram.nontrivial():
        if not b.samples:
            continue
        amps = b.diagnostics()
        k = int(np.argmin(amps))
        lam_k, _, u_k = b.samples[k]
        floor = 0.02 * max(amps.max(), 1.0)
        try:
            arc = arclength_continue(
                mesh, u_k, lam_k, -abs(ds), n_steps, tol=tol,
                diagnostic=diagram.diagnostic,
                amplitude_floor=floor, lam_window=window,
            )
        except (NewtonError, ValueError, sparse.SingularMatrixError) as err:
            log.info("arclength refinement of branch %d skipped: %s", b.id, err)
            continue
        for lam_f, u_f in arc.fold_points:
            known = any(abs(lam_f - l0) < 1e-6 for l0, _ in b.fold_points)
            if not known:
                b.fold_points.append((lam_f, u_f))
        tail = [s for s in arc.samples if s[1] < 0.5 * max(amps.max(), 1e-12)]
        est = Branch._extrapolate(tail) if len(tail) >= 2 else None
        if est is not None:
            b.birth_refined = est


def export_diagram(diagram: Diagram, mesh: TriMesh, csv_path, fields_dir=None) -> None:
    """Write the diagram as CSV (branch_id, lambda, diagnostic, is_fold).

    When fields_dir is given, each branch's coefficient vectors are written
    to one JSON file there, keyed by the mesh checksum.
    """
    checksum = mesh_checksum(mesh)
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["branch_id", "lambda", "diagnostic", "is_fold"])
        for b in diagram.branches:
            rows = [(lam, diag, 0) for lam, diag, _ in b.samples]
            rows += [
                (lam, diagnostic_value(mesh, u, diagram.diagnostic), 1) for lam, u in b.fold_points
            ]
            for lam, diag, is_fold in sorted(rows):
                writer.writerow([b.id, f"{lam:.12g}", f"{diag:.12g}", is_fold])
    if fields_dir is not None:
        import os

        os.makedirs(fields_dir, exist_ok=True)
        for b in diagram.branches:
            payload = {
                "branch": b.id,
                "mesh_checksum": checksum,
                "birth_hint": b.birth_hint,
                "samples": [
                    {"lambda": lam, "diagnostic": diag, "coefficients": u.tolist()}
                    for lam, diag, u in b.samples
                ],
                "folds": [
                    {"lambda": lam, "coefficients": u.tolist()} for lam, u in b.fold_points
                ],
            }
            with open(os.path.join(fields_dir, f"branch_{b.id:03d}.json"), "w") as fh:
                json.dump(payload, fh, sort_keys=True)
