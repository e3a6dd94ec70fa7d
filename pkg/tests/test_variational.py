import math
from types import SimpleNamespace

import numpy as np
import pytest

from plasmapair.mesh import build_mesh, DomainShape
from plasmapair.solver import (
    BracketError,
    ProblemParams,
    contraction_threshold,
    newton_solve,
    zero_coupling_state,
)
from plasmapair.variational import (
    DensityPair,
    MinimizeError,
    alpha_from_mass,
    coercivity_gate,
    coordinate_minimize,
    free_energy,
)

DISK_TORSION = 1.0 / (8.0 * math.pi)


class TestCoercivityGate:
    def test_symmetric_linear_2d(self):
        cert = coercivity_gate(ProblemParams(1.0, 1.0, N=2))
        assert cert.ok
        assert cert.lhs == pytest.approx(1.0)
        assert cert.rhs == pytest.approx(2.0)

    def test_mixed_3d(self):
        # subcriticality side: 1/(p1+1) + 1/(p2+1) = 7/12 > 1/2, equivalently
        # the recorded sides 1/r1 + 1/r2 = 2 - 7/12 < N/(N-1)
        cert = coercivity_gate(ProblemParams(2.0, 3.0, N=3))
        assert cert.ok
        assert cert.lhs == pytest.approx(2.0 - (1.0 / 3.0 + 1.0 / 4.0))
        assert cert.rhs == pytest.approx(1.5)

    def test_boundary_case_false(self):
        # exactly on the critical hyperbola: 1/(p+1) + 1/(p+1) = (N-2)/(N-1)
        # at p = N/(N-2); the gate must be strict
        p = SimpleNamespace(p1=2.0, p2=2.0, N=4)
        cert = coercivity_gate(p)
        assert not cert.ok
        assert cert.lhs == pytest.approx(cert.rhs)


class TestFreeEnergy:
    def test_zero_coupling_uniform(self, square16):
        prm = ProblemParams(1.0, 2.0)
        ones = np.ones(square16.num_nodes)
        j = free_energy(square16, prm, 0.0, DensityPair(ones, ones.copy()))
        assert j == pytest.approx(1.0 / prm.r1 + 1.0 / prm.r2, abs=1e-12)

    def test_uniform_on_disk(self, disk96):
        prm = ProblemParams(1.0, 1.0)
        ones = np.ones(disk96.num_nodes)
        for lam in (0.5, 2.0):
            j = free_energy(disk96, prm, lam, DensityPair(ones, ones.copy()))
            exact = 1.0 - lam * DISK_TORSION
            assert abs(j - exact) / abs(exact) <= 1e-3

    def test_interaction_symmetric(self, square16, rng):
        prm = ProblemParams(1.0, 1.0)
        a = rng.random(square16.num_nodes)
        b = rng.random(square16.num_nodes)
        ia = square16.integrate(a * square16.green_apply(b))
        ib = square16.integrate(b * square16.green_apply(a))
        assert abs(ia - ib) <= 1e-10


class TestAlphaFromMass:
    def test_zero_coupling(self, square16):
        prm = ProblemParams(1.0, 1.0)
        psi = square16.green_apply(np.ones(square16.num_nodes))
        assert alpha_from_mass(square16, prm, 0.0, psi, 1) == 1.0

    def test_linear_coefficient(self, square16):
        # for p = 1 the constraint is affine: alpha = 1 - lam * int G[1]
        prm = ProblemParams(1.0, 1.0)
        psi = square16.green_apply(np.ones(square16.num_nodes))
        t = square16.integrate(psi)
        for lam in (0.05, 0.2, 0.8):
            a = alpha_from_mass(square16, prm, lam, psi, 1)
            assert a == pytest.approx(1.0 - lam * t, abs=1e-11)

    def test_translation_equivariance(self, square16):
        prm = ProblemParams(1.0, 2.0)
        psi = square16.green_apply(np.ones(square16.num_nodes))
        lam, c = 0.7, 0.31
        a = alpha_from_mass(square16, prm, lam, psi, 2)
        a_shift = alpha_from_mass(square16, prm, lam, psi + c / lam, 2)
        assert a_shift == pytest.approx(a - c, abs=1e-10)

    def test_mass_solved(self, square16):
        from plasmapair.nonlinearity import positive_part_pow
        prm = ProblemParams(2.0, 3.0)
        psi = square16.green_apply(np.ones(square16.num_nodes))
        lam = 1.3
        a = alpha_from_mass(square16, prm, lam, psi, 1)
        mass = square16.integrate(positive_part_pow(a + lam * psi, prm.p1))
        assert mass == pytest.approx(1.0, abs=1e-10)


class TestCoordinateMinimize:
    def test_zero_coupling_one_sweep(self, square16, rng):
        prm = ProblemParams(1.0, 2.0)
        raw = rng.random(square16.num_nodes) + 0.2
        init = DensityPair(raw / square16.integrate(raw), np.ones(square16.num_nodes))
        st, dens, rep = coordinate_minimize(square16, prm, 0.0, init)
        assert np.max(np.abs(dens.rho1 - 1.0)) <= 1e-12
        assert np.max(np.abs(dens.rho2 - 1.0)) <= 1e-12
        assert st.alpha1 == 1.0 and st.alpha2 == 1.0

    def test_j_trace_non_increasing(self, square16):
        prm = ProblemParams(1.0, 1.0)
        lam0, _ = contraction_threshold(square16, prm)
        _, _, rep = coordinate_minimize(square16, prm, lam0)
        diffs = np.diff(rep.j_trace)
        assert (diffs <= 1e-12).all()
        assert rep.converged

    @pytest.mark.parametrize("p", [(1.0, 1.0), (2.0, 3.0)])
    def test_matches_newton(self, square16, p):
        prm = ProblemParams(*p)
        lam0, _ = contraction_threshold(square16, prm)
        lam = 0.8 * lam0
        st_var, _, _ = coordinate_minimize(square16, prm, lam)
        st_new = newton_solve(square16, prm, lam, zero_coupling_state(square16))
        assert abs(st_var.alpha1 - st_new.alpha1) <= 1e-6
        assert abs(st_var.alpha2 - st_new.alpha2) <= 1e-6
        assert np.max(np.abs(st_var.psi1 - st_new.psi1)) <= 1e-6
        assert np.max(np.abs(st_var.psi2 - st_new.psi2)) <= 1e-6

    def test_gate_enforced(self, square16):
        bad = SimpleNamespace(p1=2.0, p2=2.0, N=4, r1=1.5, r2=1.5)
        with pytest.raises(MinimizeError):
            coordinate_minimize(square16, bad, 0.5)

    def test_invalid_initial_rejected(self, square16):
        prm = ProblemParams(1.0, 1.0)
        bad = DensityPair(-np.ones(square16.num_nodes), np.ones(square16.num_nodes))
        with pytest.raises(ValueError):
            coordinate_minimize(square16, prm, 0.1, bad)

    def test_omega0_condition_clean(self, square16):
        prm = ProblemParams(1.0, 1.0)
        _, _, rep = coordinate_minimize(square16, prm, 0.5)
        assert rep.omega0_violation <= 1e-10


@pytest.fixture(scope="module")
def lam_grid_minimizers(square16):
    prm = ProblemParams(1.0, 2.0)
    lam0, _ = contraction_threshold(square16, prm)
    lams = np.linspace(0.0, lam0, 5)
    out = []
    for lam in lams:
        st, dens, rep = coordinate_minimize(square16, prm, float(lam))
        out.append((float(lam), st, dens, rep.j_final))
    return prm, out


class TestVariationalIdentities:
    def test_free_energy_identity(self, square16, lam_grid_minimizers):
        # F = gamma + lam * (p1 p2 - 1)/((p1+1)(p2+1)) * E at every minimizer
        prm, data = lam_grid_minimizers
        coef = (prm.p1 * prm.p2 - 1) / ((prm.p1 + 1) * (prm.p2 + 1))
        for lam, st, dens, j in data:
            e = square16.integrate(dens.rho1 * square16.green_apply(dens.rho2))
            gamma = prm.p1 * st.alpha1 / (prm.p1 + 1) + prm.p2 * st.alpha2 / (prm.p2 + 1)
            assert j == pytest.approx(gamma + lam * coef * e, abs=1e-8)

    def test_two_point_concavity(self, square16, lam_grid_minimizers):
        prm, data = lam_grid_minimizers
        lams = [d[0] for d in data]
        js = [d[3] for d in data]
        lam_a, lam_b = lams[0], lams[-1]
        for t in (0.25, 0.5, 0.75):
            lam_t = t * lam_a + (1 - t) * lam_b
            st, dens, rep = coordinate_minimize(square16, prm, lam_t)
            assert rep.j_final >= t * js[0] + (1 - t) * js[-1] - 1e-10

    def test_envelope_inequalities(self, square16, lam_grid_minimizers):
        # the minimizer of one coupling is admissible at the other, so its
        # energy evaluated there dominates that coupling's minimum
        prm, data = lam_grid_minimizers
        lam_a, _, dens_a, j_a = data[1]
        lam_b, _, dens_b, j_b = data[3]
        j_cross_ab = free_energy(square16, prm, lam_a, dens_b)
        j_cross_ba = free_energy(square16, prm, lam_b, dens_a)
        assert j_cross_ab >= j_a - 1e-12
        assert j_cross_ba >= j_b - 1e-12
        # and the resulting slope bounds bracket -E between the minimizers
        e_a = square16.integrate(dens_a.rho1 * square16.green_apply(dens_a.rho2))
        e_b = square16.integrate(dens_b.rho1 * square16.green_apply(dens_b.rho2))
        slope = (j_b - j_a) / (lam_b - lam_a)
        assert -e_b - 1e-10 <= slope <= -e_a + 1e-10
