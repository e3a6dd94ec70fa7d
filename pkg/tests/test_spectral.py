import math

import numpy as np
import pytest
from scipy.special import jn_zeros

from plasmapair.mesh import build_mesh, DomainShape
from plasmapair.solver import (
    ProblemParams,
    alpha_root_find,
    continue_branch,
    zero_coupling_state,
    StepControl,
)
from plasmapair.spectral import (
    EigenError,
    SpectralBoundReport,
    WeightedSpace,
    apply_C,
    check_spectral_bound,
    dense_eigen_solve,
    eigen_solve,
    sobolev_constant,
    weighted_mean,
)


@pytest.fixture(scope="module")
def space0(square16):
    prm = ProblemParams(1.0, 1.0)
    return prm, WeightedSpace.from_state(square16, prm, zero_coupling_state(square16))


@pytest.fixture(scope="module")
def space_mixed(square16):
    # p1 != p2 at positive coupling: genuinely different weights per component
    prm = ProblemParams(1.0, 2.0)
    st = alpha_root_find(square16, prm, 0.4)
    return prm, st, WeightedSpace.from_state(square16, prm, st)


class TestWeightedMean:
    def test_constant(self, square16, space_mixed):
        _, _, sp = space_mixed
        c = 3.7 * np.ones(square16.num_nodes)
        assert weighted_mean(sp, 1, c) == pytest.approx(3.7, abs=1e-12)
        assert weighted_mean(sp, 2, c) == pytest.approx(3.7, abs=1e-12)

    def test_projection_idempotent(self, square16, space_mixed, rng):
        _, _, sp = space_mixed
        for i in (1, 2):
            z = rng.standard_normal(square16.num_nodes)
            assert abs(weighted_mean(sp, i, sp.project(i, z))) <= 1e-12

    def test_plain_mean_at_zero_coupling(self, square16, space0, rng):
        _, sp = space0
        f = rng.standard_normal(square16.num_nodes)
        plain = square16.integrate(f) / square16.integrate(np.ones(square16.num_nodes))
        assert weighted_mean(sp, 1, f) == pytest.approx(plain, rel=1e-12)

    def test_degenerate_weight_rejected(self, square16):
        prm = ProblemParams(1.0, 1.0)
        with pytest.raises(ValueError):
            WeightedSpace(
                mesh=square16, p1=1.0, p2=1.0, lam=1.0,
                W1=np.zeros(square16.num_nodes), W2=np.ones(square16.num_nodes),
            )


class TestApplyC:
    def test_zero_maps_to_zero(self, square16, space0):
        _, sp = space0
        z = np.zeros(square16.num_nodes)
        out = apply_C(sp, square16, (z, z))
        assert np.all(out[0] == 0) and np.all(out[1] == 0)

    def test_output_mean_free(self, square16, space_mixed, rng):
        _, _, sp = space_mixed
        phi = (sp.project(1, rng.standard_normal(square16.num_nodes)),
               sp.project(2, rng.standard_normal(square16.num_nodes)))
        out = apply_C(sp, square16, phi)
        assert abs(sp.mean(1, out[0])) <= 1e-12
        assert abs(sp.mean(2, out[1])) <= 1e-12

    def test_rejects_non_mean_free(self, square16, space_mixed):
        _, _, sp = space_mixed
        ones = np.ones(square16.num_nodes)
        with pytest.raises(ValueError):
            apply_C(sp, square16, (ones, ones))

    def test_self_adjoint_random_pairs(self, square16, space_mixed, rng):
        _, _, sp = space_mixed
        for _ in range(25):
            phi = (sp.project(1, rng.standard_normal(square16.num_nodes)),
                   sp.project(2, rng.standard_normal(square16.num_nodes)))
            eta = (sp.project(1, rng.standard_normal(square16.num_nodes)),
                   sp.project(2, rng.standard_normal(square16.num_nodes)))
            lhs = sp.pair_inner(eta, apply_C(sp, square16, phi))
            rhs = sp.pair_inner(apply_C(sp, square16, eta), phi)
            scale = max(abs(lhs), abs(rhs), 1e-30)
            assert abs(lhs - rhs) <= 1e-9 * scale

    def test_positivity(self, square16, space_mixed, rng):
        # the operator's spectrum is +/- symmetric, so the pair quadratic
        # form is indefinite; what is positive (and what the leading
        # eigenvalue needs) is the squared form and the per-component
        # Green energies
        _, _, sp = space_mixed
        for _ in range(25):
            phi = (sp.project(1, rng.standard_normal(square16.num_nodes)),
                   sp.project(2, rng.standard_normal(square16.num_nodes)))
            out = apply_C(sp, square16, phi)
            assert sp.pair_inner(out, out) > 0
            for i, f in ((1, phi[0]), (2, phi[1])):
                p = sp.p1 if i == 1 else sp.p2
                w = sp.W1 if i == 1 else sp.W2
                g = square16.green_apply(p * w * f)
                assert sp.inner(i, f, sp.project(i, g)) > 0

    def test_spectrum_is_sign_symmetric(self, square16, space_mixed):
        # flipping the second component's sign flips C: eigenvalues pair up
        _, _, sp = space_mixed
        import scipy.linalg as sla
        spec = dense_eigen_solve(sp, square16, k=4)
        # largest positive nus must have negative partners
        M = square16.num_nodes
        w = square16.quad_weights
        Ld = square16.stiffness.toarray()
        Ginv = np.linalg.inv(Ld)
        P1 = np.eye(M) - np.outer(np.ones(M), sp.d1) / sp.m1
        P2 = np.eye(M) - np.outer(np.ones(M), sp.d2) / sp.m2
        C = np.zeros((2 * M, 2 * M))
        C[:M, M:] = P1 @ Ginv @ np.diag(w * sp.p2 * sp.W2) @ P2
        C[M:, :M] = P2 @ Ginv @ np.diag(w * sp.p1 * sp.W1) @ P1
        Mw = np.concatenate([sp.p1 * sp.d1, sp.p2 * sp.d2])
        vals = sla.eigh(0.5 * (C * Mw[:, None] + (C * Mw[:, None]).T), np.diag(Mw),
                        eigvals_only=True)
        top = np.sort(vals)[-4:][::-1]
        bottom = -np.sort(vals)[:4]
        assert np.allclose(top, bottom, rtol=1e-9)
        assert np.allclose(top, spec.nus, rtol=1e-9)


class TestEigenSolve:
    def test_matches_dense_oracle_zero_coupling(self, square16, space0):
        _, sp = space0
        it = eigen_solve(sp, square16, k=4)
        dn = dense_eigen_solve(sp, square16, k=4)
        assert np.max(np.abs(it.sigmas - dn.sigmas) / np.abs(dn.sigmas)) <= 1e-6

    def test_matches_dense_oracle_mixed(self, square16, space_mixed):
        _, _, sp = space_mixed
        it = eigen_solve(sp, square16, k=6)
        dn = dense_eigen_solve(sp, square16, k=6)
        assert np.max(np.abs(it.sigmas - dn.sigmas) / np.abs(dn.sigmas)) <= 1e-6

    def test_mu_ordering_and_consistency(self, square16, space_mixed):
        _, st, sp = space_mixed
        spec = eigen_solve(sp, square16, k=6)
        assert (np.diff(spec.mus) <= 1e-14).all()
        assert (spec.mus > 0).all()
        assert np.max(np.abs(spec.mus * (st.lam + spec.sigmas) - st.lam)) <= 1e-10
        assert (st.lam + spec.sigmas > 0).all()

    def test_residuals_small(self, square16, space_mixed):
        _, _, sp = space_mixed
        spec = eigen_solve(sp, square16, k=6)
        assert spec.residuals.max() <= 1e-7

    def test_componentwise_orthogonality(self, square16, space_mixed):
        _, _, sp = space_mixed
        spec = eigen_solve(sp, square16, k=6)
        worst = 0.0
        for a in range(6):
            for b in range(a + 1, 6):
                for i in (1, 2):
                    worst = max(worst, abs(sp.inner(i, spec.pairs[a][i - 1], spec.pairs[b][i - 1])))
        assert worst <= 1e-8

    def test_pair_normalization(self, square16, space_mixed):
        _, _, sp = space_mixed
        spec = eigen_solve(sp, square16, k=3)
        for f1, f2 in spec.pairs:
            assert sp.pair_inner((f1, f2), (f1, f2)) == pytest.approx(1.0, abs=1e-9)
            # the two components share the norm split p1 |f1|^2 = p2 |f2|^2
            assert sp.p1 * sp.norm2(1, f1) == pytest.approx(sp.p2 * sp.norm2(2, f2), rel=1e-8)

    def test_sign_normalization(self, square16, space_mixed):
        _, _, sp = space_mixed
        spec = eigen_solve(sp, square16, k=6)
        for m1, m2 in spec.field_means:
            assert m1 >= -1e-10

    def test_k_out_of_range(self, square16, space0):
        _, sp = space0
        with pytest.raises(ValueError):
            eigen_solve(sp, square16, k=0)

    def test_cluster_detection(self, square16, space0):
        # the square's symmetry makes the second eigenvalue a double cluster
        _, sp = space0
        spec = eigen_solve(sp, square16, k=4)
        groups = spec.cluster_indices(rel_tol=1e-8)
        assert any(len(g) >= 2 for g in groups)


class TestSobolev:
    def test_square_first_eigenvalue(self, square48):
        lam = sobolev_constant(square48, 2.0)
        assert abs(lam - 2 * math.pi**2) / (2 * math.pi**2) <= 0.01

    def test_disk_first_eigenvalue(self, disk48):
        j01 = jn_zeros(0, 1)[0]
        exact = math.pi * j01**2
        lam = sobolev_constant(disk48, 2.0)
        assert abs(lam - exact) / exact <= 0.01

    def test_monotone_in_t(self, square16):
        vals = [sobolev_constant(square16, t) for t in (2.0, 3.0, 4.0, 6.0)]
        assert all(a >= b - 1e-10 for a, b in zip(vals[:-1], vals[1:]))

    def test_t_below_two_rejected(self, square16):
        with pytest.raises(ValueError):
            sobolev_constant(square16, 1.5)


class TestSpectralBound:
    def test_empty_branch(self, square16):
        from plasmapair.solver import Branch
        prm = ProblemParams(1.0, 1.0)
        rep = check_spectral_bound(Branch(params=prm, mesh=square16), square16, prm)
        assert rep.checks == [] and rep.ok

    def test_zero_coupling_positive(self, square16):
        prm = ProblemParams(1.0, 1.0)
        br = continue_branch(square16, prm, 0.5, StepControl(dlam_init=0.25, dlam_max=0.25))
        rep = check_spectral_bound(br, square16, prm)
        assert rep.ok
        assert all(s > 0 for _, s, _ in rep.checks)
        assert rep.checks[0][0] == 0.0

    def test_p_below_one_not_applicable(self, square16):
        prm = ProblemParams(0.5, 0.9)
        from plasmapair.solver import Branch
        rep = check_spectral_bound(Branch(params=prm, mesh=square16), square16, prm)
        assert rep.threshold is None
