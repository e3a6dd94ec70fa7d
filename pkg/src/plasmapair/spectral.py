"""Weighted dual-spectral structure of the linearized coupled system.

Around a nonnegative solution (alpha_i, psi_i) at coupling ``lam``, each
component carries the weight ``W_i = (alpha_i + lam*psi_i)_+^(p_i - 1)``
and the inner products

    <a, b>_i      = integral( W_i a b ),
    <phi, eta>    = p1 <phi1, eta1>_1 + p2 <phi2, eta2>_2   (pair product),
    <a>_i         = <a, 1>_i / m_i,   m_i = integral(W_i).

On mean-free pairs the compact operator

    C(phi1, phi2) = ( [G[p2 W2 phi2]]_1 , [G[p1 W1 phi1]]_2 )

is self-adjoint for the pair product ([.]_i is the weighted mean-free
projection).  Its spectrum is symmetric about zero: with S(phi1, phi2) =
(phi1, -phi2) one has C(S phi) = -S(C phi), so eigenvalues come in pairs
(+nu, -nu).  The physically meaningful half is nu > 0, which yields the
spectrum of the linearization through

    sigma_k = 1/nu_k - lam        (ascending in k),
    mu_k    = lam * nu_k = lam / (lam + sigma_k)   for lam > 0.

Because of the +/- symmetry, eigenpairs are computed from the squared
operator restricted to the first component,

    K1 = A o B,   A(g) = [G[p2 W2 g]]_1,   B(f) = [G[p1 W1 f]]_2,

which is compact, self-adjoint and positive definite in <.,.>_1; the
second components follow from phi2 = B(phi1)/nu.  This construction makes
the componentwise orthogonality of eigenfamilies exact by construction.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, TYPE_CHECKING

import numpy as np

from .mesh import DomainMesh, as_field
from .nonlinearity import positive_part_weight

if TYPE_CHECKING:  # pragma: no cover
    from .solver import ProblemParams, SolutionState, Branch

__all__ = [
    "WeightedSpace",
    "SpectralSet",
    "EigenError",
    "weighted_mean",
    "apply_C",
    "eigen_solve",
    "dense_eigen_solve",
    "sobolev_constant",
    "check_spectral_bound",
    "SpectralBoundReport",
]


class EigenError(RuntimeError):
    """Eigeniteration stagnated or produced an inconsistent spectrum."""


@dataclass
class WeightedSpace:
    """Weights, masses and coupling factors of the linearization at a state."""

    mesh: DomainMesh
    p1: float
    p2: float
    lam: float
    W1: np.ndarray
    W2: np.ndarray

    def __post_init__(self):
        self.W1 = as_field(self.mesh, self.W1)
        self.W2 = as_field(self.mesh, self.W2)
        if (self.W1 < 0).any() or (self.W2 < 0).any():
            raise ValueError("weights must be nonnegative")
        w = self.mesh.quad_weights
        self.d1 = w * self.W1
        self.d2 = w * self.W2
        self.m1 = float(self.d1.sum())
        self.m2 = float(self.d2.sum())
        if self.m1 <= 0 or self.m2 <= 0:
            raise ValueError("degenerate weight: zero mass")
        self.t1 = self.lam * self.p1
        self.t2 = self.lam * self.p2

    @classmethod
    def from_state(cls, mesh: DomainMesh, params: "ProblemParams", state: "SolutionState") -> "WeightedSpace":
        v1 = state.alpha1 + state.lam * state.psi1
        v2 = state.alpha2 + state.lam * state.psi2
        return cls(
            mesh=mesh,
            p1=params.p1,
            p2=params.p2,
            lam=state.lam,
            W1=positive_part_weight(v1, params.p1),
            W2=positive_part_weight(v2, params.p2),
        )

    def _d(self, i: int) -> np.ndarray:
        if i == 1:
            return self.d1
        if i == 2:
            return self.d2
        raise ValueError("component index must be 1 or 2")

    def _m(self, i: int) -> float:
        return self.m1 if i == 1 else self.m2

    def _p(self, i: int) -> float:
        return self.p1 if i == 1 else self.p2

    def mean(self, i: int, eta) -> float:
        """Weighted mean <eta>_i."""
        eta = as_field(self.mesh, eta)
        return float(self._d(i) @ eta) / self._m(i)

    def project(self, i: int, eta) -> np.ndarray:
        """Weighted mean-free part [eta]_i."""
        eta = as_field(self.mesh, eta)
        return eta - self.mean(i, eta)

    def inner(self, i: int, a, b) -> float:
        """Componentwise product <a, b>_i."""
        return float((self._d(i) * np.asarray(a)) @ np.asarray(b))

    def norm2(self, i: int, a) -> float:
        return self.inner(i, a, a)

    def pair_inner(self, phi: Tuple[np.ndarray, np.ndarray], eta: Tuple[np.ndarray, np.ndarray]) -> float:
        """Pair product p1 <phi1,eta1>_1 + p2 <phi2,eta2>_2."""
        return self.p1 * self.inner(1, phi[0], eta[0]) + self.p2 * self.inner(2, phi[1], eta[1])

    # single-component building blocks of C
    def apply_A(self, g) -> np.ndarray:
        """g (component 2) -> [G[p2 W2 g]]_1."""
        return self.project(1, self.mesh.green_apply(self.p2 * self.W2 * g))

    def apply_B(self, f) -> np.ndarray:
        """f (component 1) -> [G[p1 W1 f]]_2."""
        return self.project(2, self.mesh.green_apply(self.p1 * self.W1 * f))

    def apply_K1(self, f) -> np.ndarray:
        """Squared operator on the first component (SPD in <.,.>_1)."""
        return self.apply_A(self.apply_B(f))


def weighted_mean(space: WeightedSpace, i: int, eta) -> float:
    """Weighted mean <eta>_i = integral(W_i eta) / integral(W_i)."""
    return space.mean(i, eta)


def apply_C(space: WeightedSpace, mesh: DomainMesh, phi: Tuple[np.ndarray, np.ndarray],
            mean_tol: float = 1e-8) -> Tuple[np.ndarray, np.ndarray]:
    """Apply C to a mean-free pair; rejects pairs that are not mean-free."""
    phi1 = as_field(mesh, phi[0])
    phi2 = as_field(mesh, phi[1])
    for i, f in ((1, phi1), (2, phi2)):
        scale = float(np.max(np.abs(f))) or 1.0
        if abs(space.mean(i, f)) > mean_tol * scale:
            raise ValueError(f"input component {i} is not weighted-mean-free")
    return space.apply_A(phi2), space.apply_B(phi1)


@dataclass
class SpectralSet:
    """Leading spectrum of the linearization at one state.

    ``pairs[k]`` holds the mean-free representatives ([phi1]_1, [phi2]_2)
    normalized to pair-norm 1; ``fields[k]`` the corresponding zero-boundary
    eigenfields solving the coupled eigenvalue equations; ``residuals[k]``
    the relative strong-form residual of those equations.
    """

    lam: float
    sigmas: np.ndarray
    nus: np.ndarray
    mus: Optional[np.ndarray]
    pairs: List[Tuple[np.ndarray, np.ndarray]]
    fields: List[Tuple[np.ndarray, np.ndarray]]
    residuals: np.ndarray
    field_means: np.ndarray = field(default=None)  # (k, 2): <phi_i,k>_i of the fields

    @property
    def sigma1(self) -> float:
        return float(self.sigmas[0])

    def cluster_indices(self, rel_tol: float = 1e-8) -> List[List[int]]:
        """Group eigenvalue indices whose sigmas agree within rel_tol."""
        groups: List[List[int]] = []
        for k, s in enumerate(self.sigmas):
            if groups and abs(s - self.sigmas[groups[-1][-1]]) <= rel_tol * max(1.0, abs(s)):
                groups[-1].append(k)
            else:
                groups.append([k])
        return groups


def _power_deflated(space: WeightedSpace, k: int, rng: np.random.Generator,
                    tol: float, max_iter: int) -> Tuple[np.ndarray, List[np.ndarray]]:
    """Top-k eigenvalues/vectors of K1 by deflated power iteration.

    All k directions (plus a small buffer) are iterated simultaneously and
    kept Gram-Schmidt-orthonormal in the invariant product <.,.>_1; a Ritz
    rotation of the iterated block after every sweep resolves clusters that
    a one-vector-at-a-time deflation cannot separate.
    """
    M = space.mesh.num_nodes
    nb = min(k + 2, M - 1)

    def orthonormalize(cols: List[np.ndarray]) -> List[np.ndarray]:
        out: List[np.ndarray] = []
        for v in cols:
            for u in out:
                v = v - space.inner(1, u, v) * u
            nrm = np.sqrt(space.norm2(1, v))
            if nrm <= 1e-300:
                raise EigenError("iterated block became rank deficient")
            out.append(v / nrm)
        return out

    V = orthonormalize([space.project(1, rng.standard_normal(M)) for _ in range(nb)])
    theta = np.zeros(nb)
    for sweep in range(max_iter):
        Y = [space.project(1, space.apply_K1(v)) for v in V]
        H = np.empty((nb, nb))
        for a in range(nb):
            for b in range(a, nb):
                H[a, b] = H[b, a] = space.inner(1, V[a], Y[b])
        H = 0.5 * (H + H.T)
        theta, U = np.linalg.eigh(H)
        order = np.argsort(theta)[::-1]
        theta = theta[order]
        U = U[:, order]
        X = [sum(U[a, j] * V[a] for a in range(nb)) for j in range(nb)]
        KX = [sum(U[a, j] * Y[a] for a in range(nb)) for j in range(nb)]
        worst = 0.0
        for j in range(k):
            resn = np.sqrt(space.norm2(1, KX[j] - theta[j] * X[j]))
            worst = max(worst, resn / max(abs(theta[j]), 1e-300))
        if worst <= tol:
            if (theta[:k] <= 0).any():
                raise EigenError(
                    "nonpositive squared eigenvalue: broken self-adjointness or non-positive state"
                )
            return theta[:k].copy(), orthonormalize(X[:k])
        V = orthonormalize(KX)
    raise EigenError(
        f"power iteration stagnated: relative residual {worst:.2e} after {max_iter} sweeps"
    )


def eigen_solve(space: WeightedSpace, mesh: DomainMesh, k: int = 8, *,
                tol: float = 1e-11, max_iter: int = 1000, seed: int = 7) -> SpectralSet:
    """Leading k spectral pairs at a state (largest nu, i.e. smallest sigma).

    Raises :class:`EigenError` on iteration stagnation or if a nonpositive
    squared eigenvalue shows up (which would mean the discrete operator
    chain lost self-adjointness, or the state is not nonnegative).
    """
    if mesh is not space.mesh:
        raise ValueError("space was built on a different mesh")
    if not 1 <= k <= mesh.num_nodes - 1:
        raise ValueError(f"k={k} out of range for mesh with {mesh.num_nodes} nodes")
    rng = np.random.default_rng(seed)
    nus2, vecs1 = _power_deflated(space, k, rng, tol, max_iter)
    nus = np.sqrt(nus2)
    lam = space.lam

    pairs = []
    fields = []
    residuals = []
    means = []
    for nu, f1 in zip(nus, vecs1):
        f2 = space.apply_B(f1) / nu
        # pair-normalize: currently ||f1||_1 = 1 and p1 ||f1||_1^2 = p2 ||f2||_2^2
        c = 1.0 / np.sqrt(2.0 * space.p1)
        f1n, f2n = c * f1, c * f2
        sigma = 1.0 / nu - lam
        # zero-boundary eigenfields: phi_i = (t_j + sigma p_j) G[W_j [phi_j]_j]
        a2 = space.t2 + sigma * space.p2  # = p2 / nu
        a1 = space.t1 + sigma * space.p1
        phi1 = a2 * mesh.green_apply(space.W2 * f2n)
        phi2 = a1 * mesh.green_apply(space.W1 * f1n)
        # strong-form residual of the coupled eigenvalue equations
        r1 = mesh.laplacian(phi1) + a2 * space.W2 * f2n
        r2 = mesh.laplacian(phi2) + a1 * space.W1 * f1n
        # consistency of the mean-free representative with the field
        c1 = space.project(1, phi1) - f1n
        c2 = space.project(2, phi2) - f2n
        scale = max(
            abs(a2) * float(np.max(np.abs(space.W2 * f2n))),
            abs(a1) * float(np.max(np.abs(space.W1 * f1n))),
            1e-300,
        )
        res = max(
            float(np.max(np.abs(r1))) / scale,
            float(np.max(np.abs(r2))) / scale,
            np.sqrt(space.norm2(1, c1) / max(space.norm2(1, f1n), 1e-300)),
            np.sqrt(space.norm2(2, c2) / max(space.norm2(2, f2n), 1e-300)),
        )
        # sign convention: field means nonnegative (first component rules)
        m1 = space.mean(1, phi1)
        m2 = space.mean(2, phi2)
        flip = -1.0 if (m1 < 0 or (abs(m1) < 1e-12 * max(1.0, abs(m2)) and m2 < 0)) else 1.0
        pairs.append((flip * f1n, flip * f2n))
        fields.append((flip * phi1, flip * phi2))
        means.append((flip * m1, flip * m2))
        residuals.append(res)

    sigmas = 1.0 / nus - lam
    mus = lam * nus if lam > 0 else None
    return SpectralSet(
        lam=lam,
        sigmas=sigmas,
        nus=nus,
        mus=mus,
        pairs=pairs,
        fields=fields,
        residuals=np.asarray(residuals),
        field_means=np.asarray(means),
    )


def dense_eigen_solve(space: WeightedSpace, mesh: DomainMesh, k: int = 8) -> SpectralSet:
    """Oracle path: dense generalized symmetric eigensolve of the pair operator.

    Builds C as a dense matrix (projections included) and solves
    ``sym(M C) x = nu M x`` with M the pair-product weight matrix.  Intended
    for small meshes; cost is O(num_nodes^3).
    """
    import scipy.linalg as sla

    M = mesh.num_nodes
    w = mesh.quad_weights
    Ld = mesh.stiffness.toarray()
    Ginv = np.linalg.inv(Ld)  # G[f] = Ginv @ (w f)

    def proj(i):
        d = space._d(i)
        return np.eye(M) - np.outer(np.ones(M), d) / space._m(i)

    P1, P2 = proj(1), proj(2)
    # project input and output: on the full space this is P K P, whose
    # restriction to mean-free pairs is C and which symmetrizes M C exactly
    Ablock = P1 @ Ginv @ np.diag(w * space.p2 * space.W2) @ P2
    Bblock = P2 @ Ginv @ np.diag(w * space.p1 * space.W1) @ P1
    C = np.zeros((2 * M, 2 * M))
    C[:M, M:] = Ablock
    C[M:, :M] = Bblock
    Mw = np.concatenate([space.p1 * space.d1, space.p2 * space.d2])
    S = C * Mw[:, None]  # M C
    asym = np.max(np.abs(S - S.T)) / max(np.max(np.abs(S)), 1e-300)
    if asym > 1e-10:
        raise EigenError(f"dense pair operator is not self-adjoint: asymmetry {asym:.2e}")
    vals, vecs = sla.eigh(0.5 * (S + S.T), np.diag(Mw))
    order = np.argsort(vals)[::-1]
    nus = vals[order][:k]
    if (nus <= 0).any():
        raise EigenError("dense solve returned nonpositive leading eigenvalues")
    lam = space.lam
    pairs = []
    for j in range(k):
        v = vecs[:, order[j]]
        phi1, phi2 = v[:M].copy(), v[M:].copy()
        nrm = np.sqrt(space.pair_inner((phi1, phi2), (phi1, phi2)))
        pairs.append((phi1 / nrm, phi2 / nrm))
    sigmas = 1.0 / nus - lam
    return SpectralSet(
        lam=lam,
        sigmas=sigmas,
        nus=nus,
        mus=lam * nus if lam > 0 else None,
        pairs=pairs,
        fields=[],
        residuals=np.full(k, np.nan),
        field_means=None,
    )


def sobolev_constant(mesh: DomainMesh, t: float, *, restarts: int = 4,
                     max_iter: int = 5000, tol: float = 1e-12, seed: int = 11) -> float:
    """Best embedding constant: inf of grad-energy over unit t-norm fields.

    Minimizes the Rayleigh quotient ``(u A u) / (sum q |u|^t)^(2/t)`` by a
    Green-preconditioned, normalized gradient flow with backtracking, from
    the torsion-function start plus ``restarts`` random starts; returns the
    smallest value found.  A per-mesh cache enforces the guard that the
    constant is nonincreasing in t on unit-measure domains.
    """
    if not t >= 2:
        raise ValueError(f"t must be >= 2 (2-D subcritical), got {t}")
    q = mesh.quad_weights
    A = mesh.stiffness

    def tnorm_pow(u):
        return float(q @ np.abs(u) ** t)

    def rayleigh(u):
        return float(u @ (A @ u)) / tnorm_pow(u) ** (2.0 / t)

    def minimize(u0):
        u = u0 / tnorm_pow(u0) ** (1.0 / t)
        r = rayleigh(u)
        for _ in range(max_iter):
            v = mesh.green_apply(np.abs(u) ** (t - 2.0) * u)  # A^{-1} (q |u|^{t-2} u)
            d = u - r * v  # Green-preconditioned gradient direction
            # backtracking from the fixed-point step (tau = 1)
            tau = 1.0
            improved = False
            for _ in range(40):
                cand = u - tau * d
                npow = tnorm_pow(cand)
                if npow > 0:
                    cand = cand / npow ** (1.0 / t)
                    rc = rayleigh(cand)
                    if rc < r:
                        improved = True
                        break
                tau *= 0.5
            if not improved:
                return r, u
            drop = r - rc
            u, r = cand, rc
            if drop <= tol * max(1.0, abs(r)):
                return r, u
        raise EigenError(f"Rayleigh quotient flow did not converge for t={t}")

    starts = [mesh.green_apply(np.ones(mesh.num_nodes))]
    rng = np.random.default_rng(seed)
    for _ in range(restarts):
        starts.append(mesh.green_apply(rng.standard_normal(mesh.num_nodes)))
    best = np.inf
    for u0 in starts:
        r, _ = minimize(u0)
        best = min(best, r)

    cache = mesh.__dict__.setdefault("_sobolev_cache", {})
    for t_prev, val_prev in cache.items():
        lo, hi = (val_prev, best) if t_prev > t else (best, val_prev)
        # larger exponent must give the smaller constant on measure-1 domains
        if lo > hi * (1 + 1e-8):
            raise EigenError(
                f"Sobolev constants out of order: Lambda({t_prev})={val_prev:.6g}, Lambda({t})={best:.6g}"
            )
    cache[t] = best
    return float(best)


@dataclass
class SpectralBoundReport:
    """Per-state audit of the small-lambda positivity bound for sigma_1."""

    threshold: Optional[float]
    sobolev_value: Optional[float]
    p_used: float
    checks: List[Tuple[float, float, bool]]  # (lam, sigma1, ok)

    @property
    def violations(self) -> List[Tuple[float, float, bool]]:
        return [c for c in self.checks if not c[2]]

    @property
    def ok(self) -> bool:
        return not self.violations


def check_spectral_bound(branch: "Branch", mesh: DomainMesh, params: "ProblemParams") -> SpectralBoundReport:
    """Verify sigma_1 > 0 at every branch state below the Sobolev threshold.

    The threshold is ``Lambda(Omega, 2 p_hi) / p_hi`` with ``p_hi`` the
    larger exponent (the two components are interchangeable up to a swap).
    States above the threshold are not checked.  Pure report, never raises
    on violations.
    """
    p_hi = max(params.p1, params.p2)
    if p_hi < 1.0:
        return SpectralBoundReport(threshold=None, sobolev_value=None, p_used=p_hi, checks=[])
    lam_sob = sobolev_constant(mesh, 2.0 * p_hi)
    thr = lam_sob / p_hi
    checks = []
    for rec in branch.records:
        if rec.lam <= thr and np.isfinite(rec.sigma1):
            checks.append((rec.lam, rec.sigma1, rec.sigma1 > 0))
    return SpectralBoundReport(threshold=thr, sobolev_value=lam_sob, p_used=p_hi, checks=checks)
