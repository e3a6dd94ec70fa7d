"""Branch observables and the identity/monotonicity audit machinery.

Per accepted state this module computes the interaction energy E (three
independent discretizations, enforced to agree), the free energy F, the
weighted boundary-value combination gamma, the self-interaction energy,
the leading linearized eigenvalue, and the image of the state under the
map to the unconstrained Hamiltonian pair system.  Branch-level audits
check the monotonicity package (F strictly down, E nondecreasing, gamma
strictly down, F' = -E by central differences, concavity of F) and the
spectral expansion of dE/dlam against plain finite differences.

A note on two identities used here.  Writing c = (p1 p2 - 1) /
((p1+1)(p2+1)), the chain rho_i^{r_i} = rho_i (alpha_i + lam psi_i) and
the unit masses give

    F = gamma + lam * c * E,

including on sign-changing states.  The lam factor matters: at lam = 0 the
left side is p1/(p1+1) + p2/(p2+1) = gamma exactly while E_0 > 0.  The
same factor appears in the Hamiltonian-side free energy, where lam is
recovered from (mu, u) data alone as mu1 * ||1+u1||_{p1}^{p1} / ||1+u2||_{p2}.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, TYPE_CHECKING

import numpy as np

from .mesh import DomainMesh
from .nonlinearity import positive_part_pow
from .contours import Contour, marching_squares
from . import spectral as _spectral

if TYPE_CHECKING:  # pragma: no cover
    from .solver import Branch, ProblemParams, SolutionState

__all__ = [
    "BranchRecord",
    "FourierDiagnostics",
    "HamiltonianImage",
    "MonotonicityReport",
    "record",
    "monotonicity_audit",
    "fourier_audit",
    "map_to_hamiltonian",
    "free_boundary_extract",
    "f_identity_coefficient",
    "RECORD_COLUMNS",
]

#: exact CSV column order of the branch table
RECORD_COLUMNS = (
    "lambda", "alpha1", "alpha2", "E", "F", "gamma", "E_self",
    "sigma1", "mu1_H", "mu2_H", "min_v1", "min_v2", "fb_flag",
)

TRIPLE_E_TOL = 1e-9
F_IDENTITY_TOL = 1e-8


def f_identity_coefficient(params: "ProblemParams") -> float:
    return (params.p1 * params.p2 - 1.0) / ((params.p1 + 1.0) * (params.p2 + 1.0))


@dataclass
class BranchRecord:
    lam: float
    alpha1: float
    alpha2: float
    E: float
    F: float
    gamma: float
    E_self: float
    sigma1: float
    mu1_H: float
    mu2_H: float
    min_v1: float
    min_v2: float
    fb_flag: bool
    # consistency metadata, not part of the CSV schema
    e_spread: float = 0.0
    f_identity_gap: float = 0.0

    def as_row(self) -> tuple:
        return (
            self.lam, self.alpha1, self.alpha2, self.E, self.F, self.gamma,
            self.E_self, self.sigma1, self.mu1_H, self.mu2_H,
            self.min_v1, self.min_v2, int(self.fb_flag),
        )


def record(mesh: DomainMesh, params: "ProblemParams", state: "SolutionState",
           spectral: Optional[_spectral.SpectralSet] = None) -> BranchRecord:
    """All per-state observables, with the triple-E agreement enforced."""
    rho1 = state.rho(1, params)
    rho2 = state.rho(2, params)
    g_rho2 = mesh.green_apply(rho2)
    g_rho1 = mesh.green_apply(rho1)

    e_pair = mesh.integrate(rho1 * g_rho2)
    e_psi1 = mesh.integrate(rho1 * state.psi1)
    e_psi2 = mesh.integrate(rho2 * state.psi2)
    e_grad = mesh.gradient_dot(state.psi1, state.psi2)
    evals = (e_pair, e_psi1, e_psi2, e_grad)
    e_spread = max(evals) - min(evals)
    scale = max(abs(e_pair), 1e-30)
    if e_spread > TRIPLE_E_TOL * max(1.0, scale):
        raise ValueError(
            f"energy discretizations disagree beyond {TRIPLE_E_TOL:.0e}: {evals}"
        )
    E = e_pair

    entropy = (
        mesh.integrate(rho1 ** params.r1) / params.r1
        + mesh.integrate(rho2 ** params.r2) / params.r2
    )
    F = entropy - state.lam * E
    gamma = (
        params.p1 * state.alpha1 / (params.p1 + 1.0)
        + params.p2 * state.alpha2 / (params.p2 + 1.0)
    )
    gap = abs(F - gamma - state.lam * f_identity_coefficient(params) * E)
    if gap > F_IDENTITY_TOL * max(1.0, abs(F)):
        raise ValueError(f"free-energy identity violated by {gap:.3e}")

    e_self = 0.5 * mesh.integrate(rho2 * g_rho2) + 0.5 * mesh.integrate(rho1 * g_rho1)
    ham = map_to_hamiltonian(mesh, params, state) if min(state.alpha1, state.alpha2) > 0 else None
    min_v1 = state.min_v(1)
    min_v2 = state.min_v(2)
    return BranchRecord(
        lam=state.lam,
        alpha1=state.alpha1,
        alpha2=state.alpha2,
        E=E,
        F=F,
        gamma=gamma,
        E_self=e_self,
        sigma1=spectral.sigma1 if spectral is not None else float("nan"),
        mu1_H=ham.mu1 if ham is not None else float("nan"),
        mu2_H=ham.mu2 if ham is not None else float("nan"),
        min_v1=min_v1,
        min_v2=min_v2,
        fb_flag=bool(min(min_v1, min_v2) < 0),
        e_spread=e_spread,
        f_identity_gap=gap,
    )


# ---------------------------------------------------------------------------
# branch-level monotonicity audit


def _central_derivative(xs: Sequence[float], ys: Sequence[float], j: int) -> float:
    """Three-point derivative at interior index j on a nonuniform grid."""
    hm = xs[j] - xs[j - 1]
    hp = xs[j + 1] - xs[j]
    return (
        ys[j + 1] * hm * hm
        - ys[j - 1] * hp * hp
        + ys[j] * (hp * hp - hm * hm)
    ) / (hm * hp * (hm + hp))


@dataclass
class MonotonicityReport:
    n_records: int
    violations: List[dict] = field(default_factory=list)
    fd_checks: List[dict] = field(default_factory=list)  # dF/dlam vs -E per interior record
    concavity_checks: List[dict] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    @property
    def worst_fd_error(self) -> float:
        if not self.fd_checks:
            return 0.0
        return max(c["rel_err"] for c in self.fd_checks)


def monotonicity_audit(branch: "Branch", *, strict_margin: float = 1e-9,
                       fd_floor: float = 1e-4) -> MonotonicityReport:
    """Check the monotonicity package along the positive part of a branch.

    Uses records with lam below the degeneracy threshold (when bracketed)
    and positive boundary values.  Violations are reported with margins,
    never raised.  Interior records get a central-difference check of
    F' = -E with mixed tolerance max(fd_floor, curvature * dlam^2), the
    curvature scale being estimated from third differences of F itself.
    """
    recs = [r for r in branch.records if min(r.alpha1, r.alpha2) > 0]
    if branch.lambda_star_bracket is not None:
        lo = branch.lambda_star_bracket[0]
        recs = [r for r in recs if r.lam <= lo + 1e-14]
    report = MonotonicityReport(n_records=len(recs))
    if len(recs) < 2:
        return report

    lams = [r.lam for r in recs]
    Fs = [r.F for r in recs]
    Es = [r.E for r in recs]
    Gs = [r.gamma for r in recs]

    for a, b in zip(recs[:-1], recs[1:]):
        if not (a.F - b.F > strict_margin):
            report.violations.append(
                {"kind": "F_decreasing", "lam": b.lam, "margin": a.F - b.F}
            )
        if b.E < a.E - strict_margin:
            report.violations.append(
                {"kind": "E_nondecreasing", "lam": b.lam, "margin": b.E - a.E}
            )
        if not (a.gamma - b.gamma > strict_margin):
            report.violations.append(
                {"kind": "gamma_decreasing", "lam": b.lam, "margin": a.gamma - b.gamma}
            )

    if len(recs) >= 3:
        # curvature proxy for the mixed FD tolerance: |F'''| from third differences
        f3 = 0.0
        for j in range(1, len(recs) - 2):
            h = lams[j + 1] - lams[j]
            if j + 2 < len(recs):
                d3 = abs(Fs[j + 2] - 3 * Fs[j + 1] + 3 * Fs[j] - Fs[j - 1]) / max(h, 1e-30) ** 3
                f3 = max(f3, d3)
        for j in range(1, len(recs) - 1):
            dfd = _central_derivative(lams, Fs, j)
            target = -Es[j]
            dlam = max(lams[j + 1] - lams[j], lams[j] - lams[j - 1])
            rel = abs(dfd - target) / max(abs(target), 1e-30)
            tol = max(fd_floor, (f3 / 3.0) * dlam * dlam / max(abs(target), 1e-30))
            entry = {"lam": lams[j], "dF_fd": dfd, "minus_E": target, "rel_err": rel, "tol": tol}
            report.fd_checks.append(entry)
            if rel > tol:
                report.violations.append({"kind": "F_prime", "lam": lams[j], "margin": rel - tol})
        # discrete two-point concavity on consecutive triples
        for j in range(1, len(recs) - 1):
            t = (lams[j + 1] - lams[j]) / (lams[j + 1] - lams[j - 1])
            chord = t * Fs[j - 1] + (1 - t) * Fs[j + 1]
            gap = Fs[j] - chord
            report.concavity_checks.append({"lam": lams[j], "gap": gap})
            if gap < -1e-9 * max(1.0, abs(Fs[j])):
                report.violations.append({"kind": "F_concavity", "lam": lams[j], "margin": gap})
        _ = Gs
    return report


# ---------------------------------------------------------------------------
# spectral expansion of dE/dlam


@dataclass
class FourierDiagnostics:
    lam: float
    sigmas: np.ndarray
    xi: np.ndarray        # (k, 2) coefficients of [psi_i] in the eigenbasis
    beta_closed: np.ndarray  # (k, 2) closed-form coefficients of [dpsi/dlam]
    beta_fd: np.ndarray      # (k, 2) same from neighbor-state differences
    dE_dlambda_spectral: float  # truncated expansion (lower bound of the exact value)
    dE_dlambda_fd: float
    lower_bound: float  # p1 ||[psi1]||^2 + p2 ||[psi2]||^2

    @property
    def tail_gap(self) -> float:
        return self.dE_dlambda_fd - self.dE_dlambda_spectral


def fourier_audit(mesh: DomainMesh, params: "ProblemParams", state: "SolutionState",
                  spectral: _spectral.SpectralSet,
                  neighbors: Tuple["SolutionState", "SolutionState"]) -> FourierDiagnostics:
    """Expand dE/dlam in the eigenbasis and cross-check by differencing.

    ``neighbors`` are solved states bracketing ``state`` in lam; they feed
    the finite-difference derivative of both E and the fields.  All
    expansion coefficients use componentwise unit-norm eigenvectors, so the
    truncated expansion is a sum of nonnegative terms below the exact
    derivative (sigma_1 > 0 required).
    """
    lam = state.lam
    if lam <= 0:
        raise ValueError("expansion needs lam > 0")
    if spectral.sigma1 <= 0:
        raise ValueError("expansion needs sigma_1 > 0")
    before, after = neighbors
    if not before.lam < lam < after.lam:
        raise ValueError("neighbors must bracket the state in lam")

    from .solver import ProblemParams as _PP  # noqa: F401  (typing convenience)

    space = _spectral.WeightedSpace.from_state(mesh, params, state)
    p1, p2 = params.p1, params.p2
    psi_proj = (space.project(1, state.psi1), space.project(2, state.psi2))
    lower = p1 * space.norm2(1, psi_proj[0]) + p2 * space.norm2(2, psi_proj[1])

    # finite-difference field derivative, then project with the current weights
    xs = (before.lam, lam, after.lam)
    def fd_derivative(f_before, f_mid, f_after):
        return _central_derivative(xs, (f_before, f_mid, f_after), 1)

    dpsi1 = fd_derivative(before.psi1, state.psi1, after.psi1)
    dpsi2 = fd_derivative(before.psi2, state.psi2, after.psi2)
    dpsi_proj = (space.project(1, dpsi1), space.project(2, dpsi2))

    k = len(spectral.pairs)
    xi = np.zeros((k, 2))
    beta_fd = np.zeros((k, 2))
    beta_closed = np.zeros((k, 2))
    for kk, (f1, f2) in enumerate(spectral.pairs):
        # componentwise unit norms: stored pairs carry ||f_i||_i = 1/sqrt(2 p_i)
        e1 = f1 * math.sqrt(2.0 * p1)
        e2 = f2 * math.sqrt(2.0 * p2)
        xi[kk, 0] = space.inner(1, e1, psi_proj[0])
        xi[kk, 1] = space.inner(2, e2, psi_proj[1])
        beta_fd[kk, 0] = space.inner(1, e1, dpsi_proj[0])
        beta_fd[kk, 1] = space.inner(2, e2, dpsi_proj[1])
        s = spectral.sigmas[kk]
        den = s * (2.0 * lam + s)
        beta_closed[kk, 0] = ((lam + s) * math.sqrt(p2 / p1) * xi[kk, 1] + lam * xi[kk, 0]) / den
        beta_closed[kk, 1] = ((lam + s) * math.sqrt(p1 / p2) * xi[kk, 0] + lam * xi[kk, 1]) / den

    # truncated expansion of dE/dlam: every dropped term is nonnegative
    s_arr = spectral.sigmas
    cross = 2.0 * (lam + s_arr) * math.sqrt(p1 * p2) * xi[:, 0] * xi[:, 1]
    diag = lam * (p1 * xi[:, 0] ** 2 + p2 * xi[:, 1] ** 2)
    dE_spec = lam * float(np.sum((cross + diag) / (s_arr * (2.0 * lam + s_arr))))
    dE_spec += p1 * float(np.sum(xi[:, 0] ** 2)) + p2 * float(np.sum(xi[:, 1] ** 2))

    def energy(s: "SolutionState") -> float:
        return mesh.integrate(s.rho(1, params) * mesh.green_apply(s.rho(2, params)))

    dE_fd = fd_derivative(energy(before), energy(state), energy(after))

    return FourierDiagnostics(
        lam=lam,
        sigmas=s_arr.copy(),
        xi=xi,
        beta_closed=beta_closed,
        beta_fd=beta_fd,
        dE_dlambda_spectral=dE_spec,
        dE_dlambda_fd=dE_fd,
        lower_bound=lower,
    )


# ---------------------------------------------------------------------------
# Hamiltonian-pair image


@dataclass
class HamiltonianImage:
    mu1: float
    mu2: float
    u1: np.ndarray
    u2: np.ndarray
    gamma_H: float
    E_H: float
    F_H: float
    residual1: float
    residual2: float
    norm_identity_gap: float  # max_i |alpha_i * ||1+u_i||_{p_i} - 1|


def map_to_hamiltonian(mesh: DomainMesh, params: "ProblemParams",
                       state: "SolutionState") -> HamiltonianImage:
    """Image of a positive state under u_i = lam psi_i / alpha_i.

    The pair (u1, u2) solves the unconstrained Hamiltonian system with
    couplings mu1 = lam alpha1^p1 / alpha2 and mu2 = lam alpha2^p2 / alpha1;
    all Hamiltonian-side observables are evaluated from (mu, u) data only.
    """
    a1, a2 = state.alpha1, state.alpha2
    if min(a1, a2) <= 0:
        raise ValueError("the Hamiltonian image needs positive boundary values")
    lam = state.lam
    p1, p2 = params.p1, params.p2
    u1 = lam * state.psi1 / a1
    u2 = lam * state.psi2 / a2
    mu1 = lam * a1 ** p1 / a2
    mu2 = lam * a2 ** p2 / a1

    n1p = mesh.integrate((1.0 + u1) ** p1)  # ||1+u1||_{p1}^{p1}
    n2p = mesh.integrate((1.0 + u2) ** p2)
    n1 = n1p ** (1.0 / p1)
    n2 = n2p ** (1.0 / p2)
    gamma_H = p1 / ((p1 + 1.0) * n1) + p2 / ((p2 + 1.0) * n2)
    gap = max(abs(a1 * n1 - 1.0), abs(a2 * n2 - 1.0))

    if lam > 0:
        res1 = float(np.max(np.abs(mesh.laplacian(u1) + mu2 * (1.0 + u2) ** p2)))
        res2 = float(np.max(np.abs(mesh.laplacian(u2) + mu1 * (1.0 + u1) ** p1)))
        e_H = (
            mu1 * mesh.integrate((1.0 + u1) ** p1 * u1)
            + mu2 * mesh.integrate((1.0 + u2) ** p2 * u2)
        ) / (2.0 * mu1 * mu2 * n1p * n2p)
        lam_H = mu1 * n1p / n2  # lam recovered from (mu, u) data
    else:
        # mu = 0 and u = 0: the system is trivially satisfied and the
        # energy is the limit value, recovered through the state itself
        res1 = float(np.max(np.abs(mesh.laplacian(u1))))
        res2 = float(np.max(np.abs(mesh.laplacian(u2))))
        e_H = mesh.integrate(state.rho(1, params) * mesh.green_apply(state.rho(2, params)))
        lam_H = 0.0
    f_H = gamma_H + lam_H * f_identity_coefficient(params) * e_H
    return HamiltonianImage(
        mu1=mu1, mu2=mu2, u1=u1, u2=u2,
        gamma_H=gamma_H, E_H=e_H, F_H=f_H,
        residual1=res1, residual2=res2,
        norm_identity_gap=gap,
    )


# ---------------------------------------------------------------------------
# free boundary geometry


def free_boundary_extract(mesh: DomainMesh, state: "SolutionState") -> List[List[Contour]]:
    """Zero level sets of v_i = alpha_i + lam psi_i, one contour list per component.

    Components with min v_i >= 0 contribute an empty list.  Contours come
    back as polylines with enclosure flags and shoelace areas.
    """
    out: List[List[Contour]] = []
    for i in (1, 2):
        v = state.v(i)
        if state.min_v(i) >= 0:
            out.append([])
            continue
        grid = mesh.to_grid(v)
        contours = marching_squares(mesh.cell_x, mesh.cell_y, grid, level=0.0)
        out.append(contours)
    return out
