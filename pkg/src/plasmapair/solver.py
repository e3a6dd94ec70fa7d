"""Solvers for the constrained coupled system and branch continuation.

The unknowns at coupling ``lam`` are two boundary values ``alpha_i`` and two
zero-boundary fields ``psi_i`` satisfying

    -lap psi_1 = (alpha_2 + lam psi_2)_+^p2,
    -lap psi_2 = (alpha_1 + lam psi_1)_+^p1,
    integral (alpha_i + lam psi_i)_+^p_i = 1,   i = 1, 2.

Three independent routes are provided:

* ``contraction_inner_solve`` + ``alpha_root_find``: the small-lambda
  constructive scheme.  For ``lam`` below a computed threshold ``lam0`` the
  inner map ``u -> lam (G[(a2+u2)_+^p2], G[(a1+u1)_+^p1])`` is a certified
  contraction; the boundary values are then pinned by nested monotone
  bisection of the two mass constraints.
* ``newton_solve``: a bordered (2 fields + 2 scalars) semismooth Newton
  iteration, usable on the whole branch including past positivity loss for
  exponents >= 1.
* the variational route lives in :mod:`plasmapair.variational`.

``continue_branch`` advances a solution curve in ``lam`` by natural-parameter
continuation with adaptive steps, recording diagnostics per accepted state
and bracketing the thresholds where positivity (``lambda_bar``) or the
first linearized eigenvalue (part of ``lambda_star``) degenerate.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import DomainMesh, as_field
from .nonlinearity import positive_part_pow, positive_part_weight
from . import spectral as _spectral

__all__ = [
    "ProblemParams",
    "SolutionState",
    "Branch",
    "StepControl",
    "SolverError",
    "ContractionError",
    "BracketError",
    "NewtonError",
    "zero_coupling_state",
    "contraction_threshold",
    "contraction_inner_solve",
    "alpha_root_find",
    "newton_solve",
    "bordered_jacobian",
    "continue_branch",
]

NEWTON_TOL = 1e-10
FP_TOL = 1e-12
SIGMA_FLOOR = 1e-6
BRACKET_WIDTH = 1e-4


class SolverError(RuntimeError):
    pass


class ContractionError(SolverError):
    """Fixed-point map not contracting (lambda above threshold, or divergence)."""


class BracketError(SolverError):
    """Mass-constraint bisection bracket could not be certified."""


class NewtonError(SolverError):
    """Newton iteration failed (singular bordered Jacobian or no progress)."""


@dataclass(frozen=True)
class ProblemParams:
    """Exponent pair and the dimension used for subcriticality arithmetic.

    Meshes are always 2-D; ``N`` only enters the subcriticality check
    ``1/(p1+1) + 1/(p2+1) > (N-2)/(N-1)`` and related bookkeeping.
    """

    p1: float
    p2: float
    N: int = 2

    def __post_init__(self):
        if not (self.p1 > 0 and self.p2 > 0):
            raise ValueError(f"exponents must be positive, got ({self.p1}, {self.p2})")
        if self.N < 2:
            raise ValueError(f"dimension must be >= 2, got {self.N}")
        if not self.souto_ok:
            raise ValueError(
                "souto_condition: 1/(p1+1) + 1/(p2+1) = "
                f"{1/(self.p1+1) + 1/(self.p2+1):.6g} must exceed (N-2)/(N-1) = "
                f"{(self.N-2)/(self.N-1):.6g}"
            )

    @property
    def souto_ok(self) -> bool:
        return 1.0 / (self.p1 + 1.0) + 1.0 / (self.p2 + 1.0) > (self.N - 2.0) / (self.N - 1.0)

    @property
    def r1(self) -> float:
        return 1.0 + 1.0 / self.p1

    @property
    def r2(self) -> float:
        return 1.0 + 1.0 / self.p2

    def conjugate(self, i: int) -> float:
        """Conjugate exponent q_i with 1/p_i + 1/q_i = 1; needs p_i > 1."""
        p = self.p1 if i == 1 else self.p2
        if p <= 1:
            raise ValueError(f"conjugate exponent undefined for p_{i} = {p} <= 1")
        return p / (p - 1.0)


@dataclass
class SolutionState:
    """One solution (lam, alpha1, alpha2, psi1, psi2)."""

    lam: float
    alpha1: float
    alpha2: float
    psi1: np.ndarray
    psi2: np.ndarray

    def v(self, i: int) -> np.ndarray:
        if i == 1:
            return self.alpha1 + self.lam * self.psi1
        return self.alpha2 + self.lam * self.psi2

    def rho(self, i: int, params: ProblemParams) -> np.ndarray:
        p = params.p1 if i == 1 else params.p2
        return positive_part_pow(self.v(i), p)

    def min_v(self, i: int) -> float:
        # psi vanishes on the boundary, so the boundary value alpha_i
        # participates in the minimum
        alpha = self.alpha1 if i == 1 else self.alpha2
        return float(min(alpha, np.min(self.v(i))))

    def residuals(self, mesh: DomainMesh, params: ProblemParams) -> dict:
        rho1 = self.rho(1, params)
        rho2 = self.rho(2, params)
        pde1 = float(np.max(np.abs(mesh.laplacian(self.psi1) + rho2)))
        pde2 = float(np.max(np.abs(mesh.laplacian(self.psi2) + rho1)))
        mass1 = abs(mesh.integrate(rho1) - 1.0)
        mass2 = abs(mesh.integrate(rho2) - 1.0)
        return {"pde1": pde1, "pde2": pde2, "mass1": mass1, "mass2": mass2}

    def max_residual(self, mesh: DomainMesh, params: ProblemParams) -> float:
        return max(self.residuals(mesh, params).values())

    def assert_valid(self, mesh: DomainMesh, params: ProblemParams, tol: float = 1e-8) -> None:
        res = self.residuals(mesh, params)
        bad = {k: v for k, v in res.items() if v > tol}
        if bad:
            raise SolverError(f"state violates invariants beyond {tol:.1e}: {bad}")
        if min(self.alpha1, self.alpha2) >= 0:
            slack = 10 * tol + mesh.mass_defect
            if max(self.alpha1, self.alpha2) > 1.0 + slack:
                raise SolverError(
                    f"nonnegative state with alpha > 1: ({self.alpha1}, {self.alpha2})"
                )
            if min(np.min(self.psi1), np.min(self.psi2)) < -tol:
                raise SolverError("nonnegative state with negative psi")

    def copy(self) -> "SolutionState":
        return SolutionState(self.lam, self.alpha1, self.alpha2, self.psi1.copy(), self.psi2.copy())


def zero_coupling_state(mesh: DomainMesh) -> SolutionState:
    """The unique lam = 0 solution: alpha = (1,1), psi_i = G[1]."""
    g1 = mesh.green_apply(np.ones(mesh.num_nodes))
    return SolutionState(0.0, 1.0, 1.0, g1.copy(), g1.copy())


# ---------------------------------------------------------------------------
# small-lambda contraction scheme


def contraction_threshold(mesh: DomainMesh, params: ProblemParams) -> Tuple[float, dict]:
    """Certified contraction threshold lam0 = min(1, C1/C2, 1/(2 C3)).

    The constants are discrete analogues of the fixed-point estimates: with
    sup G[1] =: g_inf and a box bound ``|u| <= C1``, the map image is bounded
    by ``C2 = g_inf * max_i (1 + C1)^{p_i}`` and its Lipschitz constant by
    ``lam * C3`` with ``C3 = g_inf * max_i p_i * sup-weight_i``.  C1 is picked
    on a grid to maximize the resulting threshold.  For p_i < 1 the weight
    sup is taken over arguments >= 1/4 (the certified-solution region);
    runtime divergence guards in the iteration back this up.
    """
    g_inf = mesh.torsion_max()
    ps = (params.p1, params.p2)

    def threshold_for(c1: float) -> float:
        c2 = g_inf * max((1.0 + c1) ** p for p in ps)
        sup_w = []
        for p in ps:
            if p >= 1:
                sup_w.append(p * (1.0 + c1) ** (p - 1.0))
            else:
                sup_w.append(p * 0.25 ** (p - 1.0))
        c3 = g_inf * max(sup_w)
        return min(1.0, c1 / c2, 1.0 / (2.0 * c3))

    grid = np.geomspace(1e-2, 1e2, 161)
    vals = [threshold_for(c) for c in grid]
    best = int(np.argmax(vals))
    c1 = float(grid[best])
    lam0 = float(vals[best])
    info = {
        "lam0": lam0,
        "C1": c1,
        "C2": g_inf * max((1.0 + c1) ** p for p in ps),
        "C3": g_inf * max(
            (p * (1.0 + c1) ** (p - 1.0)) if p >= 1 else (p * 0.25 ** (p - 1.0)) for p in ps
        ),
        "green_sup": g_inf,
    }
    return lam0, info


def _contraction_u(mesh: DomainMesh, params: ProblemParams, lam: float,
                   alpha: Tuple[float, float], fp_tol: float, max_iter: int,
                   u0: Optional[Tuple[np.ndarray, np.ndarray]] = None,
                   box: Optional[float] = None) -> Tuple[np.ndarray, np.ndarray, int]:
    """Fixed point of u = lam (G[(a2+u2)_+^p2], G[(a1+u1)_+^p1]) by iteration."""
    a1, a2 = alpha
    M = mesh.num_nodes
    if u0 is None:
        u1 = np.zeros(M)
        u2 = np.zeros(M)
    else:
        u1, u2 = u0[0].copy(), u0[1].copy()
    prev_diff = np.inf
    grow = 0
    for it in range(max_iter):
        n1 = lam * mesh.green_apply(positive_part_pow(a2 + u2, params.p2))
        n2 = lam * mesh.green_apply(positive_part_pow(a1 + u1, params.p1))
        diff = max(float(np.max(np.abs(n1 - u1))), float(np.max(np.abs(n2 - u2))))
        u1, u2 = n1, n2
        if diff <= fp_tol:
            return u1, u2, it + 1
        if diff > prev_diff * (1 + 1e-12):
            grow += 1
            if grow >= 5:
                raise ContractionError(
                    f"fixed-point iterates diverge at lam={lam:.6g} (increments growing)"
                )
        else:
            grow = 0
        if box is not None and max(np.max(u1), np.max(u2)) > 10.0 * box:
            raise ContractionError(f"fixed-point iterates left the contraction box at lam={lam:.6g}")
        prev_diff = diff
    raise ContractionError(
        f"fixed point not reached in {max_iter} iterations at lam={lam:.6g} (last increment {diff:.2e})"
    )


def contraction_inner_solve(mesh: DomainMesh, params: ProblemParams, lam: float,
                            alpha: Tuple[float, float], *, fp_tol: float = FP_TOL,
                            max_iter: int = 400) -> Tuple[np.ndarray, np.ndarray]:
    """Inner fields psi_i = u_i / lam for fixed boundary values alpha.

    Only certified for ``0 <= lam <= lam0``; larger lam raises
    :class:`ContractionError` naming the threshold.  Returns (0, 0) at
    lam = 0 (the fixed point is u = 0 there).
    """
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    if max(alpha) > 1.0 + 1e-12:
        raise ValueError(f"alpha_i <= 1 required, got {alpha}")
    lam0, info = contraction_threshold(mesh, params)
    if lam > lam0:
        raise ContractionError(
            f"lam={lam:.6g} exceeds the certified contraction threshold lam0={lam0:.6g}"
        )
    if lam == 0.0:
        z = np.zeros(mesh.num_nodes)
        return z, z.copy()
    u1, u2, _ = _contraction_u(mesh, params, lam, alpha, fp_tol, max_iter, box=info["C1"])
    return u1 / lam, u2 / lam


def alpha_root_find(mesh: DomainMesh, params: ProblemParams, lam: float, *,
                    alpha_tol: float = 1e-12, fp_tol: float = FP_TOL,
                    max_iter: int = 400) -> SolutionState:
    """Solve the full constrained problem for small lam by nested bisection.

    Outer bisection on alpha_1 in [0, 1], inner on alpha_2 in [0, 1]; both
    mass functionals are monotone increasing in both boundary values, and
    the brackets g(0,.) < 1 < g(1,.) are certified before bisecting
    (certification failure raises :class:`BracketError`, signalling the
    lam > lam0 regime).
    """
    if lam == 0.0:
        return zero_coupling_state(mesh)
    lam0, info = contraction_threshold(mesh, params)
    if lam > lam0:
        raise ContractionError(
            f"lam={lam:.6g} exceeds the certified contraction threshold lam0={lam0:.6g}"
        )
    box = info["C1"]
    warm: dict = {}

    def masses(a1: float, a2: float, tol_fp: float) -> Tuple[float, float]:
        u0 = warm.get("u")
        u1, u2, _ = _contraction_u(mesh, params, lam, (a1, a2), tol_fp, max_iter, u0=u0, box=box)
        warm["u"] = (u1, u2)
        g1 = mesh.integrate(positive_part_pow(a1 + u1, params.p1))
        g2 = mesh.integrate(positive_part_pow(a2 + u2, params.p2))
        return g1, g2

    def inner_alpha2(a1: float, tol_inner: float, tol_fp: float) -> float:
        _, g2_lo = masses(a1, 0.0, tol_fp)
        if not g2_lo < 1.0:
            raise BracketError(f"inner bracket not certified: g2(a1={a1:.4g}, 0) = {g2_lo:.6g} >= 1")
        _, g2_hi = masses(a1, 1.0, tol_fp)
        if not g2_hi > 1.0:
            raise BracketError(f"inner bracket not certified: g2(a1={a1:.4g}, 1) = {g2_hi:.6g} <= 1")
        lo, hi = 0.0, 1.0
        while hi - lo > tol_inner:
            mid = 0.5 * (lo + hi)
            _, g2 = masses(a1, mid, tol_fp)
            if g2 < 1.0:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)

    def outer_mass(a1: float, tol_inner: float, tol_fp: float) -> float:
        a2 = inner_alpha2(a1, tol_inner, tol_fp)
        g1, _ = masses(a1, a2, tol_fp)
        return g1

    # certify the outer bracket (inner solves at moderate accuracy)
    g1_lo = outer_mass(0.0, 1e-6, 1e-10)
    if not g1_lo < 1.0:
        raise BracketError(f"outer bracket not certified: g1(0, .) = {g1_lo:.6g} >= 1")
    g1_hi = outer_mass(1.0, 1e-6, 1e-10)
    if not g1_hi > 1.0:
        raise BracketError(f"outer bracket not certified: g1(1, .) = {g1_hi:.6g} <= 1")

    lo, hi = 0.0, 1.0
    while hi - lo > alpha_tol:
        mid = 0.5 * (lo + hi)
        width = hi - lo
        # inner tolerance tracks the outer interval so early sweeps stay cheap
        tol_inner = max(alpha_tol, min(1e-4, 1e-2 * width))
        tol_fp = max(fp_tol, min(1e-10, 1e-4 * width))
        if outer_mass(mid, tol_inner, tol_fp) < 1.0:
            lo = mid
        else:
            hi = mid
    a1 = 0.5 * (lo + hi)
    a2 = inner_alpha2(a1, alpha_tol, fp_tol)
    u1, u2, _ = _contraction_u(mesh, params, lam, (a1, a2), fp_tol, max_iter, u0=warm.get("u"), box=box)
    state = SolutionState(lam, a1, a2, u1 / lam, u2 / lam)
    return state


# ---------------------------------------------------------------------------
# bordered Newton


def _newton_system(mesh: DomainMesh, params: ProblemParams, state: SolutionState):
    """Residuals and Jacobian pieces at a state (weights exact, no smoothing)."""
    A = mesh.stiffness
    w = mesh.quad_weights
    v1, v2 = state.v(1), state.v(2)
    rho1 = positive_part_pow(v1, params.p1)
    rho2 = positive_part_pow(v2, params.p2)
    W1 = positive_part_weight(v1, params.p1)
    W2 = positive_part_weight(v2, params.p2)
    r1 = A @ state.psi1 - w * rho2
    r2 = A @ state.psi2 - w * rho1
    c1 = float(w @ rho1) - 1.0
    c2 = float(w @ rho2) - 1.0
    return r1, r2, c1, c2, W1, W2


def newton_solve(mesh: DomainMesh, params: ProblemParams, lam: float,
                 initial: SolutionState, *, tol: float = NEWTON_TOL,
                 max_iter: int = 40,
                 log: Optional[Callable[[str], None]] = None) -> SolutionState:
    """Bordered Newton solve of the 2-field + 2-scalar system at fixed lam.

    The step solves the PDE block (factored once per iteration) against the
    residual and the two bordering columns, then a 2x2 system for the
    boundary-value increments: block elimination of the bordered Jacobian.
    Positive-part powers use their exact generalized derivative, so on
    states past positivity loss (p_i >= 1) this is a semismooth iteration.

    Raises :class:`NewtonError` on a singular bordered Jacobian (a zero
    linearized eigenvalue) or when no progress can be made.
    """
    st = SolutionState(lam, initial.alpha1, initial.alpha2, initial.psi1.copy(), initial.psi2.copy())
    A = mesh.stiffness
    w = mesh.quad_weights
    M = mesh.num_nodes
    p1, p2 = params.p1, params.p2

    res_prev = np.inf
    forced = 0
    for it in range(max_iter):
        r1, r2, c1, c2, W1, W2 = _newton_system(mesh, params, st)
        res = max(
            float(np.max(np.abs(r1 / w))),
            float(np.max(np.abs(r2 / w))),
            abs(c1),
            abs(c2),
        )
        if log is not None:
            log(f"newton it={it} lam={lam:.6g} residual={res:.3e}")
        if res <= tol:
            return st
        d1 = w * W1
        d2 = w * W2
        Jpde = sp.bmat(
            [[A, sp.diags(-lam * p2 * d2)], [sp.diags(-lam * p1 * d1), A]], format="csc"
        )
        try:
            lu = spla.splu(Jpde)
        except RuntimeError as exc:
            raise NewtonError(f"singular bordered Jacobian at lam={lam:.6g}: {exc}") from exc
        rhs = np.empty((2 * M, 3))
        rhs[:M, 0], rhs[M:, 0] = -r1, -r2
        rhs[:M, 1], rhs[M:, 1] = 0.0, p1 * d1  # -(column of d alpha_1), negated
        rhs[:M, 2], rhs[M:, 2] = p2 * d2, 0.0
        sol = lu.solve(rhs)
        if not np.all(np.isfinite(sol)):
            raise NewtonError(f"singular bordered Jacobian at lam={lam:.6g} (non-finite block solve)")
        y0, y1, y2 = sol[:, 0], sol[:, 1], sol[:, 2]
        # constraint rows: lam p_i <w W_i, dpsi_i> + p_i m_i dalpha_i = -c_i
        cpsi = np.array(
            [
                [lam * p1 * float(d1 @ y1[:M]) + p1 * float(d1.sum()), lam * p1 * float(d1 @ y2[:M])],
                [lam * p2 * float(d2 @ y1[M:]), lam * p2 * float(d2 @ y2[M:]) + p2 * float(d2.sum())],
            ]
        )
        rhs2 = -np.array(
            [c1 + lam * p1 * float(d1 @ y0[:M]), c2 + lam * p2 * float(d2 @ y0[M:])]
        )
        try:
            dalpha = np.linalg.solve(cpsi, rhs2)
        except np.linalg.LinAlgError as exc:
            raise NewtonError(f"singular bordered Jacobian at lam={lam:.6g}: {exc}") from exc
        dpsi = y0 + y1 * dalpha[0] + y2 * dalpha[1]

        # damped update: keep the first scale that reduces the residual;
        # allow one full semismooth step through an active-set flip
        best = None
        scale = 1.0
        for _ in range(9):
            cand = SolutionState(
                lam,
                st.alpha1 + scale * dalpha[0],
                st.alpha2 + scale * dalpha[1],
                st.psi1 + scale * dpsi[:M],
                st.psi2 + scale * dpsi[M:],
            )
            rc = cand.max_residual(mesh, params)
            if rc < res:
                best = (cand, rc)
                break
            scale *= 0.5
        if best is None:
            if forced < 2:
                forced += 1
                st = SolutionState(
                    lam,
                    st.alpha1 + dalpha[0],
                    st.alpha2 + dalpha[1],
                    st.psi1 + dpsi[:M],
                    st.psi2 + dpsi[M:],
                )
                continue
            raise NewtonError(
                f"no progress at lam={lam:.6g}: residual stuck at {res:.3e}"
            )
        st, res_prev = best
    raise NewtonError(f"max iterations exceeded at lam={lam:.6g}: residual {res_prev:.3e}")


def bordered_jacobian(mesh: DomainMesh, params: ProblemParams, state: SolutionState) -> np.ndarray:
    """Dense bordered Jacobian (2M+2 square) at a state.

    Ordering: [psi1, psi2, alpha1, alpha2].  Intended for small meshes
    (kernel-criterion studies); the Newton path never forms this matrix.
    """
    A = mesh.stiffness.toarray()
    w = mesh.quad_weights
    M = mesh.num_nodes
    lam, p1, p2 = state.lam, params.p1, params.p2
    W1 = positive_part_weight(state.v(1), p1)
    W2 = positive_part_weight(state.v(2), p2)
    d1, d2 = w * W1, w * W2
    J = np.zeros((2 * M + 2, 2 * M + 2))
    J[:M, :M] = A
    J[:M, M:2 * M] = np.diag(-lam * p2 * d2)
    J[:M, 2 * M + 1] = -p2 * d2
    J[M:2 * M, M:2 * M] = A
    J[M:2 * M, :M] = np.diag(-lam * p1 * d1)
    J[M:2 * M, 2 * M] = -p1 * d1
    J[2 * M, :M] = lam * p1 * d1
    J[2 * M, 2 * M] = p1 * d1.sum()
    J[2 * M + 1, M:2 * M] = lam * p2 * d2
    J[2 * M + 1, 2 * M + 1] = p2 * d2.sum()
    return J


# ---------------------------------------------------------------------------
# continuation


@dataclass
class StepControl:
    dlam_init: float = 0.05
    dlam_min: float = 1e-6
    dlam_max: float = 0.5
    grow: float = 1.4
    shrink: float = 0.5
    newton_tol: float = NEWTON_TOL
    sigma_floor: float = SIGMA_FLOOR
    bracket_width: float = BRACKET_WIDTH


@dataclass
class Branch:
    """A continuation run: states, per-state diagnostics, threshold brackets."""

    params: ProblemParams
    mesh: DomainMesh
    states: List[SolutionState] = field(default_factory=list)
    records: List["BranchRecord"] = field(default_factory=list)  # noqa: F821
    lambda_bar: Optional[float] = None
    lambda_bar_bracket: Optional[Tuple[float, float]] = None
    lambda_star: Optional[float] = None
    lambda_star_bracket: Optional[Tuple[float, float]] = None
    stop_reason: str = ""

    @property
    def lams(self) -> np.ndarray:
        return np.array([s.lam for s in self.states])

    def state_at(self, lam: float, tol: float = 1e-12) -> SolutionState:
        for s in self.states:
            if abs(s.lam - lam) <= tol:
                return s
        raise KeyError(f"no state at lam={lam}")


def _interp_state(sa: SolutionState, sb: SolutionState, lam: float) -> SolutionState:
    """Linear (secant) predictor between two states."""
    if sb.lam == sa.lam:
        return SolutionState(lam, sb.alpha1, sb.alpha2, sb.psi1.copy(), sb.psi2.copy())
    t = (lam - sa.lam) / (sb.lam - sa.lam)
    return SolutionState(
        lam,
        sa.alpha1 + t * (sb.alpha1 - sa.alpha1),
        sa.alpha2 + t * (sb.alpha2 - sa.alpha2),
        sa.psi1 + t * (sb.psi1 - sa.psi1),
        sa.psi2 + t * (sb.psi2 - sa.psi2),
    )


def _sigma1_at(mesh: DomainMesh, params: ProblemParams, state: SolutionState, k: int = 1):
    space = _spectral.WeightedSpace.from_state(mesh, params, state)
    return _spectral.eigen_solve(space, mesh, k=k)


def _refine_crossing(mesh: DomainMesh, params: ProblemParams, lo: SolutionState,
                     hi: SolutionState, fired: Callable[[SolutionState], bool],
                     width: float, newton_tol: float) -> Tuple[float, float]:
    """Bisect in lam for the first state where ``fired`` holds."""
    a, b = lo, hi
    while b.lam - a.lam > width:
        mid_lam = 0.5 * (a.lam + b.lam)
        guess = _interp_state(a, b, mid_lam)
        st = newton_solve(mesh, params, mid_lam, guess, tol=newton_tol)
        if fired(st):
            b = st
        else:
            a = st
    return a.lam, b.lam


def continue_branch(mesh: DomainMesh, params: ProblemParams, lambda_max: float,
                    step: Optional[StepControl] = None, *,
                    continue_past_positivity: bool = False,
                    eigen_count: int = 1,
                    compute_sigma: bool = True,
                    log: Optional[Callable[[str], None]] = None,
                    newton_log: Optional[Callable[[str], None]] = None) -> Branch:
    """Natural-parameter continuation from lam = 0 up to ``lambda_max``.

    Each accepted state appends a diagnostics record.  ``lambda_star`` is
    bracketed at the first state where sigma_1 falls to the floor or
    positivity is lost; without ``continue_past_positivity`` the branch stops
    there.  With it (exponents >= 1 required), continuation proceeds into
    the free-boundary regime and ``lambda_bar`` brackets the positivity
    loss itself.
    """
    from .diagnostics import record as _record

    step = step or StepControl()
    if continue_past_positivity and min(params.p1, params.p2) < 1:
        raise ValueError(
            "continuation past positivity loss requires both exponents >= 1 "
            "(the linearization weight is unbounded on the free boundary otherwise)"
        )
    branch = Branch(params=params, mesh=mesh)

    def emit(msg):
        if log is not None:
            log(msg)

    def accept(st: SolutionState):
        spec = _sigma1_at(mesh, params, st, k=eigen_count) if compute_sigma else None
        branch.states.append(st)
        branch.records.append(_record(mesh, params, st, spec))
        return spec

    state = zero_coupling_state(mesh)
    accept(state)
    dlam = step.dlam_init
    sigma_fired_state: Optional[SolutionState] = None

    while state.lam < lambda_max - 1e-14 and branch.stop_reason == "":
        target = min(state.lam + dlam, lambda_max)
        if len(branch.states) >= 2:
            guess = _interp_state(branch.states[-2], branch.states[-1], target)
        else:
            guess = SolutionState(target, state.alpha1, state.alpha2, state.psi1.copy(), state.psi2.copy())
        try:
            st = newton_solve(mesh, params, target, guess, tol=step.newton_tol, log=newton_log)
        except NewtonError as exc:
            dlam *= step.shrink
            emit(f"step to lam={target:.6g} rejected ({exc}); dlam -> {dlam:.3g}")
            if dlam < step.dlam_min:
                branch.stop_reason = "step_collapse"
                emit("step collapsed below dlam_min; branch terminated")
                break
            continue

        spec = accept(st)
        emit(
            f"accepted lam={st.lam:.6g} alpha=({st.alpha1:.6g},{st.alpha2:.6g})"
            + (f" sigma1={spec.sigma1:.6g}" if spec is not None else "")
        )
        prev = branch.states[-2]

        min_alpha = min(st.alpha1, st.alpha2)
        sigma_low = compute_sigma and spec is not None and spec.sigma1 <= step.sigma_floor
        if branch.lambda_star is None and (sigma_low or min_alpha <= 0):
            reason = "sigma_floor" if sigma_low else "positivity_loss"

            def star_fired(s: SolutionState) -> bool:
                if min(s.alpha1, s.alpha2) <= 0:
                    return True
                if compute_sigma:
                    return _sigma1_at(mesh, params, s, k=1).sigma1 <= step.sigma_floor
                return False

            try:
                lo, hi = _refine_crossing(
                    mesh, params, prev, st, star_fired, step.bracket_width, step.newton_tol
                )
            except SolverError:
                lo, hi = prev.lam, st.lam
            branch.lambda_star_bracket = (lo, hi)
            branch.lambda_star = hi
            if not continue_past_positivity:
                branch.stop_reason = reason
                emit(f"lambda_star bracketed in [{lo:.6g}, {hi:.6g}] ({reason}); stopping")
                break
            branch.stop_reason = ""
            emit(f"lambda_star bracketed in [{lo:.6g}, {hi:.6g}] ({reason}); continuing past")
            sigma_fired_state = st

        if continue_past_positivity and branch.lambda_bar is None and min_alpha < 0:
            def bar_fired(s: SolutionState) -> bool:
                return min(s.alpha1, s.alpha2) < 0

            try:
                lo, hi = _refine_crossing(
                    mesh, params, prev, st, bar_fired, step.bracket_width, step.newton_tol
                )
            except SolverError:
                lo, hi = prev.lam, st.lam
            branch.lambda_bar_bracket = (lo, hi)
            branch.lambda_bar = hi
            emit(f"lambda_bar bracketed in [{lo:.6g}, {hi:.6g}]")

        state = st
        dlam = min(dlam * step.grow, step.dlam_max)

    if branch.stop_reason == "":
        branch.stop_reason = "lambda_max" if state.lam >= lambda_max - 1e-14 else "unknown"
    _ = sigma_fired_state
    return branch
