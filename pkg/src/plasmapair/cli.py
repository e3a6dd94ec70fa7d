"""Command-line entry point.

Modes: ``solve`` (one state), ``branch`` (continuation with diagnostics),
``spectrum`` (leading eigenvalues at one state), ``verify`` (invariant
suite over a fresh small branch, nonzero exit on any violation) and
``oracle`` (free-energy minimizer against the Newton solve).

Configuration is a nested YAML file and/or dotted flags that mirror every
key (flags win), e.g.::

    plasmapair branch --mesh.shape rectangle --mesh.n 48 \
        --problem.p1 1 --problem.p2 1 --run.lambda_max 25 --run.out out/

Exit codes: 0 success, 1 verification failure, 2 invalid configuration,
3 solver failure.  Identical configuration and seed give byte-identical
CSV output; every output file carries a JSON sidecar with the config
hash, mesh size and tolerance set.
"""
from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from typing import List, Optional, Tuple

import numpy as np
import yaml

from . import io as _io
from .mesh import DomainShape, DomainMesh, MeshError, build_mesh
from .solver import (
    Branch,
    ContractionError,
    NewtonError,
    ProblemParams,
    SolutionState,
    SolverError,
    StepControl,
    alpha_root_find,
    continue_branch,
    contraction_threshold,
    newton_solve,
    zero_coupling_state,
    NEWTON_TOL,
    FP_TOL,
    SIGMA_FLOOR,
)
from .spectral import WeightedSpace, dense_eigen_solve, eigen_solve
from .variational import coordinate_minimize
from .diagnostics import map_to_hamiltonian, monotonicity_audit

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_CONFIG = 2
EXIT_SOLVER = 3

DEFAULTS = {
    "mesh": {"shape": "rectangle", "aspect": 1.0, "n": 48},
    "problem": {"p1": 1.0, "p2": 1.0, "N": 2},
    "run": {
        "lam": 0.0,
        "lambda_max": 1.0,
        "k": 8,
        "seed": 0,
        "out": "out",
        "lambdas": "",
        "workers": 1,
        "verbose": 0,
        "dump_fields": 0,
    },
    "step": {
        "dlam_init": 0.05,
        "dlam_min": 1e-6,
        "dlam_max": 0.5,
        "sigma_floor": SIGMA_FLOOR,
    },
}

_CASTS = {
    "mesh.shape": str,
    "mesh.aspect": float,
    "mesh.n": int,
    "problem.p1": float,
    "problem.p2": float,
    "problem.N": int,
    "run.lam": float,
    "run.lambda_max": float,
    "run.k": int,
    "run.seed": int,
    "run.out": str,
    "run.lambdas": str,
    "run.workers": int,
    "run.verbose": int,
    "run.dump_fields": int,
    "step.dlam_init": float,
    "step.dlam_min": float,
    "step.dlam_max": float,
    "step.sigma_floor": float,
}


class ConfigError(ValueError):
    def __init__(self, name: str, detail: str):
        super().__init__(detail)
        self.name = name
        self.detail = detail


def _flatten(prefix: str, node, out: dict) -> None:
    if isinstance(node, dict):
        for k, v in node.items():
            _flatten(f"{prefix}.{k}" if prefix else str(k), v, out)
    else:
        out[prefix] = node


def load_config(path: Optional[str], overrides: dict) -> dict:
    """Defaults <- YAML file <- dotted flags, with per-key casting."""
    flat = {}
    _flatten("", DEFAULTS, flat)
    if path:
        try:
            with open(path) as fh:
                data = yaml.safe_load(fh) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError("config_file", f"cannot read config {path}: {exc}")
        file_flat: dict = {}
        _flatten("", data, file_flat)
        for k, v in file_flat.items():
            if k not in flat:
                raise ConfigError("unknown_key", f"unknown config key {k!r}")
            flat[k] = v
    for k, v in overrides.items():
        if v is not None:
            flat[k] = v
    cfg = {}
    for k, cast in _CASTS.items():
        try:
            cfg[k] = cast(flat[k])
        except (TypeError, ValueError) as exc:
            raise ConfigError(k.replace(".", "_"), f"bad value for {k}: {flat[k]!r} ({exc})")
    for k in flat:
        if k not in _CASTS:
            raise ConfigError("unknown_key", f"unknown config key {k!r}")
    for k in ("step.dlam_init", "step.dlam_min", "step.dlam_max", "step.sigma_floor"):
        if not cfg[k] > 0:
            raise ConfigError(k.replace(".", "_"), f"{k} must be positive, got {cfg[k]}")
    return cfg


def _build(cfg: dict) -> Tuple[DomainMesh, ProblemParams]:
    try:
        params = ProblemParams(cfg["problem.p1"], cfg["problem.p2"], cfg["problem.N"])
    except ValueError as exc:
        name = "souto_condition" if "souto" in str(exc) else "problem"
        raise ConfigError(name, str(exc))
    try:
        shape = DomainShape(cfg["mesh.shape"], cfg["mesh.aspect"])
        mesh = build_mesh(shape, cfg["mesh.n"])
    except MeshError as exc:
        raise ConfigError("mesh", str(exc))
    return mesh, params


def _tolerances(cfg: dict) -> dict:
    return {
        "newton_tol": NEWTON_TOL,
        "fp_tol": FP_TOL,
        "sigma_floor": cfg["step.sigma_floor"],
        "solver_tol": 1e-10,
        "dlam": [cfg["step.dlam_init"], cfg["step.dlam_min"], cfg["step.dlam_max"]],
    }


def _step_control(cfg: dict) -> StepControl:
    return StepControl(
        dlam_init=cfg["step.dlam_init"],
        dlam_min=cfg["step.dlam_min"],
        dlam_max=cfg["step.dlam_max"],
        sigma_floor=cfg["step.sigma_floor"],
    )


def solve_at(mesh: DomainMesh, params: ProblemParams, lam: float, *,
             step: Optional[StepControl] = None, verbose=None,
             newton_log=None) -> SolutionState:
    """Continuation from lam = 0 to a single target state."""
    if lam == 0:
        return zero_coupling_state(mesh)
    past = min(params.p1, params.p2) >= 1
    branch = continue_branch(
        mesh, params, lam, step,
        continue_past_positivity=past, compute_sigma=False, log=verbose,
        newton_log=newton_log,
    )
    final = branch.states[-1]
    if abs(final.lam - lam) > 1e-12:
        raise SolverError(
            f"continuation stopped at lam={final.lam:.6g} before the target {lam:.6g} "
            f"({branch.stop_reason})"
        )
    return final


def _lambda_grid(cfg: dict, mesh: DomainMesh, params: ProblemParams) -> List[float]:
    raw = cfg["run.lambdas"].strip()
    if raw:
        try:
            return [float(tok) for tok in raw.replace(";", ",").split(",") if tok.strip()]
        except ValueError as exc:
            raise ConfigError("run_lambdas", f"bad lambda list {raw!r}: {exc}")
    lam0, _ = contraction_threshold(mesh, params)
    return [lam0 * f for f in (0.2, 0.4, 0.6, 0.8, 1.0)]


# ---------------------------------------------------------------------------
# modes


def _solve_single(cfg: dict, lam: float, outdir: str) -> None:
    mesh, params = _build(cfg)
    verbose = cfg["run.verbose"]
    log = (lambda s: print(s, file=sys.stderr)) if verbose >= 1 else None
    nlog = (lambda s: print(s, file=sys.stderr)) if verbose >= 2 else None
    state = solve_at(mesh, params, lam, verbose=log, newton_log=nlog)
    os.makedirs(outdir, exist_ok=True)
    res = state.residuals(mesh, params)
    path = os.path.join(outdir, "state.csv")
    with open(path, "w") as fh:
        fh.write("lambda,alpha1,alpha2,pde_residual,mass_defect_1,mass_defect_2\n")
        row = [state.lam, state.alpha1, state.alpha2,
               max(res["pde1"], res["pde2"]), res["mass1"], res["mass2"]]
        fh.write(",".join(_io.fmt_float(v) for v in row) + "\n")
    _io.write_field_csv(os.path.join(outdir, "psi1.csv"), mesh, state.psi1)
    _io.write_field_csv(os.path.join(outdir, "psi2.csv"), mesh, state.psi2)
    if min(state.min_v(1), state.min_v(2)) < 0:
        from .diagnostics import free_boundary_extract
        _io.write_contours(outdir, "free_boundary", free_boundary_extract(mesh, state))
    for p in ("state.csv", "psi1.csv", "psi2.csv"):
        _io.write_sidecar(os.path.join(outdir, p), cfg, mesh, _tolerances(cfg))


def _mode_solve(cfg: dict) -> int:
    out = cfg["run.out"]
    raw = cfg["run.lambdas"].strip()
    if raw:
        lams = sorted(_lambda_grid(cfg, *_build(cfg)))
        jobs = [(copy.deepcopy(cfg), lam, os.path.join(out, f"lam_{_io.fmt_float(lam)}")) for lam in lams]
        workers = max(1, cfg["run.workers"])
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                list(pool.map(_solve_job, jobs))
        else:
            for job in jobs:
                _solve_job(job)
        # deterministic merge, sorted by lambda
        merged = os.path.join(out, "states.csv")
        with open(merged, "w") as fh:
            fh.write("lambda,alpha1,alpha2,pde_residual,mass_defect_1,mass_defect_2\n")
            for _, lam, sub in jobs:
                with open(os.path.join(sub, "state.csv")) as part:
                    fh.write(part.readlines()[1])
        mesh, _ = _build(cfg)
        _io.write_sidecar(merged, cfg, mesh, _tolerances(cfg))
    else:
        _solve_single(cfg, cfg["run.lam"], out)
    return EXIT_OK


def _solve_job(job) -> None:
    cfg, lam, outdir = job
    _solve_single(cfg, lam, outdir)


def _mode_branch(cfg: dict) -> int:
    mesh, params = _build(cfg)
    verbose = (lambda s: print(s, file=sys.stderr)) if cfg["run.verbose"] >= 1 else None
    nlog = (lambda s: print(s, file=sys.stderr)) if cfg["run.verbose"] >= 2 else None
    past = min(params.p1, params.p2) >= 1
    branch = continue_branch(
        mesh, params, cfg["run.lambda_max"], _step_control(cfg),
        continue_past_positivity=past, log=verbose, newton_log=nlog,
    )
    out = cfg["run.out"]
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "branch.csv")
    _io.write_records_csv(path, branch.records)
    _io.write_sidecar(path, cfg, mesh, _tolerances(cfg))
    thresholds = {
        "lambda_bar": branch.lambda_bar,
        "lambda_bar_bracket": branch.lambda_bar_bracket,
        "lambda_star": branch.lambda_star,
        "lambda_star_bracket": branch.lambda_star_bracket,
        "stop_reason": branch.stop_reason,
        "n_states": len(branch.states),
    }
    with open(os.path.join(out, "thresholds.json"), "w") as fh:
        json.dump(thresholds, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"branch: {len(branch.states)} states, stop={branch.stop_reason}")
    if branch.lambda_star_bracket:
        print(f"lambda_star in [{branch.lambda_star_bracket[0]:.6g}, {branch.lambda_star_bracket[1]:.6g}]")
    if branch.lambda_bar_bracket:
        print(f"lambda_bar in [{branch.lambda_bar_bracket[0]:.6g}, {branch.lambda_bar_bracket[1]:.6g}]")
    return EXIT_OK


def _mode_spectrum(cfg: dict) -> int:
    mesh, params = _build(cfg)
    state = solve_at(mesh, params, cfg["run.lam"])
    space = WeightedSpace.from_state(mesh, params, state)
    spec = eigen_solve(space, mesh, k=cfg["run.k"], seed=7 + cfg["run.seed"])
    out = cfg["run.out"]
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "spectrum.csv")
    _io.write_spectrum_csv(path, spec)
    _io.write_sidecar(path, cfg, mesh, _tolerances(cfg))
    if cfg["run.dump_fields"]:
        for k, (f1, f2) in enumerate(spec.fields, start=1):
            _io.write_field_csv(os.path.join(out, f"eigenfield_{k}_1.csv"), mesh, f1)
            _io.write_field_csv(os.path.join(out, f"eigenfield_{k}_2.csv"), mesh, f2)
    print(f"spectrum at lam={state.lam:.6g}: sigma1={spec.sigma1:.8g}")
    return EXIT_OK


def _mode_oracle(cfg: dict) -> int:
    mesh, params = _build(cfg)
    lams = _lambda_grid(cfg, mesh, params)
    out = cfg["run.out"]
    os.makedirs(out, exist_ok=True)
    rows = []
    for lam in lams:
        newton_state = solve_at(mesh, params, lam)
        var_state, _, rep = coordinate_minimize(mesh, params, lam)
        dal = max(abs(newton_state.alpha1 - var_state.alpha1),
                  abs(newton_state.alpha2 - var_state.alpha2))
        dpsi = max(
            float(np.max(np.abs(newton_state.psi1 - var_state.psi1))),
            float(np.max(np.abs(newton_state.psi2 - var_state.psi2))),
        )
        rows.append((lam, newton_state.alpha1, newton_state.alpha2,
                     var_state.alpha1, var_state.alpha2, dal, dpsi, rep.j_final, rep.sweeps))
    path = os.path.join(out, "oracle.csv")
    with open(path, "w") as fh:
        fh.write("lambda,alpha1_newton,alpha2_newton,alpha1_vp,alpha2_vp,"
                 "max_dalpha,max_dpsi,J,sweeps\n")
        for row in rows:
            fh.write(",".join(_io.fmt_float(v) for v in row) + "\n")
    _io.write_sidecar(path, cfg, mesh, _tolerances(cfg))
    worst = max(max(r[5], r[6]) for r in rows)
    print(f"oracle: {len(rows)} couplings, worst newton-vs-minimizer deviation {worst:.3e}")
    return EXIT_OK


def _mode_verify(cfg: dict) -> int:
    checks = verification_suite(cfg)
    failures = 0
    for name, ok, detail in checks:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        failures += 0 if ok else 1
    print(f"verify: {len(checks) - failures}/{len(checks)} checks passed")
    return EXIT_OK if failures == 0 else EXIT_VERIFY


def verification_suite(cfg: dict) -> List[Tuple[str, bool, str]]:
    """Invariant suite over a fresh small branch; one (name, ok, detail) per check."""
    mesh, params = _build(cfg)
    rng = np.random.default_rng(cfg["run.seed"])
    checks: List[Tuple[str, bool, str]] = []

    # quadrature and Green-operator structure
    ones = np.ones(mesh.num_nodes)
    mass = mesh.integrate(ones)
    checks.append(("quadrature_mass", abs(mass - 1.0) <= max(1e-10, 2 * mesh.h),
                   f"integral of 1 = {mass:.12g}"))
    u = mesh.green_apply(rng.random(mesh.num_nodes))
    v = mesh.green_apply(rng.random(mesh.num_nodes))
    lhs = mesh.gradient_dot(u, v)
    rhs = mesh.integrate(-mesh.laplacian(u) * v)
    checks.append(("green_identity", abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs)),
                   f"|{lhs:.12g} - {rhs:.12g}|"))
    rho, sig = rng.random(mesh.num_nodes), rng.random(mesh.num_nodes)
    sa = mesh.integrate(mesh.green_apply(rho) * sig) - mesh.integrate(rho * mesh.green_apply(sig))
    checks.append(("green_self_adjoint", abs(sa) <= 1e-10, f"defect {sa:.3e}"))
    mono = bool(np.min(mesh.green_apply(rng.random(mesh.num_nodes))) >= -1e-14)
    checks.append(("green_monotone", mono, "G[rho] >= 0 for rho >= 0"))

    # base state and the certified small-coupling region
    lam0, info = contraction_threshold(mesh, params)
    state0 = zero_coupling_state(mesh)
    res0 = state0.max_residual(mesh, params)
    checks.append(("zero_coupling_state", res0 <= 1e-9, f"residual {res0:.3e}"))

    try:
        branch = continue_branch(
            mesh, params, lam0,
            StepControl(dlam_init=lam0 / 5, dlam_max=lam0 / 4),
        )
        nstates = len(branch.states)
        checks.append(("branch_reaches_lam0", branch.stop_reason == "lambda_max",
                       f"{nstates} states, stop={branch.stop_reason}"))
        amin = min(min(r.alpha1, r.alpha2) for r in branch.records)
        checks.append(("alpha_above_one_third", amin > 1.0 / 3.0, f"min alpha {amin:.6g}"))
        rep = monotonicity_audit(branch)
        checks.append(("monotonicity", rep.ok,
                       f"{len(rep.violations)} violations over {rep.n_records} records"))
        ham = map_to_hamiltonian(mesh, params, branch.states[-1])
        checks.append(("hamiltonian_image", ham.norm_identity_gap <= 1e-8
                       and max(ham.residual1, ham.residual2) <= 1e-8,
                       f"norm gap {ham.norm_identity_gap:.2e}"))
        # cross-solver agreement at an interior coupling
        lam_probe = branch.states[max(1, nstates // 2)].lam
        st_newton = branch.state_at(lam_probe)
        st_fix = alpha_root_find(mesh, params, lam_probe)
        st_var, _, _ = coordinate_minimize(mesh, params, lam_probe)
        worst = 0.0
        for other in (st_fix, st_var):
            worst = max(
                worst,
                abs(st_newton.alpha1 - other.alpha1),
                abs(st_newton.alpha2 - other.alpha2),
                float(np.max(np.abs(st_newton.psi1 - other.psi1))),
                float(np.max(np.abs(st_newton.psi2 - other.psi2))),
            )
        checks.append(("cross_solver", worst <= 1e-6,
                       f"max deviation {worst:.3e} at lam={lam_probe:.4g}"))
    except SolverError as exc:
        checks.append(("small_lambda_branch", False, f"{exc}"))

    # spectral structure against the dense oracle on a small fresh mesh
    small = build_mesh(mesh.shape, 16)
    space = WeightedSpace.from_state(small, params, zero_coupling_state(small))
    spec_it = eigen_solve(space, small, k=4, seed=7 + cfg["run.seed"])
    spec_dn = dense_eigen_solve(space, small, k=4)
    rel = float(np.max(np.abs(spec_it.sigmas - spec_dn.sigmas) / np.abs(spec_dn.sigmas)))
    checks.append(("eigen_vs_dense", rel <= 1e-6, f"max rel deviation {rel:.3e}"))
    ortho = 0.0
    for a in range(4):
        for b in range(a + 1, 4):
            for i in (1, 2):
                ortho = max(ortho, abs(space.inner(i, spec_it.pairs[a][i - 1], spec_it.pairs[b][i - 1])))
    checks.append(("component_orthogonality", ortho <= 1e-8, f"max cross product {ortho:.2e}"))
    _ = info
    return checks


# ---------------------------------------------------------------------------


def _make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="plasmapair",
        description="Coupled plasma-type free-boundary system: solve, continue, audit.",
    )
    sub = parser.add_subparsers(dest="mode", required=True)
    for mode in ("solve", "branch", "spectrum", "verify", "oracle"):
        p = sub.add_parser(mode)
        p.add_argument("--config", default=None, help="YAML config file")
        for key, cast in _CASTS.items():
            p.add_argument(f"--{key}", dest=key.replace(".", "__"), default=None,
                           type=str, help=f"override {key} ({cast.__name__})")
    return parser


def run(cfg: dict, mode: str) -> int:
    dispatch = {
        "solve": _mode_solve,
        "branch": _mode_branch,
        "spectrum": _mode_spectrum,
        "verify": _mode_verify,
        "oracle": _mode_oracle,
    }
    return dispatch[mode](cfg)


def main(argv: Optional[List[str]] = None) -> int:
    args = _make_parser().parse_args(argv)
    overrides = {
        key: getattr(args, key.replace(".", "__"))
        for key in _CASTS
    }
    try:
        cfg = load_config(args.config, overrides)
        cfg["run.mode"] = args.mode
        code = run(cfg, args.mode)
    except ConfigError as exc:
        print(json.dumps({"error": exc.name, "detail": exc.detail}), file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, ContractionError, NewtonError) as exc:
        print(json.dumps({"error": "solver_failure", "detail": str(exc)}), file=sys.stderr)
        return EXIT_SOLVER
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
