"""Deterministic file output: CSV tables, field dumps, JSON sidecars.

All floating-point output uses 17 significant digits so files round-trip
bit-exactly and identical runs produce byte-identical artifacts.
"""
from __future__ import annotations

import hashlib
import json
import os
from typing import Iterable, List, Sequence

import numpy as np

from .mesh import DomainMesh
from .contours import Contour
from .diagnostics import RECORD_COLUMNS, BranchRecord

__all__ = [
    "fmt_float",
    "config_hash",
    "write_sidecar",
    "write_field_csv",
    "write_records_csv",
    "write_spectrum_csv",
    "write_contours",
]


def fmt_float(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def write_sidecar(path: str, config: dict, mesh: DomainMesh, tolerances: dict) -> str:
    """JSON sidecar recording provenance for one output file."""
    side = {
        "for": os.path.basename(path),
        "config_sha256": config_hash(config),
        "mesh": {
            "shape": mesh.shape.kind,
            "aspect": mesh.shape.aspect,
            "n": mesh.n,
            "num_nodes": mesh.num_nodes,
            "h": mesh.h,
            "mass_defect": mesh.mass_defect,
        },
        "tolerances": tolerances,
    }
    out = path + ".json"
    with open(out, "w") as fh:
        json.dump(side, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out


def write_field_csv(path: str, mesh: DomainMesh, values) -> None:
    values = mesh.check_field(values)
    with open(path, "w") as fh:
        fh.write("x,y,value\n")
        for (x, y), v in zip(mesh.points, values):
            fh.write(f"{fmt_float(x)},{fmt_float(y)},{fmt_float(v)}\n")


def write_records_csv(path: str, records: Sequence[BranchRecord]) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(RECORD_COLUMNS) + "\n")
        for rec in records:
            fh.write(",".join(fmt_float(v) for v in rec.as_row()) + "\n")


def write_spectrum_csv(path: str, spectral) -> None:
    with open(path, "w") as fh:
        fh.write("k,sigma,mu,residual\n")
        mus = spectral.mus if spectral.mus is not None else [float("nan")] * len(spectral.sigmas)
        for k, (s, m, r) in enumerate(zip(spectral.sigmas, mus, spectral.residuals), start=1):
            fh.write(f"{k},{fmt_float(s)},{fmt_float(m)},{fmt_float(r)}\n")


def write_contours(outdir: str, stem: str, per_component: List[List[Contour]]) -> str:
    """One CSV per contour plus a manifest JSON; returns the manifest path."""
    os.makedirs(outdir, exist_ok=True)
    manifest = []
    for comp, contours in enumerate(per_component, start=1):
        for idx, c in enumerate(contours):
            name = f"{stem}_c{comp}_{idx}.csv"
            with open(os.path.join(outdir, name), "w") as fh:
                fh.write("x,y\n")
                for x, y in c.points:
                    fh.write(f"{fmt_float(x)},{fmt_float(y)}\n")
            manifest.append(
                {"file": name, "component": comp, "closed": bool(c.closed), "area": c.area}
            )
    mpath = os.path.join(outdir, f"{stem}_contours.json")
    with open(mpath, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return mpath
