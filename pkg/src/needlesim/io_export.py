"""Output writers: legacy-VTK snapshots and CSV traces.

The trace header is fixed: `step,time,dofs,eta_max,` followed by one column
per probe (in configuration order) and, when a target point is configured,
`tip_target_distance`.  Constraint diagnostics go to a separate CSV so the
trace layout stays stable.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

_VTK_HEX = 12


@dataclass
class TraceRecord:
    step: int
    time: float
    dofs: int
    eta_max: float
    probe_displacements: dict
    tip_target_distance: float | None = None
    # diagnostics (constraints.csv)
    phase: str = ""
    tip_state: str = "free"
    tip_motion: str = "inactive"
    n_contact: int = 0
    n_shaft: int = 0
    n_junction_rows: int = 0
    pgs_iterations: int = 0
    pgs_converged: bool = True
    max_penetration: float = 0.0
    tip_force: float = 0.0
    wall_time: float = 0.0


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def export_traces(records, path, probe_names, has_target: bool) -> None:
    """Write the step trace CSV (fixed header, one row per record)."""
    path = Path(path)
    try:
        with path.open("w") as fh:
            cols = ["step", "time", "dofs", "eta_max"] + list(probe_names)
            if has_target:
                cols.append("tip_target_distance")
            fh.write(",".join(cols) + "\n")
            for r in records:
                row = [str(r.step), _fmt(r.time), str(r.dofs), _fmt(r.eta_max)]
                row += [_fmt(r.probe_displacements.get(name, 0.0))
                        for name in probe_names]
                if has_target:
                    d = r.tip_target_distance
                    row.append(_fmt(d if d is not None else float("nan")))
                fh.write(",".join(row) + "\n")
    except OSError as exc:
        raise OSError(f"failed writing trace {path}: {exc}") from exc


def export_constraint_diagnostics(records, path) -> None:
    path = Path(path)
    try:
        with path.open("w") as fh:
            fh.write("step,phase,tip_state,tip_motion,n_contact,n_shaft,"
                     "n_junction_rows,pgs_iterations,pgs_converged,"
                     "max_penetration,tip_force,wall_time\n")
            for r in records:
                fh.write(",".join([
                    str(r.step), r.phase, r.tip_state, r.tip_motion,
                    str(r.n_contact), str(r.n_shaft), str(r.n_junction_rows),
                    str(r.pgs_iterations), str(int(r.pgs_converged)),
                    _fmt(r.max_penetration), _fmt(r.tip_force),
                    _fmt(r.wall_time)]) + "\n")
    except OSError as exc:
        raise OSError(f"failed writing diagnostics {path}: {exc}") from exc


def export_vtk(mesh, displacements, eta, von_mises, path) -> None:
    """Legacy-format unstructured-grid snapshot.

    Points are rest positions; nodal displacement vectors, per-cell error
    indicator and Von Mises stress ride along as attributes.
    """
    path = Path(path)
    ids, conn = mesh.active_connectivity()
    n = mesh.n_nodes
    disp = np.asarray(displacements, dtype=float).reshape(n, 3)
    eta = np.asarray(eta, dtype=float)
    von_mises = np.asarray(von_mises, dtype=float)
    if len(eta) != len(ids) or len(von_mises) != len(ids):
        raise ValueError(f"cell-data length mismatch: {len(ids)} cells, "
                         f"{len(eta)} eta, {len(von_mises)} von Mises")
    try:
        with path.open("w") as fh:
            fh.write("# vtk DataFile Version 3.0\n")
            fh.write("needle insertion snapshot\n")
            fh.write("ASCII\nDATASET UNSTRUCTURED_GRID\n")
            fh.write(f"POINTS {n} float\n")
            for p in mesh.nodes:
                fh.write(f"{_fmt(p[0])} {_fmt(p[1])} {_fmt(p[2])}\n")
            fh.write(f"CELLS {len(ids)} {9 * len(ids)}\n")
            for row in conn:
                fh.write("8 " + " ".join(str(int(i)) for i in row) + "\n")
            fh.write(f"CELL_TYPES {len(ids)}\n")
            for _ in ids:
                fh.write(f"{_VTK_HEX}\n")
            fh.write(f"CELL_DATA {len(ids)}\n")
            fh.write("SCALARS error_indicator float 1\nLOOKUP_TABLE default\n")
            for e in eta:
                fh.write(f"{_fmt(e)}\n")
            fh.write("SCALARS von_mises float 1\nLOOKUP_TABLE default\n")
            for s in von_mises:
                fh.write(f"{_fmt(s)}\n")
            fh.write(f"POINT_DATA {n}\n")
            fh.write("VECTORS displacement float\n")
            for d in disp:
                fh.write(f"{_fmt(d[0])} {_fmt(d[1])} {_fmt(d[2])}\n")
    except OSError as exc:
        raise OSError(f"failed writing VTK {path}: {exc}") from exc
