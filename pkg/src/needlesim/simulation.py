"""Coupled needle-tissue stepping: the per-step pipeline is

    assemble -> free motion -> constraint solve -> commit -> estimate/adapt -> record.

The tissue is a corotational hex FEM on an adaptively refined grid; needles
are corotational beams driven kinematically from their base.  Interaction
runs through Lagrange multipliers on a shared compliance system: surface
contact with Coulomb friction before puncture, then a cutting tip plus
friction-loaded shaft points along the insertion path.  T-junction rows ride
in the same solve, so hanging-node continuity holds step by step.

DBS-style scenarios add a quasi-static preload (brain shift surrogate), an
electrode beam released at target depth, and cannula retraction.
"""
from __future__ import annotations

import dataclasses
import logging
import time as _time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import constraints as con
from .adaptivity import adapt_step, element_error
from .beam import BeamModel
from .constraints import InteractionParameters, RowMeta, RowsBuilder
from .geometry import SurfaceGeometry, box_surface, ellipsoid_surface, load_obj
from .hex_fem import CorotationalFem, Material, von_mises
from .hex_mesh import HexMesh, shape_values
from .integrator import (SystemMatrices, assemble_system, commit_step,
                         solve_free_motion, static_solve)
from .io_export import (TraceRecord, export_constraint_diagnostics,
                        export_traces, export_vtk)
from .scenario import ScenarioConfig

log = logging.getLogger(__name__)


class PathTracker:
    """Polyline of rest-space material points from the entry to the deepest
    tip position, parametrised by arclength."""

    def __init__(self):
        self._pts: list[np.ndarray] = []
        self._cum: list[float] = []

    @property
    def started(self) -> bool:
        return bool(self._pts)

    def start(self, p) -> None:
        self._pts = [np.asarray(p, dtype=float).copy()]
        self._cum = [0.0]

    def extend_to(self, p, min_step: float = 1e-7) -> None:
        p = np.asarray(p, dtype=float)
        d = float(np.linalg.norm(p - self._pts[-1]))
        if d >= min_step:
            self._pts.append(p.copy())
            self._cum.append(self._cum[-1] + d)

    def total(self) -> float:
        return self._cum[-1] if self._cum else 0.0

    def point_at(self, s: float) -> np.ndarray:
        s = min(max(s, 0.0), self.total())
        k = int(np.searchsorted(self._cum, s))
        if k == 0:
            return self._pts[0].copy()
        a = (s - self._cum[k - 1]) / (self._cum[k] - self._cum[k - 1])
        return (1 - a) * self._pts[k - 1] + a * self._pts[k]

    def project(self, p) -> float:
        """Arclength of the polyline point nearest to p."""
        p = np.asarray(p, dtype=float)
        best_s, best_d = 0.0, np.inf
        for k in range(len(self._pts) - 1):
            a, b = self._pts[k], self._pts[k + 1]
            ab = b - a
            denom = float(ab @ ab)
            t = 0.0 if denom == 0 else float(np.clip((p - a) @ ab / denom, 0.0, 1.0))
            q = a + t * ab
            d = float(np.linalg.norm(p - q))
            if d < best_d:
                seg = self._cum[k + 1] - self._cum[k]
                best_s, best_d = self._cum[k] + t * seg, d
        return best_s


@dataclass
class _Probe:
    name: str
    rest_world: np.ndarray
    element: int = -1
    xi: np.ndarray = field(default_factory=lambda: np.zeros(3))


@dataclass
class _InteractionPoint:
    """Book-keeping between row assembly and the post-solve update."""
    kind: str
    rows: dict
    abscissa: float | None = None
    beam_index: int | None = None
    gap: float = 0.0


def build_surface(cfg: ScenarioConfig) -> SurfaceGeometry:
    t = cfg.tissue
    if t.shape == "box":
        return box_surface(t.origin, t.size)
    if t.shape == "ellipsoid":
        return ellipsoid_surface(t.center, t.semi_axes)
    return load_obj(t.obj_path)


def _orthonormal_frame(d: np.ndarray) -> np.ndarray:
    """Rows (d, t1, t2) completing direction d to an orthonormal frame."""
    d = d / np.linalg.norm(d)
    a = np.array([1.0, 0.0, 0.0]) if abs(d[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    t1 = np.cross(d, a)
    t1 /= np.linalg.norm(t1)
    return np.vstack([d, t1, np.cross(d, t1)])


class Simulation:
    def __init__(self, config: ScenarioConfig):
        self.config = config
        self.tau = config.tau
        self.params: InteractionParameters = config.interaction
        # the velocity-level solve works in impulses (force x tau); the
        # configured strengths are forces
        self._solver_params = dataclasses.replace(
            config.interaction,
            puncture_strength=config.interaction.puncture_strength * self.tau,
            cutting_strength=config.interaction.cutting_strength * self.tau)

        self.surface = build_surface(config)
        self.mesh = HexMesh.voxelize_domain(self.surface, config.tissue.resolution,
                                            max_depth=config.max_depth)
        for _ in range(config.uniform_refine):
            self.mesh.refine_elements(self.mesh.active_element_ids())
        self.tissue_material = Material(
            young_modulus=config.tissue.young_modulus,
            poisson_ratio=config.tissue.poisson_ratio,
            density=config.tissue.density,
            rayleigh_mass=config.tissue.rayleigh_mass,
            rayleigh_stiffness=config.tissue.rayleigh_stiffness)
        self.fem = CorotationalFem(self.mesh, self.tissue_material)
        self.x = self.mesh.nodes.ravel().copy()
        self.v = np.zeros_like(self.x)

        nd = config.needle
        self.needle_material = Material(
            young_modulus=nd.young_modulus, poisson_ratio=nd.poisson_ratio,
            density=nd.density, rayleigh_mass=nd.rayleigh_mass,
            rayleigh_stiffness=nd.rayleigh_stiffness)
        self.needle = BeamModel.straight(nd.base, nd.direction, nd.length,
                                         nd.segments, nd.radius,
                                         self.needle_material)
        self.needle_rest_length = float(self.needle.rest_lengths.sum())
        self.electrode: BeamModel | None = None
        self.electrode_tip_s: float = 0.0

        self.phase = "insert"
        self.tip_state = "free"
        self.tip_motion = "inactive"
        self.path = PathTracker()
        self.tip_s = 0.0                      # cannula-tip arclength on path
        self.step_index = 0
        self.time = 0.0
        self.eta_max = 0.0
        self._eta: np.ndarray | None = None
        self.records: list[TraceRecord] = []

        self.probes = [_Probe(name, np.asarray(p, dtype=float))
                       for name, p in config.probes.items()]
        self.target_anchor: tuple[int, np.ndarray] | None = None
        self._anchor_version = -1
        self._resolve_anchors()

        self._preload_nodes_fixed = config.preload_box is not None
        if self._preload_nodes_fixed:
            self._apply_preload()

    # ------------------------------------------------------------ anchors

    def _resolve_anchors(self) -> None:
        if self._anchor_version == self.mesh.topology_version:
            return
        for pr in self.probes:
            hit = self.mesh.locate_or_nearest(pr.rest_world)
            pr.element, pr.xi = hit[0], hit[1]
            if not hit[2]:
                log.warning("probe %s lies outside the tissue; clamped", pr.name)
        if self.config.target is not None:
            eid, xi, ok = self.mesh.locate_or_nearest(self.config.target)
            self.target_anchor = (eid, xi)
            if not ok:
                log.warning("target lies outside the tissue; clamped")
        self._anchor_version = self.mesh.topology_version

    def _anchor_world(self, element: int, xi) -> np.ndarray:
        ids = self.mesh.elements[element].node_ids
        return shape_values(xi) @ self.x.reshape(-1, 3)[ids]

    def probe_displacements(self) -> dict:
        self._resolve_anchors()
        out = {}
        for pr in self.probes:
            out[pr.name] = float(np.linalg.norm(
                self._anchor_world(pr.element, pr.xi) - pr.rest_world))
        return out

    def tip_target_distance(self) -> float | None:
        if self.target_anchor is None:
            return None
        self._resolve_anchors()
        target = self._anchor_world(*self.target_anchor)
        beam = self.electrode if self.electrode is not None else self.needle
        return float(np.linalg.norm(beam.x[-1] - target))

    # ----------------------------------------------------------- Dirichlet

    def _fixed_mask(self) -> np.ndarray:
        nodes = self.mesh.nodes
        mask = np.zeros(len(nodes), dtype=bool)
        if self.config.clamp_face is not None:
            lo, hi = self.surface.bounds()
            axis = "xyz".index(self.config.clamp_face[0])
            plane = lo[axis] if self.config.clamp_face.endswith("min") else hi[axis]
            near = np.abs(nodes[:, axis] - plane) <= 1e-6
            # an immersed grid need not carry nodes exactly on the surface
            # plane; fall back to the outermost node layer
            if not np.any(near):
                coords = nodes[:, axis]
                extreme = coords.min() if self.config.clamp_face.endswith("min") \
                    else coords.max()
                near = np.abs(coords - extreme) <= 1e-6
            mask |= near
        for lo, hi in self.config.clamp_boxes:
            inside = np.all((nodes >= lo - 1e-12) & (nodes <= hi + 1e-12), axis=1)
            mask |= inside
        if self.config.preload_box is not None:
            lo, hi = self.config.preload_box
            inside = np.all((nodes >= lo - 1e-12) & (nodes <= hi + 1e-12), axis=1)
            mask |= inside
        return np.repeat(mask, 3)

    def _preload_mask(self) -> np.ndarray:
        nodes = self.mesh.nodes
        lo, hi = self.config.preload_box
        inside = np.all((nodes >= lo - 1e-12) & (nodes <= hi + 1e-12), axis=1)
        return np.repeat(inside, 3)

    def _apply_preload(self) -> None:
        """Brain-shift surrogate: displace the preload region, relax the rest
        of the tissue to static equilibrium, then hold the region fixed."""
        fixed = self._fixed_mask()
        pre = self._preload_mask()
        disp = np.zeros_like(self.x)
        disp.reshape(-1, 3)[pre[0::3]] = self.config.preload_displacement
        T = self.mesh.build_t_matrix()
        self.x = static_solve(self.fem, np.zeros_like(self.x), fixed,
                              prescribed_u=disp, T=T if T.shape[0] else None)
        self.v[:] = 0.0
        log.info("preload applied: |u|_max = %.3e m",
                 np.abs(self.x - self.mesh.nodes.ravel()).max())

    # ------------------------------------------------------------- systems

    def _tissue_system(self, fixed: np.ndarray) -> SystemMatrices:
        f_int, K, _ = self.fem.forces_and_tangent(self.x)
        M = self.fem.lumped_mass()
        mat = self.tissue_material
        damp = mat.rayleigh_mass * M * self.v + mat.rayleigh_stiffness * (K @ self.v)
        f = -f_int - damp
        return assemble_system(M, K, f, self.v, self.tau,
                               alpha=mat.rayleigh_mass,
                               beta=mat.rayleigh_stiffness,
                               fixed=fixed,
                               prescribed_dv=-self.v)

    def _beam_system(self, beam: BeamModel, drive: np.ndarray | None) -> SystemMatrices:
        f_el, K = beam.forces_and_tangent()
        M = beam.lumped_mass()
        mat = beam.material
        damp = mat.rayleigh_mass * M * beam.v + mat.rayleigh_stiffness * (K @ beam.v)
        f = -f_el - damp
        fixed = np.zeros(beam.n_dofs, dtype=bool)
        prescribed = None
        if drive is not None:
            fixed[0:6] = True
            target = np.zeros(beam.n_dofs)
            target[0:3] = drive
            prescribed = target - beam.v
        return assemble_system(M, K, f, beam.v, self.tau,
                               alpha=mat.rayleigh_mass,
                               beta=mat.rayleigh_stiffness,
                               fixed=fixed, prescribed_dv=prescribed)

    # ------------------------------------------------------- constraints

    def _surface_anchor(self, tip_pos):
        """Material point on the tissue surface nearest the tip.

        The surface is a material surface of the rest configuration; its
        points move with the tissue.  Pull the tip back by the local
        displacement, re-project onto the rest surface, and iterate.
        Returns ((element, xi), outward normal, normal gap to the deformed
        anchor position).
        """
        x3 = self.x.reshape(-1, 3)
        q, n_srf, _ = self.surface.closest_point(tip_pos)
        eid, xi = -1, None
        for _ in range(8):
            eid, xi, _ = self.mesh.locate_or_nearest(q)
            ids = self.mesh.elements[eid].node_ids
            u = shape_values(xi) @ (x3[ids] - self.mesh.nodes[ids])
            q_new, n_srf, _ = self.surface.closest_point(tip_pos - u)
            done = np.linalg.norm(q_new - q) < 1e-12
            q = q_new
            if done:
                break
        eid, xi, _ = self.mesh.locate_or_nearest(q)
        world = self._anchor_world(eid, xi)
        gap = float(n_srf @ (tip_pos - world))
        return (eid, xi), n_srf, gap

    def _drive_velocity(self) -> np.ndarray | None:
        d = self.config.needle.direction
        speed = self.config.needle.speed
        if self.phase == "insert":
            return speed * d
        if self.phase == "retract":
            return -speed * d
        if self.phase in ("hold", "done"):
            return np.zeros(3)
        return np.zeros(3)

    def _tissue_row(self, builder: RowsBuilder, row: int, anchor, direction,
                    sign: float = -1.0) -> None:
        eid, xi = anchor
        ids, w = con.tissue_point_entries(self.mesh, eid, xi)
        for i, nid in enumerate(ids):
            for k in range(3):
                if direction[k]:
                    builder.add(0, row, 3 * int(nid) + k, sign * w[i] * direction[k])

    def _beam_row(self, builder: RowsBuilder, obj: int, row: int,
                  beam: BeamModel, s: float, direction) -> None:
        for dof, wt in beam.point_jacobian_entries(s):
            axis = dof % 6
            if direction[axis]:
                builder.add(obj, row, dof, wt * direction[axis])

    def _build_constraints(self, beams: list, fixed_masks: list):
        """Rows for T-junctions and the needle-tissue interaction.

        Returns (meta, builder-matrices, bias, point records).
        """
        mesh = self.mesh
        meta = RowMeta()
        n_dofs = [3 * mesh.n_nodes] + [b.n_dofs for b in beams]
        builder = RowsBuilder(n_dofs)
        bias: list[float] = []
        points: list[_InteractionPoint] = []
        x3 = self.x.reshape(-1, 3)
        x0 = mesh.nodes
        tissue_fixed = fixed_masks[0]

        # hanging-node continuity rows
        for tj in mesh.flattened_t_junctions():
            if tissue_fixed[3 * tj.slave]:
                continue
            pr = meta.add_point(len(points), "tjunction")
            for ax, role in enumerate("xyz"):
                row = pr.rows[role]
                builder.add(0, row, 3 * tj.slave + ax, 1.0)
                drift = x3[tj.slave, ax] - x0[tj.slave, ax]
                for m, w in zip(tj.masters, tj.weights):
                    builder.add(0, row, 3 * m + ax, -w)
                    drift -= w * (x3[m, ax] - x0[m, ax])
                bias.append(drift / self.tau)
            points.append(_InteractionPoint("tjunction", pr.rows))

        needle = beams[0]
        tip_pos = needle.x[-1]

        if self.tip_state == "on_surface":
            anchor, n_srf, gap = self._surface_anchor(tip_pos)
            frame = _orthonormal_frame(n_srf)
            pr = meta.add_point(len(points), "surface")
            for d_row, role in zip(frame, ("normal", "t1", "t2")):
                row = pr.rows[role]
                self._beam_row(builder, 1, row, needle, self.needle_rest_length, d_row)
                self._tissue_row(builder, row, anchor, d_row)
                bias.append(gap / self.tau if role == "normal" else 0.0)
            points.append(_InteractionPoint("surface", pr.rows, gap=gap))

        elif self.tip_state == "inserted":
            _, t, n1, n2 = needle.tip_frame()
            anchor = con.material_anchor(mesh, x3, tip_pos)[:2]
            anchor_world = self._anchor_world(*anchor)
            offset = tip_pos - anchor_world
            pr = meta.add_point(len(points), "tip")
            for d_row, role in zip((t, n1, n2), ("axial", "t1", "t2")):
                row = pr.rows[role]
                self._beam_row(builder, 1, row, needle, self.needle_rest_length, d_row)
                self._tissue_row(builder, row, anchor, d_row)
                bias.append(0.0 if role == "axial" else float(d_row @ offset) / self.tau)
            points.append(_InteractionPoint("tip", pr.rows,
                                            abscissa=self.needle_rest_length,
                                            beam_index=1))

            # friction points along the inserted shaft (cannula)
            for s_k, anchor in self._shaft_samples(self.tip_s):
                self._add_shaft_point(meta, builder, bias, points, beams,
                                      beam_index=1, path_s=s_k, anchor=anchor,
                                      beam_s=self.needle_rest_length - (self.tip_s - s_k))

        if self.electrode is not None:
            le = float(self.electrode.rest_lengths.sum())
            pr = meta.add_point(len(points), "tip")
            _, t, n1, n2 = self.electrode.tip_frame()
            e_tip = self.electrode.x[-1]
            anchor = con.material_anchor(mesh, x3, e_tip)[:2]
            offset = e_tip - self._anchor_world(*anchor)
            for d_row, role in zip((t, n1, n2), ("axial", "t1", "t2")):
                row = pr.rows[role]
                self._beam_row(builder, 2, row, self.electrode, le, d_row)
                self._tissue_row(builder, row, anchor, d_row)
                bias.append(0.0 if role == "axial" else float(d_row @ offset) / self.tau)
            points.append(_InteractionPoint("tip", pr.rows, abscissa=le, beam_index=2))

            for s_k, anchor in self._shaft_samples(self.electrode_tip_s):
                if s_k <= self.electrode_tip_s - le:
                    continue        # behind the electrode base
                if self.tip_state == "inserted" and s_k <= self.tip_s:
                    continue        # tissue still touches the cannula there
                self._add_shaft_point(meta, builder, bias, points, beams,
                                      beam_index=2, path_s=s_k, anchor=anchor,
                                      beam_s=le - (self.electrode_tip_s - s_k))

        Js = builder.matrices(meta.n_rows)
        from scipy import sparse
        for i, (J, fm) in enumerate(zip(Js, fixed_masks)):
            Js[i] = (J @ sparse.diags((~fm).astype(float))).tocsr()
        return meta, Js, np.asarray(bias), points

    def _shaft_samples(self, tip_s: float) -> list:
        """Shaft arclengths with tissue anchors, thinned so that no two
        points (nor a point and the tip) land closer than the local element
        size allows; denser sampling would over-constrain the element."""
        kept = []
        s_prev = tip_s
        for s_k in reversed(con.shaft_arclengths(tip_s,
                                                 self.params.shaft_spacing)):
            eid, xi, _ = self.mesh.locate_or_nearest(self.path.point_at(s_k))
            h = float(np.max(self.mesh.element_size(self.mesh.elements[eid].depth)))
            if s_prev - s_k < 0.7 * h:
                continue
            kept.append((s_k, (eid, xi)))
            s_prev = s_k
        kept.reverse()
        return kept

    def _add_shaft_point(self, meta, builder, bias, points, beams,
                         beam_index: int, path_s: float, beam_s: float,
                         anchor) -> None:
        beam = beams[beam_index - 1]
        pos_b, frame = beam.shaft_point(beam_s)
        t, n1, n2 = frame[:, 0], frame[:, 1], frame[:, 2]
        offset = pos_b - self._anchor_world(*anchor)
        pr = meta.add_point(len(points), "shaft")
        for d_row, role in zip((t, n1, n2), ("axial", "t1", "t2")):
            row = pr.rows[role]
            self._beam_row(builder, beam_index, row, beam, beam_s, d_row)
            self._tissue_row(builder, row, anchor, d_row)
            bias.append(0.0 if role == "axial" else float(d_row @ offset) / self.tau)
        points.append(_InteractionPoint("shaft", pr.rows, abscissa=beam_s,
                                        beam_index=beam_index))

    # ------------------------------------------------------------- stepping

    def _contact_activation_distance(self) -> float:
        return max(1.5 * self.tau * self.config.needle.speed,
                   self.params.penetration_tolerance)

    def step(self) -> TraceRecord:
        t_start = _time.perf_counter()
        cfg = self.config
        self.fem.refresh_topology()
        self._resolve_anchors()

        # geometric tip-state transitions
        tip_pos = self.needle.x[-1]
        if self.tip_state == "free" and self.phase == "insert":
            _, _, sd = self.surface.closest_point(tip_pos)
            if sd <= self._contact_activation_distance():
                self.tip_state = "on_surface"
                log.info("step %d: tip reached the surface (gap %.3e m)",
                         self.step_index, sd)
        elif self.tip_state == "on_surface" and self.phase != "insert":
            _, _, sd = self.surface.closest_point(tip_pos)
            if sd > self._contact_activation_distance():
                self.tip_state = "free"

        fixed_t = self._fixed_mask()
        sys_t = self._tissue_system(fixed_t)
        dv_t = solve_free_motion(sys_t)

        beams = [self.needle] + ([self.electrode] if self.electrode is not None else [])
        drive = self._drive_velocity()
        sys_beams = [self._beam_system(self.needle, drive)]
        if self.electrode is not None:
            sys_beams.append(self._beam_system(self.electrode, None))
        dv_beams = [solve_free_motion(s) for s in sys_beams]

        fixed_masks = [fixed_t] + [s.fixed for s in sys_beams]
        meta, Js, bias, points = self._build_constraints(beams, fixed_masks)

        solvers = [sys_t.solve] + [s.solve for s in sys_beams]
        v_frees = [self.v + dv_t] + [b.v + dv for b, dv in zip(beams, dv_beams)]
        lam = np.zeros(0)
        solution = None
        if meta.n_rows:
            coupled = con.assemble_coupled(solvers, Js, v_frees, bias, meta)
            solution = con.solve_constraints(coupled, self._solver_params)
            lam = solution.lam
            dv_t = dv_t + solution.corrections[0]
            dv_beams = [dv + corr for dv, corr in
                        zip(dv_beams, solution.corrections[1:])]

        self.x, self.v = commit_step(self.x, self.v, dv_t, self.tau)
        for beam, dv in zip(beams, dv_beams):
            beam.commit(dv, self.tau)

        self._post_solve_update(points, lam)

        # error estimate / adaptation
        if cfg.adaptive and self.phase != "done":
            self.x, self.v, rep = adapt_step(self.mesh, self.fem, self.x,
                                             self.v, cfg.theta)
            self.eta_max = rep.eta_max
            self._eta = rep.eta
            if rep.result is not None:
                self._resolve_anchors()
        else:
            eta = element_error(self.fem, self.x)
            self.eta_max = float(np.max(eta)) if len(eta) else 0.0
            self._eta = eta

        self.step_index += 1
        self.time += self.tau
        rec = TraceRecord(
            step=self.step_index, time=self.time, dofs=3 * self.mesh.n_nodes,
            eta_max=self.eta_max, probe_displacements=self.probe_displacements(),
            tip_target_distance=self.tip_target_distance(),
            phase=self.phase, tip_state=self.tip_state, tip_motion=self.tip_motion,
            n_contact=sum(1 for p in points if p.kind in ("surface", "tip")),
            n_shaft=sum(1 for p in points if p.kind == "shaft"),
            n_junction_rows=sum(3 for p in points if p.kind == "tjunction"),
            pgs_iterations=solution.iterations if solution else 0,
            pgs_converged=solution.converged if solution else True,
            max_penetration=max((-p.gap for p in points if p.kind == "surface"),
                                default=0.0),
            tip_force=self._tip_force(points, lam),
            wall_time=_time.perf_counter() - t_start)
        self.records.append(rec)
        return rec

    def _tip_force(self, points, lam) -> float:
        for p in points:
            if p.kind in ("surface", "tip") and p.beam_index in (None, 1):
                rows = [p.rows.get(r) for r in ("normal", "axial", "t1", "t2")]
                vals = [lam[r] for r in rows if r is not None]
                return float(np.linalg.norm(vals)) / self.tau
        return 0.0

    def _post_solve_update(self, points, lam) -> None:
        """Tip state machine, path recording, phase transitions."""
        cfg = self.config
        for p in points:
            if p.kind == "surface":
                lam_n = float(lam[p.rows["normal"]]) / self.tau
                lam_t = float(np.hypot(lam[p.rows["t1"]],
                                       lam[p.rows["t2"]])) / self.tau
                state, motion = con.update_tip_state("on_surface", lam_n, lam_t,
                                                     self.params)
                self.tip_motion = motion
                if state == "inserted":
                    (eid, xi), _, _ = self._surface_anchor(self.needle.x[-1])
                    self.path.start(self.mesh.world_position(eid, xi))
                    self.tip_s = 0.0
                    self.tip_state = "inserted"
                    log.info("step %d: puncture (lambda_n = %.4f N)",
                             self.step_index, lam_n)
            elif p.kind == "tip" and p.beam_index == 1:
                lam_ax = float(lam[p.rows["axial"]]) / self.tau
                lam_t = float(np.hypot(lam[p.rows["t1"]],
                                       lam[p.rows["t2"]])) / self.tau
                _, motion = con.update_tip_state("inserted", max(0.0, -lam_ax),
                                                 lam_t, self.params)
                self.tip_motion = motion

        # track the cannula tip along the path
        if self.tip_state == "inserted" and self.path.started:
            tip_pos = self.needle.x[-1]
            eid, xi, _ = con.material_anchor(self.mesh, self.x.reshape(-1, 3),
                                             tip_pos)
            tip_rest = self.mesh.world_position(eid, xi)
            if self.phase == "insert":
                self.path.extend_to(tip_rest)
                self.tip_s = self.path.total()
            else:
                self.tip_s = self.path.project(tip_rest)
            if self.phase == "retract" and self.tip_s <= 0.5 * self.params.shaft_spacing:
                _, _, sd = self.surface.closest_point(tip_pos)
                if sd > -1e-4:
                    self.tip_state = "free"
                    self.tip_motion = "inactive"
                    self.phase = "hold" if cfg.kind == "dbs" else self.phase
                    log.info("step %d: cannula fully retracted", self.step_index)

        if self.electrode is not None:
            e_tip = self.electrode.x[-1]
            eid, xi, _ = con.material_anchor(self.mesh, self.x.reshape(-1, 3), e_tip)
            self.electrode_tip_s = self.path.project(self.mesh.world_position(eid, xi))

        # end of insertion: phantom holds, dbs releases the electrode
        if self.phase == "insert" and self.tip_s >= cfg.insertion_depth:
            if cfg.kind == "dbs":
                self._release_electrode()
                self.phase = "retract"
                log.info("step %d: target depth reached; electrode released, "
                         "retraction begins", self.step_index)
            else:
                self.phase = "hold"
                log.info("step %d: target depth reached; holding", self.step_index)

    def _release_electrode(self) -> None:
        cfg = self.config.electrode
        mat = Material(young_modulus=cfg.young_modulus,
                       poisson_ratio=self.config.needle.poisson_ratio,
                       density=cfg.density,
                       rayleigh_mass=self.config.needle.rayleigh_mass,
                       rayleigh_stiffness=self.config.needle.rayleigh_stiffness)
        L = self.needle_rest_length
        s_samples = np.linspace(L - cfg.length, L, cfg.segments + 1)
        pts = np.array([self.needle.shaft_point(s)[0] for s in s_samples])
        self.electrode = BeamModel(pts, cfg.radius, mat)
        v6 = self.needle.v.reshape(-1, 6)
        for k, s in enumerate(s_samples):
            e, a = self.needle.segment_of_abscissa(s)
            self.electrode.v.reshape(-1, 6)[k, :3] = \
                (1 - a) * v6[e, :3] + a * v6[e + 1, :3]
        self.electrode_tip_s = self.tip_s

    # ------------------------------------------------------------------ run

    def run(self, out_dir: str | None = None) -> list[TraceRecord]:
        cfg = self.config
        out = Path(out_dir) if out_dir else None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
        try:
            for _ in range(cfg.steps):
                self.step()
                if out is not None and cfg.vtk_every and \
                        self.step_index % cfg.vtk_every == 0:
                    self._write_vtk(out / f"snapshot_{self.step_index:05d}.vtk")
        finally:
            if out is not None:
                self.flush_outputs(out)
        return self.records

    def _write_vtk(self, path) -> None:
        self.fem.refresh_topology()
        disp = self.x.reshape(-1, 3) - self.mesh.nodes
        _, sig = self.fem.centre_strain_stress(self.x)
        vm = von_mises(sig)
        eta = self._eta if self._eta is not None and \
            len(self._eta) == self.fem.n_elements else np.zeros(self.fem.n_elements)
        export_vtk(self.mesh, disp, eta, vm, path)

    def flush_outputs(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        names = [p.name for p in self.probes]
        export_traces(self.records, out / "trace.csv", names,
                      has_target=self.config.target is not None)
        export_constraint_diagnostics(self.records, out / "constraints.csv")
        if self.records:
            self._write_vtk(out / "final.vtk")


def run_simulation(config: ScenarioConfig, out_dir) -> int:
    """CLI entry core: 0 on success, 2 on solver failure (partial outputs
    are flushed either way)."""
    sim = Simulation(config)
    try:
        sim.run(out_dir)
    except Exception:
        log.exception("simulation failed at step %d", sim.step_index)
        return 2
    return 0
