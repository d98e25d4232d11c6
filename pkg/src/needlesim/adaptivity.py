"""A-posteriori error estimation and local mesh adaptation.

The estimator recovers a continuous nodal strain field by patch recovery
(per-node linear least squares over the centre samples of the elements
sharing the node) and integrates the energy norm of the difference between
the raw element field and the recovered one:

    eta_e^2 = int_e (eps_h - eps*)^T D (eps_h - eps*) dV

Elements with eta_e >= theta * max_e eta_e are refined one level, unless
they already sit at the maximum depth.  Nodal state (positions, velocities)
is carried to the new nodes by the refinement interpolation so the motion
is continuous across an adaptation.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .hex_fem import CorotationalFem, GAUSS_POINTS
from .hex_mesh import HexMesh, RefinementResult, shape_values

log = logging.getLogger(__name__)

# Patches whose normal matrix is rank deficient relative to this threshold
# (fewer than four samples, or coplanar centres) fall back to a
# volume-weighted average.
_RANK_RTOL = 1e-8


def recover_nodal_strain(fem: CorotationalFem, x: np.ndarray,
                         R: np.ndarray | None = None) -> np.ndarray:
    """Recovered (smoothed) strain at every mesh node, shape (n_nodes, 6).

    Hanging nodes receive the interpolated value of their masters so the
    recovered field is continuous across refinement-level transitions.
    """
    fem.refresh_topology()
    mesh = fem.mesh
    eps_c, _ = fem.centre_strain_stress(x, R)
    centres = mesh.element_centres(fem.element_ids)
    conn = fem.conn
    n = fem.n_nodes
    scale = float(np.min(mesh.spacing))

    offs = (centres[:, None, :] - mesh.nodes[conn]) / scale      # (E, 8, 3)
    P = np.concatenate([np.ones(offs.shape[:2] + (1,)), offs], axis=2)

    normal = np.zeros((n, 4, 4))
    rhs = np.zeros((n, 4, 6))
    np.add.at(normal, conn, np.einsum("eka,ekb->ekab", P, P))
    np.add.at(rhs, conn, np.einsum("eka,ei->ekai", P, eps_c))

    vols = fem.element_volumes()
    wsum = np.zeros(n)
    wval = np.zeros((n, 6))
    np.add.at(wsum, conn.ravel(), np.repeat(vols, 8))
    np.add.at(wval, conn.ravel(),
              np.repeat(vols[:, None] * eps_c, 8, axis=0).reshape(-1, 6))

    eig = np.linalg.eigvalsh(normal)
    ok = eig[:, 0] > _RANK_RTOL * np.maximum(eig[:, -1], 1e-300)

    eps_nodes = np.zeros((n, 6))
    seen = wsum > 0
    eps_nodes[seen] = wval[seen] / wsum[seen, None]
    if np.any(ok):
        coeff = np.linalg.solve(normal[ok], rhs[ok])             # (m, 4, 6)
        eps_nodes[ok] = coeff[:, 0, :]       # polynomial value at the node

    for tj in mesh.flattened_t_junctions():
        eps_nodes[tj.slave] = tj.weights @ eps_nodes[tj.masters]
    return eps_nodes


def element_error(fem: CorotationalFem, x: np.ndarray,
                  R: np.ndarray | None = None,
                  eps_nodes: np.ndarray | None = None) -> np.ndarray:
    """Energy-norm error indicator per active element, shape (E,)."""
    fem.refresh_topology()
    if R is None:
        R = fem.rotations(x)
    if eps_nodes is None:
        eps_nodes = recover_nodal_strain(fem, x, R)
    eps_g, _ = fem.gauss_strain_stress(x, R)                     # (E, 8, 6)
    Ng = shape_values(GAUSS_POINTS)                              # (8, 8)
    eps_rec = np.einsum("gk,eki->egi", Ng, eps_nodes[fem.conn])
    diff = eps_g - eps_rec
    D = fem.material.hooke()
    dens = np.einsum("egi,ij,egj->eg", diff, D, diff)
    eta2 = dens.mean(axis=1) * fem.element_volumes()
    return np.sqrt(np.maximum(eta2, 0.0))


def mark_for_refinement(mesh: HexMesh, element_ids: np.ndarray,
                        eta: np.ndarray, theta: float) -> np.ndarray:
    """Element ids with eta_e >= theta * eta_max, excluding those already at
    the maximum refinement depth."""
    if len(eta) == 0:
        return np.zeros(0, dtype=int)
    eta_max = float(np.max(eta))
    if eta_max <= 0.0:
        return np.zeros(0, dtype=int)
    above = eta >= theta * eta_max * (1.0 - 1e-12)
    depths = np.array([mesh.elements[i].depth for i in element_ids])
    eligible = depths < mesh.max_depth
    blocked = int(np.count_nonzero(above & ~eligible))
    if blocked:
        log.info("%d marked element(s) already at max depth %d; skipped",
                 blocked, mesh.max_depth)
    return np.asarray(element_ids)[above & eligible]


def extend_nodal_vector(result: RefinementResult, vec: np.ndarray,
                        n_nodes_new: int) -> np.ndarray:
    """Carry a per-node (flat, 3 dofs/node) state vector across a refinement:
    existing entries are kept, new nodes get the recorded interpolation of
    their (pre-refinement) master values."""
    old = vec.reshape(-1, 3)
    out = np.zeros((n_nodes_new, 3))
    out[:len(old)] = old
    for nid, (ids, w) in result.interpolation.items():
        out[nid] = w @ old[ids]
    return out.reshape(-1)


@dataclass
class AdaptReport:
    eta: np.ndarray
    eta_max: float
    marked: np.ndarray
    refined_elements: int = 0
    new_nodes: int = 0
    result: RefinementResult | None = None


def adapt_step(mesh: HexMesh, fem: CorotationalFem, x: np.ndarray,
               v: np.ndarray, theta: float,
               R: np.ndarray | None = None):
    """One estimate -> mark -> refine -> transfer cycle.

    Returns (x, v, report); x and v are re-allocated when the mesh grew.
    """
    fem.refresh_topology()
    eta = element_error(fem, x, R)
    eta_max = float(np.max(eta)) if len(eta) else 0.0
    marked = mark_for_refinement(mesh, fem.element_ids, eta, theta)
    report = AdaptReport(eta=eta, eta_max=eta_max, marked=marked)
    if len(marked) == 0:
        return x, v, report
    n_before = mesh.n_nodes
    result = mesh.refine_elements(marked)
    report.result = result
    report.refined_elements = len(result.new_element_ids) // 8
    report.new_nodes = mesh.n_nodes - n_before
    x = extend_nodal_vector(result, x, mesh.n_nodes)
    v = extend_nodal_vector(result, v, mesh.n_nodes)
    fem.refresh_topology()
    log.info("adapted mesh: %d element(s) refined, %d new node(s), eta_max %.3e",
             report.refined_elements, report.new_nodes, eta_max)
    return x, v, report
