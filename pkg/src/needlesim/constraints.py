"""Lagrange-multiplier constraints coupling needle(s), tissue and T-junctions.

All constraints are expressed as rows in a shared constraint space.  After
the free motion of every object, the compliance system

    W lambda = -(J v_free + bias),      W = sum_o J_o A_o^-1 J_o^T

is solved by projected Gauss-Seidel subject to the interaction regimes:

* surface contact: unilateral normal (Kuhn-Tucker) + Coulomb cone tangents;
* inserted tip: bilateral transverse path-holding + axial box whose bounds
  encode the cutting law (advance resisted up to mu |lambda_t| + lambda_c0,
  retraction resisted by friction only);
* shaft friction: bilateral transverse + axial Coulomb box;
* T-junctions: plain bilateral rows.

Bilateral rows are eliminated exactly (dense Cholesky of their block); the
iteration runs only over the projected rows, with the bilateral multipliers
recovered affinely each sweep so friction caps stay current.  Corrections
are applied as dv = dv_free + A^-1 J^T lambda.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .hex_mesh import HexMesh, shape_values

log = logging.getLogger(__name__)

# Row kinds.
BILATERAL = 0
NORMAL = 1          # unilateral contact normal, lambda >= 0
TANGENT = 2         # Coulomb cone pair tied to a NORMAL row
TIP_AXIAL = 3       # cutting law box
SHAFT_AXIAL = 4     # friction box

_STATES = ("inactive", "sticking", "sliding", "cutting")


@dataclass
class InteractionParameters:
    friction: float = 0.3               # mu [-]
    puncture_strength: float = 0.1      # lambda_p0 [N]
    cutting_strength: float = 0.05      # lambda_c0 [N]
    shaft_spacing: float = 0.002        # [m]
    penetration_tolerance: float = 1e-5  # [m]

    def __post_init__(self):
        if self.friction < 0:
            raise ValueError("friction must be >= 0")
        if self.puncture_strength < 0 or self.cutting_strength < 0:
            raise ValueError("strength thresholds must be >= 0")
        if self.shaft_spacing <= 0:
            raise ValueError("shaft_spacing must be > 0")


@dataclass
class ConstraintPoint:
    """One attachment with up to three constraint-frame axes."""

    kind: str                            # surface | tip | shaft | tjunction
    frame: np.ndarray | None = None      # rows (n, t1, t2) in world axes
    element: int | None = None           # tissue anchor
    xi: np.ndarray | None = None
    abscissa: float | None = None        # needle anchor (arclength)
    needle_object: int | None = None     # index into the object list
    gap: float = 0.0                     # delta_n [m], surface only
    multiplier: np.ndarray = field(default_factory=lambda: np.zeros(3))
    state: str = "inactive"


@dataclass
class PointRows:
    point: int
    kind: str
    rows: dict


class RowMeta:
    """Row layout: kinds, per-point role maps, cap relationships."""

    def __init__(self):
        self.kinds: list[int] = []
        self.points: list[PointRows] = []

    def add_point(self, point_index: int, kind: str) -> PointRows:
        r0 = len(self.kinds)
        if kind == "tjunction":
            rows = {"x": r0, "y": r0 + 1, "z": r0 + 2}
            self.kinds += [BILATERAL] * 3
        elif kind == "surface":
            rows = {"normal": r0, "t1": r0 + 1, "t2": r0 + 2}
            self.kinds += [NORMAL, TANGENT, TANGENT]
        elif kind == "tip":
            rows = {"axial": r0, "t1": r0 + 1, "t2": r0 + 2}
            self.kinds += [TIP_AXIAL, BILATERAL, BILATERAL]
        elif kind == "shaft":
            rows = {"axial": r0, "t1": r0 + 1, "t2": r0 + 2}
            self.kinds += [SHAFT_AXIAL, BILATERAL, BILATERAL]
        else:
            raise ValueError(f"unknown constraint kind {kind!r}")
        pr = PointRows(point_index, kind, rows)
        self.points.append(pr)
        return pr

    @property
    def n_rows(self) -> int:
        return len(self.kinds)

    def kind_array(self) -> np.ndarray:
        return np.asarray(self.kinds, dtype=int)


class RowsBuilder:
    """Accumulates sparse J entries for several objects."""

    def __init__(self, n_dofs_per_object: list[int]):
        self.n_dofs = n_dofs_per_object
        self._entries = [([], [], []) for _ in n_dofs_per_object]

    def add(self, obj: int, row: int, dof: int, value: float):
        r, c, v = self._entries[obj]
        r.append(row)
        c.append(dof)
        v.append(value)

    def matrices(self, n_rows: int) -> list[sparse.csr_matrix]:
        out = []
        for (r, c, v), n in zip(self._entries, self.n_dofs):
            out.append(sparse.csr_matrix((v, (r, c)), shape=(n_rows, n)))
        return out


def tissue_point_entries(mesh: HexMesh, element: int, xi) -> tuple[np.ndarray, np.ndarray]:
    """(node ids (8,), trilinear weights (8,)) of a tissue material point."""
    return mesh.elements[element].node_ids, shape_values(xi)


@dataclass
class CoupledSystem:
    W: np.ndarray
    a0: np.ndarray
    Js: list[sparse.csr_matrix]
    solvers: list            # per-object callables: rhs (n,) or (n,k) -> solution
    meta: RowMeta
    bias: np.ndarray


def assemble_coupled(solvers, Js, v_frees, bias, meta: RowMeta) -> CoupledSystem:
    """Compliance matrix W = sum_o J_o A_o^-1 J_o^T and free-motion row values."""
    m = meta.n_rows
    W = np.zeros((m, m))
    a0 = np.asarray(bias, dtype=float).copy()
    for J, solve, v_free in zip(Js, solvers, v_frees):
        if J.nnz == 0:
            continue
        X = solve(J.T.toarray())
        W += J @ X
        a0 += J @ v_free
    W = 0.5 * (W + W.T)
    return CoupledSystem(W=W, a0=a0, Js=Js, solvers=solvers, meta=meta,
                         bias=np.asarray(bias, dtype=float))


@dataclass
class ConstraintSolution:
    lam: np.ndarray
    a: np.ndarray                 # post-solve row values a0 + W lam
    corrections: list             # per-object dv corrections A^-1 J^T lam
    iterations: int
    converged: bool
    regularized: bool


def _chol_with_shift(M: np.ndarray, w_scale: float):
    try:
        return np.linalg.cholesky(M), False
    except np.linalg.LinAlgError:
        shift = 1e-10 * max(w_scale, 1.0)
        log.warning("bilateral constraint block rank-deficient; "
                    "applying diagonal shift %.3e", shift)
        return np.linalg.cholesky(M + shift * np.eye(len(M))), True


def _solve_chol(L: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    from scipy.linalg import solve_triangular
    y = solve_triangular(L, rhs, lower=True)
    return solve_triangular(L.T, y, lower=False)


def solve_constraints(coupled: CoupledSystem, params: InteractionParameters,
                      tol: float = 1e-8, max_iter: int = 500) -> ConstraintSolution:
    """Projected Gauss-Seidel on the compliance system with exact bilateral
    elimination.  See module docstring for the regime projections."""
    meta = coupled.meta
    m = meta.n_rows
    if m == 0:
        return ConstraintSolution(np.zeros(0), np.zeros(0),
                                  [np.zeros(J.shape[1]) for J in coupled.Js],
                                  0, True, False)
    W, a0 = coupled.W, coupled.a0
    kinds = meta.kind_array()
    B = np.flatnonzero(kinds == BILATERAL)
    U = np.flatnonzero(kinds != BILATERAL)
    lam = np.zeros(m)
    w_scale = float(np.trace(W)) / m
    regularized = False
    iterations = 0
    converged = True

    if len(U) == 0:
        L, regularized = _chol_with_shift(W[np.ix_(B, B)], w_scale)
        lam[B] = _solve_chol(L, -a0[B])
    else:
        if len(B):
            L, regularized = _chol_with_shift(W[np.ix_(B, B)], w_scale)
            lamB0 = _solve_chol(L, -a0[B])
            G = _solve_chol(L, W[np.ix_(B, U)])
            S = W[np.ix_(U, U)] - W[np.ix_(U, B)] @ G
            aU0 = a0[U] + W[np.ix_(U, B)] @ lamB0
        else:
            lamB0, G = np.zeros(0), None
            S = W[np.ix_(U, U)]
            aU0 = a0[U]
        S = 0.5 * (S + S.T)
        diag = np.maximum(S.diagonal().copy(), 1e-14 * max(w_scale, 1.0))
        upos = {int(r): k for k, r in enumerate(U)}
        lamU = np.zeros(len(U))

        def full_lambda():
            lam_full = np.zeros(m)
            lam_full[U] = lamU
            if len(B):
                lam_full[B] = lamB0 - G @ lamU
            return lam_full

        converged = False
        for it in range(max_iter):
            lam_full = full_lambda()
            delta = 0.0
            for pr in meta.points:
                if pr.kind == "tjunction":
                    continue
                if pr.kind == "surface":
                    rn = upos[pr.rows["normal"]]
                    a = aU0[rn] + S[rn] @ lamU
                    new = max(0.0, lamU[rn] - a / diag[rn])
                    delta = max(delta, abs(new - lamU[rn]))
                    lamU[rn] = new
                    r1, r2 = upos[pr.rows["t1"]], upos[pr.rows["t2"]]
                    old1, old2 = lamU[r1], lamU[r2]
                    for r in (r1, r2):
                        a = aU0[r] + S[r] @ lamU
                        lamU[r] -= a / diag[r]
                    cap = params.friction * lamU[rn]
                    tmag = float(np.hypot(lamU[r1], lamU[r2]))
                    if tmag > cap:
                        scale = 0.0 if cap <= 0.0 else cap / tmag
                        lamU[r1] *= scale
                        lamU[r2] *= scale
                    delta = max(delta, abs(lamU[r1] - old1),
                                abs(lamU[r2] - old2))
                else:  # tip or shaft: axial box, transverse bilateral
                    ra = upos[pr.rows["axial"]]
                    t = np.hypot(lam_full[pr.rows["t1"]], lam_full[pr.rows["t2"]])
                    fric = params.friction * t
                    if pr.kind == "tip":
                        lo, hi = -(fric + params.cutting_strength), fric
                    else:
                        lo, hi = -fric, fric
                    a = aU0[ra] + S[ra] @ lamU
                    new = float(np.clip(lamU[ra] - a / diag[ra], lo, hi))
                    delta = max(delta, abs(new - lamU[ra]))
                    lamU[ra] = new
            iterations = it + 1
            if delta < tol:
                converged = True
                break
        if not converged:
            log.warning("constraint PGS hit %d iterations (last delta %.3e)",
                        max_iter, delta)
        lam = full_lambda()

    a = a0 + W @ lam
    corrections = []
    for J, solve in zip(coupled.Js, coupled.solvers):
        if J.nnz == 0:
            corrections.append(np.zeros(J.shape[1]))
        else:
            corrections.append(solve(J.T @ lam))
    return ConstraintSolution(lam=lam, a=a, corrections=corrections,
                              iterations=iterations, converged=converged,
                              regularized=regularized)


# ----------------------------------------------------------- tip state machine

def update_tip_state(state: str, lam_normal: float, lam_tangent: float,
                     params: InteractionParameters,
                     tol: float = 1e-10) -> tuple[str, str]:
    """(phase, motion) transition from the current multipliers.

    lam_normal: magnitude of the constraint force resisting tip motion along
    the surface normal (surface phase) or the needle axis (inserted phase);
    lam_tangent: magnitude of the transverse force at the same point.
    """
    if state == "free":
        return "free", "inactive"
    if state == "on_surface":
        if lam_normal > params.puncture_strength:
            return "inserted", "cutting"
        sliding = lam_tangent >= params.friction * lam_normal - tol and lam_tangent > tol
        return "on_surface", "sliding" if sliding else "sticking"
    if state == "inserted":
        cutting = lam_normal >= (params.friction * lam_tangent
                                 + params.cutting_strength - tol)
        return "inserted", "cutting" if cutting else "sticking"
    raise ValueError(f"unknown tip state {state!r}")


def shaft_arclengths(depth: float, spacing: float) -> np.ndarray:
    """Arclengths (from the entry point) of the shaft constraint points:
    one per full spacing of insertion depth, centred in its interval so the
    deepest point never coincides with the tip constraint."""
    n = int(np.floor(depth / spacing + 1e-12))
    if n <= 0:
        return np.zeros(0)
    return (np.arange(n) + 0.5) * spacing


def material_anchor(mesh: HexMesh, node_positions: np.ndarray, world_point,
                    iterations: int = 10):
    """Material point (element, xi) whose current world position best matches
    `world_point`, found by a short fixed-point iteration on the displacement
    field (anchoring uses rest geometry, which deforms slightly)."""
    p = np.asarray(world_point, dtype=float)
    disp = node_positions.reshape(-1, 3) - mesh.nodes
    eid, xi, ok = mesh.locate_or_nearest(p)
    for _ in range(iterations):
        u = shape_values(xi) @ disp[mesh.elements[eid].node_ids]
        eid2, xi2, ok = mesh.locate_or_nearest(p - u)
        done = eid2 == eid and np.allclose(xi2, xi, rtol=0.0, atol=1e-13)
        eid, xi = eid2, xi2
        if done:
            break
    return eid, xi, ok
