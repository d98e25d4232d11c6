"""Implicit backward Euler stepping for tissue and needle objects.

One step solves  A dv = b  with

    A = M + tau C + tau^2 K,      b = tau f - tau^2 K v,

where K is the (corotational) tangent stiffness, C = alpha M + beta K the
Rayleigh damping operator and f the total force f_ext - f_int - C v at the
beginning of the step.  Velocity then position are updated with the new
velocity.  Dirichlet DOFs are eliminated by row/column masking with unit
diagonal, which keeps A symmetric positive definite; prescribed motion
enters through the right-hand side.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

log = logging.getLogger(__name__)


class StepError(RuntimeError):
    pass


def factorize(A: sparse.spmatrix, symmetric: bool = True):
    """Sparse LU; symmetric mode with a fill-reducing ordering for SPD A."""
    A = sparse.csc_matrix(A)
    try:
        if symmetric:
            return splu(A, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=1e-8,
                        options=dict(SymmetricMode=True))
        return splu(A)
    except RuntimeError as exc:
        raise StepError(f"factorisation failed ({exc}); "
                        "are the boundary conditions sufficient?") from exc


@dataclass
class SystemMatrices:
    A: sparse.csc_matrix
    b: np.ndarray
    tau: float
    fixed: np.ndarray                      # boolean mask per DOF
    lu: object = field(repr=False, default=None)

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Solve A y = rhs for one vector or a (n, k) block of columns."""
        return self.lu.solve(rhs)


def assemble_system(M: np.ndarray, K: sparse.spmatrix, f: np.ndarray,
                    v: np.ndarray, tau: float,
                    alpha: float = 0.0, beta: float = 0.0,
                    fixed: np.ndarray | None = None,
                    prescribed_dv: np.ndarray | None = None) -> SystemMatrices:
    """Build and factorise A = M + tau C + tau^2 K, b = tau f - tau^2 K v.

    M is the lumped (diagonal) mass vector.  f must already contain all
    force terms (external - internal - damping).  `fixed` marks Dirichlet
    DOFs; `prescribed_dv` supplies their velocity change this step.
    """
    if tau <= 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    n = len(M)
    Kv = K @ v
    b = tau * f - tau * tau * Kv
    coef = tau * beta + tau * tau
    A = (coef * K + sparse.diags(M * (1.0 + tau * alpha))).tocsc()

    if fixed is None:
        fixed = np.zeros(n, dtype=bool)
    fixed = np.asarray(fixed, dtype=bool)
    if np.any(fixed):
        dv_fix = np.zeros(n)
        if prescribed_dv is not None:
            dv_fix[fixed] = prescribed_dv[fixed]
        b = b - A @ dv_fix
        keep = sparse.diags((~fixed).astype(float))
        A = keep @ A @ keep + sparse.diags(fixed.astype(float))
        b[fixed] = dv_fix[fixed]
    sysm = SystemMatrices(A=A.tocsc(), b=b, tau=tau, fixed=fixed)
    sysm.lu = factorize(sysm.A, symmetric=True)
    return sysm


def solve_free_motion(system: SystemMatrices) -> np.ndarray:
    dv = system.solve(system.b)
    if not np.all(np.isfinite(dv)):
        raise StepError("free-motion solve produced non-finite values")
    return dv


def commit_step(x: np.ndarray, v: np.ndarray, dv: np.ndarray,
                tau: float) -> tuple[np.ndarray, np.ndarray]:
    """v <- v + dv, then x <- x + tau v (position uses the new velocity)."""
    if not np.all(np.isfinite(dv)):
        raise StepError(f"non-finite velocity update (|dv|_max = {np.abs(dv).max()})")
    v_new = v + dv
    x_new = x + tau * v_new
    if not np.all(np.isfinite(x_new)):
        raise StepError("non-finite positions after commit")
    return x_new, v_new


def kinetic_energy(M: np.ndarray, v: np.ndarray) -> float:
    return 0.5 * float(M @ (v * v))


def static_solve(fem, f_ext: np.ndarray, fixed: np.ndarray,
                 prescribed_u: np.ndarray | None = None,
                 T: sparse.spmatrix | None = None,
                 tol: float = 1e-12, max_iter: int = 30) -> np.ndarray:
    """Newton solve of corotational static equilibrium on the tissue mesh.

    fixed: boolean DOF mask; prescribed_u: displacement of the fixed DOFs.
    T: optional hanging-node constraint matrix; continuity T x = T x0 is
    enforced through a KKT saddle system.  Returns equilibrium positions.
    """
    x0 = fem.mesh.nodes.ravel().copy()
    x = x0.copy()
    fixed = np.asarray(fixed, dtype=bool)
    if prescribed_u is not None:
        x[fixed] = x0[fixed] + prescribed_u[fixed]
    n = len(x)

    use_T = T is not None and T.shape[0] > 0
    if use_T:
        # Drop rows whose slave DOF (the +1 column) is Dirichlet-fixed.
        keep_rows = []
        Tc = T.tocsr()
        for r in range(Tc.shape[0]):
            row = Tc.getrow(r)
            slave_dof = row.indices[np.argmax(row.data)]
            if not fixed[slave_dof]:
                keep_rows.append(r)
        Tc = Tc[keep_rows]
        use_T = Tc.shape[0] > 0

    scale = None
    for it in range(max_iter):
        f_int, K, _ = fem.forces_and_tangent(x)
        r = f_ext - f_int
        r[fixed] = 0.0
        keep = sparse.diags((~fixed).astype(float))
        Km = keep @ K @ keep + sparse.diags(fixed.astype(float))
        if use_T:
            Tm = Tc @ keep
            g = -(Tc @ (x - x0))
            KKT = sparse.bmat([[Km, Tm.T], [Tm, None]], format="csc")
            rhs = np.concatenate([r, g])
            sol = factorize(KKT, symmetric=False).solve(rhs)
            du = sol[:n]
        else:
            du = factorize(Km.tocsc(), symmetric=True).solve(r)
        x = x + du
        if scale is None:
            scale = max(np.linalg.norm(du), 1e-30)
        if np.linalg.norm(du) <= tol * scale:
            break
    else:
        log.warning("static solve: Newton did not converge in %d iterations "
                    "(last |du| = %.3e)", max_iter, np.linalg.norm(du))
    return x
