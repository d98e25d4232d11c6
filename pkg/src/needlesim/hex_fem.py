"""Corotational linear-elastic hexahedral FEM for the tissue mesh.

Small-strain linear elasticity is evaluated in a per-element rotated frame:
the rotation is the polar factor of the deformation gradient sampled at the
element centre, so rigid motion produces no strain.  Internal force and
tangent follow the standard corotational assembly

    f_int = R K_e (R^T x - x0),      K_t = R K_e R^T.

All elements of one refinement depth are congruent axis-aligned boxes, so
the linear stiffness K_e, shape gradients and strain-displacement matrices
are computed once per depth and shared.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .hex_mesh import HexMesh, shape_gradients, shape_values

log = logging.getLogger(__name__)

# 2-point Gauss abscissae mapped to the [0,1] reference interval.
_GP1 = 0.5 - 0.5 / np.sqrt(3.0)
_GP2 = 0.5 + 0.5 / np.sqrt(3.0)
GAUSS_POINTS = np.array([(x, y, z) for z in (_GP1, _GP2) for y in (_GP1, _GP2)
                         for x in (_GP1, _GP2)])
GAUSS_WEIGHT = 1.0 / 8.0  # per point, reference volume 1


@dataclass
class Material:
    """Isotropic linear-elastic material with Rayleigh damping."""

    young_modulus: float          # E [Pa]
    poisson_ratio: float          # nu [-]
    density: float                # rho [kg/m^3]
    rayleigh_mass: float = 0.1    # alpha [1/s]
    rayleigh_stiffness: float = 0.1  # beta [s]

    def __post_init__(self):
        if self.young_modulus <= 0:
            raise ValueError(f"young_modulus must be > 0, got {self.young_modulus}")
        if not -1.0 < self.poisson_ratio < 0.5:
            raise ValueError(f"poisson_ratio must be in (-1, 0.5), got {self.poisson_ratio}")
        if self.density <= 0:
            raise ValueError(f"density must be > 0, got {self.density}")
        if self.rayleigh_mass < 0 or self.rayleigh_stiffness < 0:
            raise ValueError("Rayleigh coefficients must be >= 0")

    @property
    def lame(self) -> tuple[float, float]:
        E, nu = self.young_modulus, self.poisson_ratio
        lam = E * nu / ((1 + nu) * (1 - 2 * nu))
        mu = E / (2 * (1 + nu))
        return lam, mu

    @property
    def shear_modulus(self) -> float:
        return self.lame[1]

    def hooke(self) -> np.ndarray:
        """6x6 stiffness in Voigt order (xx, yy, zz, xy, yz, zx) with
        engineering shear strains."""
        lam, mu = self.lame
        D = np.zeros((6, 6))
        D[:3, :3] = lam
        D[:3, :3] += 2 * mu * np.eye(3)
        D[3:, 3:] = mu * np.eye(3)
        return D


def strain_displacement(grads: np.ndarray) -> np.ndarray:
    """B matrix (6, 24) from shape gradients (8, 3), Voigt order as Material."""
    B = np.zeros((6, 24))
    for i in range(8):
        gx, gy, gz = grads[i]
        B[0, 3 * i] = gx
        B[1, 3 * i + 1] = gy
        B[2, 3 * i + 2] = gz
        B[3, 3 * i], B[3, 3 * i + 1] = gy, gx
        B[4, 3 * i + 1], B[4, 3 * i + 2] = gz, gy
        B[5, 3 * i], B[5, 3 * i + 2] = gz, gx
    return B


def hex_stiffness(box_size, material: Material) -> np.ndarray:
    """Linear stiffness (24x24) of an axis-aligned box element, 8-point Gauss."""
    h = np.asarray(box_size, dtype=float)
    vol = float(np.prod(h))
    D = material.hooke()
    K = np.zeros((24, 24))
    for gp in GAUSS_POINTS:
        B = strain_displacement(shape_gradients(gp, h))
        K += GAUSS_WEIGHT * vol * B.T @ D @ B
    return 0.5 * (K + K.T)


def polar_rotation(F: np.ndarray) -> np.ndarray:
    """Rotation factor of the polar decomposition F = R S, det R = +1.

    Accepts a single (3,3) or a batch (n,3,3)."""
    single = F.ndim == 2
    F = F.reshape(-1, 3, 3)
    U, _, Vt = np.linalg.svd(F)
    R = U @ Vt
    det = np.linalg.det(R)
    flip = det < 0
    if np.any(flip):
        U = U.copy()
        U[flip, :, 2] *= -1.0
        R = U @ Vt
    return R[0] if single else R


def extract_rotation(x_elem: np.ndarray, x0_elem: np.ndarray) -> np.ndarray:
    """Polar rotation of the centre deformation gradient of one hex element.

    x_elem, x0_elem: (8, 3) current and rest corner positions."""
    lo, hi = x0_elem.min(axis=0), x0_elem.max(axis=0)
    G = shape_gradients(np.full(3, 0.5), hi - lo)
    F = x_elem.T @ G
    if np.linalg.det(F) <= 0:
        raise ValueError("inverted element: det F <= 0")
    return polar_rotation(F)


def corotational_force_and_stiffness(x_elem, x0_elem, material: Material):
    """(internal force (24,), tangent (24,24)) for one hex element."""
    lo, hi = x0_elem.min(axis=0), x0_elem.max(axis=0)
    K_e = hex_stiffness(hi - lo, material)
    R = extract_rotation(x_elem, x0_elem)
    d = (x_elem @ R - x0_elem).ravel()          # x @ R == (R^T x^T)^T per node
    f_loc = K_e @ d
    f = (f_loc.reshape(8, 3) @ R.T).ravel()
    Rb = np.kron(np.eye(8), R)
    return f, Rb @ K_e @ Rb.T


def element_centre_stress_strain(x_elem, x0_elem, material: Material):
    """Corotated small strain and Hooke stress at the element centre (Voigt)."""
    lo, hi = x0_elem.min(axis=0), x0_elem.max(axis=0)
    B = strain_displacement(shape_gradients(np.full(3, 0.5), hi - lo))
    R = extract_rotation(x_elem, x0_elem)
    d = (x_elem @ R - x0_elem).ravel()
    eps = B @ d
    return eps, material.hooke() @ eps


def von_mises(stress_voigt: np.ndarray) -> np.ndarray:
    """Von Mises equivalent stress from Voigt stresses (..., 6)."""
    s = np.asarray(stress_voigt)
    sx, sy, sz, sxy, syz, szx = (s[..., k] for k in range(6))
    return np.sqrt(0.5 * ((sx - sy) ** 2 + (sy - sz) ** 2 + (sz - sx) ** 2)
                   + 3.0 * (sxy ** 2 + syz ** 2 + szx ** 2))


class CorotationalFem:
    """Batched corotational assembly over the active elements of a HexMesh.

    Per-depth element data (stiffness, B matrices, gradients) is cached; the
    topology-dependent arrays refresh automatically when the mesh reports a
    new topology version.
    """

    def __init__(self, mesh: HexMesh, material: Material):
        self.mesh = mesh
        self.material = material
        self._depth_cache: dict[int, dict] = {}
        self._topo_version = -1
        self._last_rotations: np.ndarray | None = None
        self.inverted_flags: np.ndarray | None = None
        self.refresh_topology()

    # ------------------------------------------------------------- caching

    def _depth_data(self, depth: int) -> dict:
        if depth not in self._depth_cache:
            h = self.mesh.element_size(depth)
            gauss_B = np.stack([strain_displacement(shape_gradients(gp, h))
                                for gp in GAUSS_POINTS])
            self._depth_cache[depth] = {
                "size": h,
                "volume": float(np.prod(h)),
                "K": hex_stiffness(h, self.material),
                "grad_centre": shape_gradients(np.full(3, 0.5), h),
                "B_centre": strain_displacement(shape_gradients(np.full(3, 0.5), h)),
                "B_gauss": gauss_B,       # (8, 6, 24)
            }
        return self._depth_cache[depth]

    def refresh_topology(self):
        if self._topo_version == self.mesh.topology_version:
            return
        self.element_ids, self.conn = self.mesh.active_connectivity()
        self.depths = np.array([self.mesh.elements[i].depth for i in self.element_ids],
                               dtype=int)
        self.n_nodes = self.mesh.n_nodes
        self.n_dofs = 3 * self.n_nodes
        self.rest = self.mesh.nodes[self.conn].copy()        # (E, 8, 3)
        dofs = (3 * self.conn)[:, :, None] + np.arange(3)
        self.element_dofs = dofs.reshape(len(self.conn), 24)  # (E, 24)
        self._rows = np.broadcast_to(self.element_dofs[:, :, None],
                                     (len(self.conn), 24, 24)).ravel()
        self._cols = np.broadcast_to(self.element_dofs[:, None, :],
                                     (len(self.conn), 24, 24)).ravel()
        self._by_depth = {d: np.flatnonzero(self.depths == d)
                          for d in np.unique(self.depths)}
        self._last_rotations = None
        self.inverted_flags = np.zeros(len(self.conn), dtype=bool)
        self._topo_version = self.mesh.topology_version

    @property
    def n_elements(self) -> int:
        return len(self.conn)

    def element_volumes(self) -> np.ndarray:
        return np.array([self._depth_data(d)["volume"] for d in self.depths])

    # ----------------------------------------------------------- kinematics

    def rotations(self, x: np.ndarray) -> np.ndarray:
        """Per-element polar rotations (E, 3, 3) at the current positions."""
        self.refresh_topology()
        xe = x.reshape(-1, 3)[self.conn]                     # (E, 8, 3)
        R = np.empty((self.n_elements, 3, 3))
        detF = np.empty(self.n_elements)
        for d, idx in self._by_depth.items():
            G = self._depth_data(d)["grad_centre"]
            F = np.einsum("eia,ib->eab", xe[idx], G)
            detF[idx] = np.linalg.det(F)
            R[idx] = polar_rotation(F)
        bad = detF <= 0
        if np.any(bad):
            n_bad = int(np.count_nonzero(bad))
            log.warning("%d inverted element(s); reusing previous rotations", n_bad)
            if self._last_rotations is not None:
                R[bad] = self._last_rotations[bad]
            else:
                R[bad] = np.eye(3)
        self.inverted_flags = bad
        self._last_rotations = R
        return R

    # ------------------------------------------------------------- assembly

    def lumped_mass(self) -> np.ndarray:
        """Diagonal mass vector (3n,): each corner takes 1/8 of rho V."""
        self.refresh_topology()
        m_node = np.zeros(self.n_nodes)
        for d, idx in self._by_depth.items():
            share = self.material.density * self._depth_data(d)["volume"] / 8.0
            np.add.at(m_node, self.conn[idx].ravel(), share)
        return np.repeat(m_node, 3)

    def corotated_displacements(self, x: np.ndarray, R: np.ndarray) -> np.ndarray:
        """(E, 24) corotated displacement R^T x - x0 per element."""
        xe = x.reshape(-1, 3)[self.conn]
        y = np.einsum("eba,eib->eia", R, xe)                 # R^T applied per node
        return (y - self.rest).reshape(self.n_elements, 24)

    def internal_forces(self, x: np.ndarray, R: np.ndarray | None = None) -> np.ndarray:
        """Assembled internal force vector (3n,)."""
        self.refresh_topology()
        if R is None:
            R = self.rotations(x)
        d = self.corotated_displacements(x, R)
        f = np.zeros(self.n_dofs)
        for dep, idx in self._by_depth.items():
            K = self._depth_data(dep)["K"]
            f_loc = d[idx] @ K                               # K symmetric
            f_glob = np.einsum("eab,eib->eia", R[idx], f_loc.reshape(-1, 8, 3))
            np.add.at(f, self.element_dofs[idx].ravel(), f_glob.reshape(-1, 24).ravel())
        return f

    def tangent_stiffness(self, R: np.ndarray) -> sparse.csr_matrix:
        """Assembled corotational tangent K (3n x 3n), symmetric."""
        self.refresh_topology()
        vals = np.empty((self.n_elements, 24, 24))
        for dep, idx in self._by_depth.items():
            K4 = self._depth_data(dep)["K"].reshape(8, 3, 8, 3)
            vals[idx] = np.einsum("eap,ipjq,ebq->eiajb", R[idx], K4, R[idx],
                                  optimize=True).reshape(-1, 24, 24)
        A = sparse.coo_matrix((vals.ravel(), (self._rows, self._cols)),
                              shape=(self.n_dofs, self.n_dofs))
        return A.tocsr()

    def forces_and_tangent(self, x: np.ndarray):
        R = self.rotations(x)
        return self.internal_forces(x, R), self.tangent_stiffness(R), R

    # ------------------------------------------------------------- sampling

    def centre_strain_stress(self, x: np.ndarray, R: np.ndarray | None = None):
        """Corotated centre strain and stress, Voigt, shapes (E, 6)."""
        self.refresh_topology()
        if R is None:
            R = self.rotations(x)
        d = self.corotated_displacements(x, R)
        eps = np.empty((self.n_elements, 6))
        for dep, idx in self._by_depth.items():
            eps[idx] = d[idx] @ self._depth_data(dep)["B_centre"].T
        return eps, eps @ self.material.hooke().T

    def gauss_strain_stress(self, x: np.ndarray, R: np.ndarray | None = None):
        """Corotated strain/stress at the 8 Gauss points, shapes (E, 8, 6)."""
        self.refresh_topology()
        if R is None:
            R = self.rotations(x)
        d = self.corotated_displacements(x, R)
        eps = np.empty((self.n_elements, 8, 6))
        for dep, idx in self._by_depth.items():
            B = self._depth_data(dep)["B_gauss"]             # (8, 6, 24)
            eps[idx] = np.einsum("ej,gij->egi", d[idx], B)
        return eps, eps @ self.material.hooke().T

    def elastic_energy(self, x: np.ndarray, R: np.ndarray | None = None) -> float:
        """Total corotational strain energy [J]."""
        self.refresh_topology()
        if R is None:
            R = self.rotations(x)
        d = self.corotated_displacements(x, R)
        e = 0.0
        for dep, idx in self._by_depth.items():
            K = self._depth_data(dep)["K"]
            e += 0.5 * float(np.einsum("ei,ij,ej->", d[idx], K, d[idx]))
        return e
