"""Corotational Euler-Bernoulli beam chain for needles, cannulas, electrodes.

Each node carries 6 DOFs (translation + rotation vector rate); orientations
are stored as quaternions and updated incrementally.  Element forces follow
the classic corotational recipe: extract an element frame from the node
triads and the current chord, measure small local deflections against it,
apply the linear Euler-Bernoulli stiffness in that frame, rotate back.

DOF layout: node i owns dofs [6i, 6i+6): 3 linear then 3 angular.
"""
from __future__ import annotations

import logging

import numpy as np
from scipy import sparse
from scipy.spatial.transform import Rotation

from .hex_fem import Material

log = logging.getLogger(__name__)


def beam_stiffness_local(L: float, E: float, G: float, r: float) -> np.ndarray:
    """12x12 Euler-Bernoulli stiffness in the element frame (x along axis).

    Circular section: A = pi r^2, I = pi r^4 / 4, J = pi r^4 / 2.
    """
    if L < 1e-9:
        raise ValueError(f"degenerate beam segment: L = {L}")
    A = np.pi * r ** 2
    I = np.pi * r ** 4 / 4.0
    J = 2.0 * I
    K = np.zeros((12, 12))
    ka, kt = E * A / L, G * J / L
    K[np.ix_((0, 6), (0, 6))] += ka * np.array([[1, -1], [-1, 1]])
    K[np.ix_((3, 9), (3, 9))] += kt * np.array([[1, -1], [-1, 1]])
    c = E * I / L ** 3
    # Bending in the local x-y plane: (u_y1, th_z1, u_y2, th_z2).
    Bz = c * np.array([[12, 6 * L, -12, 6 * L],
                       [6 * L, 4 * L * L, -6 * L, 2 * L * L],
                       [-12, -6 * L, 12, -6 * L],
                       [6 * L, 2 * L * L, -6 * L, 4 * L * L]])
    K[np.ix_((1, 5, 7, 11), (1, 5, 7, 11))] += Bz
    # Bending in the local x-z plane: (u_z1, th_y1, u_z2, th_y2), signs flipped.
    By = c * np.array([[12, -6 * L, -12, -6 * L],
                       [-6 * L, 4 * L * L, 6 * L, 2 * L * L],
                       [-12, 6 * L, 12, 6 * L],
                       [-6 * L, 2 * L * L, 6 * L, 4 * L * L]])
    K[np.ix_((2, 4, 8, 10), (2, 4, 8, 10))] += By
    return K


def _min_rotation_between(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Smallest rotation matrix mapping unit vector a onto unit vector b."""
    c = np.cross(a, b)
    s = np.linalg.norm(c)
    d = float(np.dot(a, b))
    if s < 1e-14:
        if d > 0:
            return np.eye(3)
        # Antiparallel: rotate pi about any perpendicular axis.
        p = np.array([1.0, 0.0, 0.0])
        if abs(a[0]) > 0.9:
            p = np.array([0.0, 1.0, 0.0])
        axis = np.cross(a, p)
        axis /= np.linalg.norm(axis)
        return Rotation.from_rotvec(np.pi * axis).as_matrix()
    angle = np.arctan2(s, d)
    return Rotation.from_rotvec(angle * c / s).as_matrix()


def _perpendicular(t: np.ndarray) -> np.ndarray:
    ref = np.array([0.0, 0.0, 1.0]) if abs(t[2]) < 0.9 else np.array([0.0, 1.0, 0.0])
    n = np.cross(t, ref)
    return n / np.linalg.norm(n)


class BeamModel:
    """Chain of corotational beam elements with quaternion node orientations."""

    def __init__(self, rest_positions: np.ndarray, radius: float, material: Material):
        self.rest = np.asarray(rest_positions, dtype=float).copy()
        if self.rest.ndim != 2 or self.rest.shape[1] != 3 or len(self.rest) < 2:
            raise ValueError("rest_positions must be (n >= 2, 3)")
        if radius <= 0:
            raise ValueError("radius must be > 0")
        self.radius = float(radius)
        self.material = material
        self.n_nodes = len(self.rest)
        self.n_segments = self.n_nodes - 1
        self.n_dofs = 6 * self.n_nodes

        seg = np.diff(self.rest, axis=0)
        self.rest_lengths = np.linalg.norm(seg, axis=1)
        if np.any(self.rest_lengths < 1e-9):
            raise ValueError("beam has a segment shorter than 1e-9 m")

        # Parallel-transported rest frames: columns (t, n1, n2) per element.
        self.rest_frames = np.empty((self.n_segments, 3, 3))
        t_prev = seg[0] / self.rest_lengths[0]
        n_prev = _perpendicular(t_prev)
        for e in range(self.n_segments):
            t = seg[e] / self.rest_lengths[e]
            n = _min_rotation_between(t_prev, t) @ n_prev
            n -= t * np.dot(n, t)
            n /= np.linalg.norm(n)
            self.rest_frames[e] = np.column_stack([t, n, np.cross(t, n)])
            t_prev, n_prev = t, n

        # Node material triads: average of adjacent element frames at rest.
        self.rest_node_frames = np.empty((self.n_nodes, 3, 3))
        self.rest_node_frames[0] = self.rest_frames[0]
        self.rest_node_frames[-1] = self.rest_frames[-1]
        for i in range(1, self.n_nodes - 1):
            ra = Rotation.from_matrix(self.rest_frames[i - 1])
            rb = Rotation.from_matrix(self.rest_frames[i])
            mid = ra * Rotation.from_rotvec(0.5 * (ra.inv() * rb).as_rotvec())
            self.rest_node_frames[i] = mid.as_matrix()

        self.x = self.rest.copy()                     # current node positions
        self.node_rotation = Rotation.identity(self.n_nodes)  # motion since rest
        self.v = np.zeros(self.n_dofs)                # [lin, ang] per node
        self._K_loc = [beam_stiffness_local(L, material.young_modulus,
                                            material.shear_modulus, self.radius)
                       for L in self.rest_lengths]

    # ------------------------------------------------------------ factories

    @classmethod
    def straight(cls, base: np.ndarray, direction: np.ndarray, length: float,
                 n_segments: int, radius: float, material: Material) -> "BeamModel":
        base = np.asarray(base, dtype=float)
        d = np.asarray(direction, dtype=float)
        d = d / np.linalg.norm(d)
        s = np.linspace(0.0, length, n_segments + 1)
        return cls(base + s[:, None] * d, radius, material)

    # ------------------------------------------------------------ kinematics

    def node_triads(self) -> np.ndarray:
        """Current material frames (n, 3, 3), columns (t, n1, n2)-like."""
        return self.node_rotation.as_matrix() @ self.rest_node_frames

    def element_frames(self) -> np.ndarray:
        """Corotational element frames (n_seg, 3, 3): mean node triad rotated
        minimally so its first axis follows the current chord."""
        seg = np.diff(self.x, axis=0)
        lens = np.linalg.norm(seg, axis=1)
        frames = np.empty((self.n_segments, 3, 3))
        for e in range(self.n_segments):
            r1, r2 = self.node_rotation[e], self.node_rotation[e + 1]
            rm = r1 * Rotation.from_rotvec(0.5 * (r1.inv() * r2).as_rotvec())
            Tm = rm.as_matrix() @ self.rest_frames[e]
            t = seg[e] / lens[e]
            frames[e] = _min_rotation_between(Tm[:, 0], t) @ Tm
        return frames

    def local_deflections(self, frames: np.ndarray | None = None) -> np.ndarray:
        """(n_seg, 12) local DOF vectors measured against the element frames."""
        if frames is None:
            frames = self.element_frames()
        triads = self.node_triads()
        seg = np.diff(self.x, axis=0)
        d = np.zeros((self.n_segments, 12))
        for e in range(self.n_segments):
            E = frames[e]
            d[e, 6] = np.linalg.norm(seg[e]) - self.rest_lengths[e]
            for side, node in ((0, e), (1, e + 1)):
                Rl = E.T @ triads[node] @ self.rest_frames[e].T @ self.rest_node_frames[node]
                psi = Rotation.from_matrix(Rl).as_rotvec()
                d[e, 6 * side + 3: 6 * side + 6] = psi
        return d

    # -------------------------------------------------------------- assembly

    def forces_and_tangent(self) -> tuple[np.ndarray, sparse.csr_matrix]:
        """Internal forces (6n,) and corotated tangent stiffness (6n x 6n)."""
        frames = self.element_frames()
        d = self.local_deflections(frames)
        f = np.zeros(self.n_dofs)
        rows, cols, vals = [], [], []
        for e in range(self.n_segments):
            E = frames[e]
            B = np.kron(np.eye(4), E)
            f_loc = self._K_loc[e] @ d[e]
            f_glob = B @ f_loc
            K_glob = B @ self._K_loc[e] @ B.T
            dofs = np.concatenate([6 * e + np.arange(6), 6 * (e + 1) + np.arange(6)])
            f[dofs] += f_glob
            rows.append(np.broadcast_to(dofs[:, None], (12, 12)).ravel())
            cols.append(np.broadcast_to(dofs[None, :], (12, 12)).ravel())
            vals.append(K_glob.ravel())
        K = sparse.coo_matrix((np.concatenate(vals),
                               (np.concatenate(rows), np.concatenate(cols))),
                              shape=(self.n_dofs, self.n_dofs)).tocsr()
        return f, K

    def elastic_energy(self) -> float:
        d = self.local_deflections()
        return 0.5 * float(sum(d[e] @ self._K_loc[e] @ d[e]
                               for e in range(self.n_segments)))

    def lumped_mass(self) -> np.ndarray:
        """Diagonal mass (6n,): half-segment mass per node; small lumped
        rotary inertia keeps the rotational block strictly positive."""
        rho = self.material.density
        A = np.pi * self.radius ** 2
        m = np.zeros(self.n_dofs)
        for e, L in enumerate(self.rest_lengths):
            half = 0.5 * rho * A * L
            inertia = half * (L * L / 12.0 + self.radius ** 2 / 4.0)
            for node in (e, e + 1):
                m[6 * node: 6 * node + 3] += half
                m[6 * node + 3: 6 * node + 6] += inertia
        return m

    # ---------------------------------------------------------------- state

    def commit(self, dv: np.ndarray, tau: float) -> None:
        """v += dv, then positions/orientations advance with the new v."""
        self.v = self.v + dv
        vn = self.v.reshape(self.n_nodes, 6)
        self.x = self.x + tau * vn[:, :3]
        self.node_rotation = Rotation.from_rotvec(tau * vn[:, 3:]) * self.node_rotation

    # -------------------------------------------------------------- queries

    def segment_lengths(self) -> np.ndarray:
        return np.linalg.norm(np.diff(self.x, axis=0), axis=1)

    def total_length(self) -> float:
        return float(self.segment_lengths().sum())

    def tip_frame(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(tip position, tangent, normal, binormal) of the last element."""
        E = self.element_frames()[-1]
        return self.x[-1].copy(), E[:, 0], E[:, 1], E[:, 2]

    def shaft_point(self, s: float) -> tuple[np.ndarray, np.ndarray]:
        """Position and frame at arclength s from the base, current config."""
        lens = self.segment_lengths()
        total = lens.sum()
        if s < 0.0 or s > total:
            log.warning("arclength %.4g outside [0, %.4g]; clamped", s, total)
            s = min(max(s, 0.0), total)
        acc = 0.0
        for e, L in enumerate(lens):
            if s <= acc + L or e == self.n_segments - 1:
                a = (s - acc) / L
                pos = (1 - a) * self.x[e] + a * self.x[e + 1]
                return pos, self.element_frames()[e]
            acc += L
        raise AssertionError("unreachable")

    def segment_of_abscissa(self, s: float) -> tuple[int, float]:
        """(segment index, barycentric parameter) for arclength s."""
        lens = self.segment_lengths()
        s = min(max(s, 0.0), float(lens.sum()))
        acc = 0.0
        for e, L in enumerate(lens):
            if s <= acc + L or e == self.n_segments - 1:
                return e, min(max((s - acc) / L, 0.0), 1.0)
            acc += L
        raise AssertionError("unreachable")

    def point_jacobian_entries(self, s: float) -> list[tuple[int, float]]:
        """Translation-DOF weights of the material point at arclength s:
        velocity of the point = sum w * v[dof] per axis (linear interpolation
        between the segment's end nodes)."""
        e, a = self.segment_of_abscissa(s)
        out = []
        for axis in range(3):
            out.append((6 * e + axis, 1.0 - a))
            out.append((6 * (e + 1) + axis, a))
        return out

    def closest_abscissa(self, p: np.ndarray) -> tuple[float, float]:
        """(arclength, distance) of the shaft point nearest to p."""
        p = np.asarray(p, dtype=float)
        lens = self.segment_lengths()
        best = (0.0, np.inf)
        acc = 0.0
        for e in range(self.n_segments):
            a, b = self.x[e], self.x[e + 1]
            ab = b - a
            t = float(np.clip(np.dot(p - a, ab) / np.dot(ab, ab), 0.0, 1.0))
            q = a + t * ab
            dist = float(np.linalg.norm(p - q))
            if dist < best[1]:
                best = (acc + t * lens[e], dist)
            acc += lens[e]
        return best

    def insertion_depth_of(self, s: float) -> float:
        """Arclength measured from the tip (tip = total length)."""
        return self.total_length() - s
