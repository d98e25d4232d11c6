"""Immersed hexahedral tissue mesh with nested template refinement.

The tissue domain is a watertight triangle surface immersed into a regular
hex grid: a cell is material iff its centre lies inside the surface.  Local
refinement replaces an element by the children of a subdivision template;
nodes instantiated on faces/edges shared with coarser neighbours become
hanging (T-junction) nodes whose kinematics are tied to master nodes by
linear constraints.

All elements are axis-aligned boxes: children of an axis-aligned box are
axis-aligned boxes, so element geometry is fully described by (depth, corner
positions) and inverse mappings are analytic.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import SurfaceGeometry

log = logging.getLogger(__name__)

# Local corner numbering: bottom face counter-clockwise viewed from +z,
# then the top face in the same order (standard hexahedron convention).
CORNER_OFFSETS = np.array([
    (0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0),
    (0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1),
], dtype=float)

_BITS_TO_LOCAL = {tuple(int(b) for b in off): k for k, off in enumerate(CORNER_OFFSETS)}


def shape_values(xi: np.ndarray) -> np.ndarray:
    """Trilinear shape functions at natural coordinates xi in [0,1]^3.

    xi may be (3,) or (n, 3); returns (8,) or (n, 8) matching CORNER_OFFSETS.
    """
    xi = np.asarray(xi, dtype=float)
    single = xi.ndim == 1
    xi = np.atleast_2d(xi)
    w = np.ones((len(xi), 8))
    for a in range(3):
        w *= np.where(CORNER_OFFSETS[:, a] > 0.5, xi[:, a, None], 1.0 - xi[:, a, None])
    return w[0] if single else w


def shape_gradients(xi: np.ndarray, box_size: np.ndarray) -> np.ndarray:
    """Gradients dN_i/dx (8, 3) of the trilinear functions on an axis-aligned
    box of edge lengths box_size, evaluated at natural coordinates xi."""
    xi = np.asarray(xi, dtype=float)
    h = np.asarray(box_size, dtype=float)
    g = np.empty((8, 3))
    for a in range(3):
        terms = np.ones(8)
        for b in range(3):
            if b == a:
                terms *= np.where(CORNER_OFFSETS[:, b] > 0.5, 1.0, -1.0)
            else:
                terms *= np.where(CORNER_OFFSETS[:, b] > 0.5, xi[b], 1.0 - xi[b])
        g[:, a] = terms / h[a]
    return g


class MeshError(ValueError):
    pass


@dataclass
class RefinementTemplate:
    """Subdivision template in natural coordinates of the parent cube.

    node_xi:   (m, 3) natural coordinates of template nodes.
    children:  (c, 8) connectivity over template nodes, local corner order.
    weights:   (m, 8) trilinear weights of each template node w.r.t. the
               parent corners (each row is a convex combination).
    """

    node_xi: np.ndarray
    children: np.ndarray
    weights: np.ndarray = field(init=False)

    def __post_init__(self):
        self.node_xi = np.asarray(self.node_xi, dtype=float)
        self.children = np.asarray(self.children, dtype=int)
        self.weights = shape_values(self.node_xi)
        s = self.weights.sum(axis=1)
        if not np.allclose(s, 1.0, atol=1e-12):
            raise MeshError("template weights are not convex combinations")


def uniform_template() -> RefinementTemplate:
    """Regular 2x2x2 subdivision: 27 lattice nodes, 8 children."""
    xi = np.array([(ix, iy, iz) for iz in range(3) for iy in range(3) for ix in range(3)],
                  dtype=float) / 2.0
    lat = lambda ix, iy, iz: ix + 3 * iy + 9 * iz
    children = []
    for cz in range(2):
        for cy in range(2):
            for cx in range(2):
                children.append([lat(cx + int(ox), cy + int(oy), cz + int(oz))
                                 for ox, oy, oz in CORNER_OFFSETS])
    return RefinementTemplate(xi, np.array(children))


@dataclass
class HexElement:
    node_ids: np.ndarray          # 8 node ids, local corner order
    depth: int                    # refinement depth, 0 = base grid
    parent_id: int | None = None
    active: bool = True
    child_ids: list[int] = field(default_factory=list)


@dataclass
class TJunction:
    slave: int
    masters: list[int]
    weights: list[float]


@dataclass
class RefinementResult:
    """Outcome of refining one or more elements.

    interpolation maps every newly created node id to (master node ids,
    trilinear weights) over the refined element's corner nodes, all of which
    existed before the refinement — any nodal field can be transferred.
    """

    new_node_ids: list[int]
    new_element_ids: list[int]
    interpolation: dict[int, tuple[np.ndarray, np.ndarray]]


class HexMesh:
    """Hexahedral mesh over a regular bounding grid with nested refinement."""

    def __init__(self, origin, spacing, extents, template: RefinementTemplate | None = None,
                 max_depth: int = 3):
        self.origin = np.asarray(origin, dtype=float)
        self.spacing = np.asarray(spacing, dtype=float)
        self.extents = np.asarray(extents, dtype=int)
        self.template = template if template is not None else uniform_template()
        self.max_depth = int(max_depth)
        self.elements: list[HexElement] = []
        self.t_junctions: list[TJunction] = []
        self._node_buf = np.empty((64, 3))
        self._node_depth_buf = np.empty(64, dtype=int)
        self._n_nodes = 0
        self._dedup_tol = 1e-9 * float(self.spacing.min())
        self._node_hash: dict[tuple[int, int, int], list[int]] = {}
        self._cell_to_element: dict[int, int] = {}
        self.topology_version = 0
        self._junction_version = -1

    # ---------------------------------------------------------------- nodes

    @property
    def nodes(self) -> np.ndarray:
        """Rest positions, shape (n_nodes, 3). Snapshot view; do not hold
        across refinements."""
        return self._node_buf[:self._n_nodes]

    @property
    def n_nodes(self) -> int:
        return self._n_nodes

    @property
    def node_depth(self) -> np.ndarray:
        return self._node_depth_buf[:self._n_nodes]

    def _hash_key(self, p) -> tuple[int, int, int]:
        return tuple(int(k) for k in np.floor(p / self._dedup_tol + 0.5))

    def find_node(self, p) -> int | None:
        """Existing node within the dedup tolerance of p, or None."""
        p = np.asarray(p, dtype=float)
        kx, ky, kz = self._hash_key(p)
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dz in (-1, 0, 1):
                    for nid in self._node_hash.get((kx + dx, ky + dy, kz + dz), ()):
                        if np.all(np.abs(self._node_buf[nid] - p) <= self._dedup_tol):
                            return nid
        return None

    def _add_node(self, p, depth: int) -> int:
        if self._n_nodes == len(self._node_buf):
            self._node_buf = np.concatenate([self._node_buf, np.empty_like(self._node_buf)])
            self._node_depth_buf = np.concatenate(
                [self._node_depth_buf, np.empty_like(self._node_depth_buf)])
        nid = self._n_nodes
        self._node_buf[nid] = p
        self._node_depth_buf[nid] = depth
        self._n_nodes += 1
        self._node_hash.setdefault(self._hash_key(p), []).append(nid)
        return nid

    def _find_or_add_node(self, p, depth: int) -> tuple[int, bool]:
        nid = self.find_node(p)
        if nid is not None:
            return nid, False
        return self._add_node(p, depth), True

    # ------------------------------------------------------------- elements

    def active_element_ids(self) -> np.ndarray:
        return np.array([i for i, e in enumerate(self.elements) if e.active], dtype=int)

    def active_connectivity(self) -> tuple[np.ndarray, np.ndarray]:
        """(element ids, (n_active, 8) node-id array)."""
        ids = self.active_element_ids()
        conn = np.array([self.elements[i].node_ids for i in ids], dtype=int).reshape(len(ids), 8)
        return ids, conn

    def element_box(self, eid: int) -> tuple[np.ndarray, np.ndarray]:
        xs = self.nodes[self.elements[eid].node_ids]
        return xs.min(axis=0), xs.max(axis=0)

    def element_volumes(self, ids=None) -> np.ndarray:
        if ids is None:
            ids = self.active_element_ids()
        out = np.empty(len(ids))
        for k, eid in enumerate(ids):
            lo, hi = self.element_box(eid)
            out[k] = np.prod(hi - lo)
        return out

    def total_volume(self) -> float:
        return float(self.element_volumes().sum())

    def element_centres(self, ids=None) -> np.ndarray:
        if ids is None:
            ids = self.active_element_ids()
        out = np.empty((len(ids), 3))
        for k, eid in enumerate(ids):
            lo, hi = self.element_box(eid)
            out[k] = 0.5 * (lo + hi)
        return out

    def element_size(self, depth: int) -> np.ndarray:
        """Edge lengths of any element at the given depth."""
        return self.spacing / (2.0 ** depth)

    # ---------------------------------------------------------- immersion

    @classmethod
    def voxelize_domain(cls, surface: SurfaceGeometry, resolution,
                        template: RefinementTemplate | None = None,
                        max_depth: int = 3) -> "HexMesh":
        """Immerse `surface` into a regular grid over its bounding box.

        Keeps exactly the cells whose centre lies inside the surface; all
        elements start at depth 0 and the mesh is conforming.
        """
        resolution = np.asarray(resolution, dtype=int)
        if np.any(resolution < 1):
            raise MeshError(f"resolution must be >= 1 per axis, got {resolution}")
        lo, hi = surface.bounds()
        spacing = (hi - lo) / resolution
        if np.any(spacing <= 0):
            raise MeshError("surface bounding box is degenerate")
        mesh = cls(lo, spacing, resolution, template=template, max_depth=max_depth)

        nx, ny, nz = resolution
        ii = np.array([(ix, iy, iz) for iz in range(nz) for iy in range(ny) for ix in range(nx)])
        centres = lo + (ii + 0.5) * spacing
        inside = surface.contains(centres)
        if not np.any(inside):
            raise MeshError("no cell centre lies inside the surface; "
                            "increase the resolution or check the geometry")

        # Grid-lexicographic node numbering over the corners actually used.
        corner_lin: dict[tuple[int, int, int], int] = {}
        for (ix, iy, iz) in ii[inside]:
            for off in CORNER_OFFSETS.astype(int):
                corner_lin[(ix + off[0], iy + off[1], iz + off[2])] = -1
        for nid, key in enumerate(sorted(corner_lin, key=lambda k: (k[2], k[1], k[0]))):
            corner_lin[key] = nid
            mesh._add_node(lo + np.array(key) * spacing, 0)

        for (ix, iy, iz) in ii[inside]:
            node_ids = np.array([corner_lin[(ix + int(ox), iy + int(oy), iz + int(oz))]
                                 for ox, oy, oz in CORNER_OFFSETS], dtype=int)
            eid = len(mesh.elements)
            mesh.elements.append(HexElement(node_ids=node_ids, depth=0))
            mesh._cell_to_element[ix + nx * (iy + ny * iz)] = eid
        log.info("voxelized %d/%d cells, %d nodes", len(mesh.elements), nx * ny * nz,
                 mesh.n_nodes)
        mesh.topology_version += 1
        return mesh

    # ---------------------------------------------------------- refinement

    def refine_element(self, eid: int) -> RefinementResult | None:
        """Replace an active element by its template children.

        Returns None (refusal, element untouched) when the element is already
        at the configured maximum depth.
        """
        el = self.elements[eid]
        if not el.active:
            raise MeshError(f"element {eid} is inactive")
        if el.depth >= self.max_depth:
            log.warning("refinement of element %d refused: depth %d at maximum",
                        eid, el.depth)
            return None
        corners = self.nodes[el.node_ids]
        lo, hi = corners.min(axis=0), corners.max(axis=0)
        if np.any(hi - lo <= 0):
            raise MeshError(f"element {eid} is degenerate")

        positions = self.template.weights @ corners          # (m, 3)
        tpl_node_ids = np.empty(len(positions), dtype=int)
        new_nodes: list[int] = []
        interp: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        for j, p in enumerate(positions):
            nid, created = self._find_or_add_node(p, el.depth + 1)
            tpl_node_ids[j] = nid
            if created:
                new_nodes.append(nid)
                interp[nid] = (el.node_ids.copy(), self.template.weights[j].copy())

        new_elements: list[int] = []
        for child in self.template.children:
            cid = len(self.elements)
            self.elements.append(HexElement(node_ids=tpl_node_ids[child],
                                            depth=el.depth + 1, parent_id=eid))
            el.child_ids.append(cid)
            new_elements.append(cid)
        el.active = False
        self.topology_version += 1
        return RefinementResult(new_nodes, new_elements, interp)

    def refine_elements(self, eids) -> RefinementResult:
        """Refine a batch of elements; interpolation sources all predate the
        batch, so one pre-batch state array serves every transfer."""
        new_nodes: list[int] = []
        new_elements: list[int] = []
        interp: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        for eid in eids:
            res = self.refine_element(eid)
            if res is None:
                continue
            new_nodes.extend(res.new_node_ids)
            new_elements.extend(res.new_element_ids)
            interp.update(res.interpolation)
        return RefinementResult(new_nodes, new_elements, interp)

    # --------------------------------------------------------- T-junctions

    def detect_t_junctions(self) -> list[TJunction]:
        """Find hanging nodes: nodes on an edge or face of an active element
        that are not among that element's corners.

        Each hanging node gets exactly one record; when several elements
        could claim it, the edge entity wins over the face entity, then the
        smaller depth, then the smaller element id.
        """
        ids, conn = self.active_connectivity()
        depths = np.array([self.elements[i].depth for i in ids])
        self._junction_version = self.topology_version
        if len(ids) == 0 or depths.max() == depths.min():
            # Same-lattice elements are conforming by construction.
            self.t_junctions = []
            return []
        nodes = self.nodes
        eps = 10.0 * self._dedup_tol
        lo = nodes[conn].min(axis=1)
        hi = nodes[conn].max(axis=1)
        centres = 0.5 * (lo + hi)
        radii = 0.5 * np.linalg.norm(hi - lo, axis=1) + 2 * eps
        tree = cKDTree(nodes)

        best: dict[int, tuple[tuple[int, int, int], list[int], list[float]]] = {}
        for k, eid in enumerate(ids):
            corner_set = set(int(n) for n in conn[k])
            for nid in tree.query_ball_point(centres[k], radii[k]):
                if nid in corner_set:
                    continue
                p = nodes[nid]
                if np.any(p < lo[k] - eps) or np.any(p > hi[k] + eps):
                    continue
                on_lo = np.abs(p - lo[k]) <= eps
                on_hi = np.abs(p - hi[k]) <= eps
                pinned = on_lo | on_hi
                n_pin = int(pinned.sum())
                if n_pin == 3:
                    continue  # coincides with a corner of another element
                if n_pin == 0:
                    log.warning("node %d strictly inside active element %d", nid, eid)
                    continue
                masters, weights = self._entity_interpolation(
                    conn[k], lo[k], hi[k], p, pinned, on_hi)
                kind = 0 if n_pin == 2 else 1  # edge before face
                key = (kind, int(depths[k]), int(eid))
                if nid not in best or key < best[nid][0]:
                    best[nid] = (key, masters, weights)

        out = [TJunction(nid, masters, weights)
               for nid, (_, masters, weights) in sorted(best.items())]
        self.t_junctions = out
        return out

    @staticmethod
    def _entity_interpolation(conn_row, lo, hi, p, pinned, on_hi):
        free = [a for a in range(3) if not pinned[a]]
        t = [(p[a] - lo[a]) / (hi[a] - lo[a]) for a in free]

        def corner_id(bits):
            return int(conn_row[_BITS_TO_LOCAL[tuple(bits)]])

        base = [1 if (pinned[a] and on_hi[a]) else 0 for a in range(3)]
        if len(free) == 1:
            a = free[0]
            b0, b1 = list(base), list(base)
            b0[a], b1[a] = 0, 1
            return [corner_id(b0), corner_id(b1)], [1.0 - t[0], t[0]]
        # face: bilinear over the two free axes
        u, v = t
        masters, weights = [], []
        for bv, wv in ((0, 1.0 - v), (1, v)):
            for bu, wu in ((0, 1.0 - u), (1, u)):
                bits = list(base)
                bits[free[0]], bits[free[1]] = bu, bv
                masters.append(corner_id(bits))
                weights.append(wu * wv)
        return masters, weights

    def flattened_t_junctions(self) -> list[TJunction]:
        """T-junctions with chains substituted away: every master is a
        conforming node.  Detection reruns automatically after refinement."""
        if self._junction_version != self.topology_version:
            self.detect_t_junctions()
        slave_map = {j.slave: (j.masters, j.weights) for j in self.t_junctions}
        out = []
        for j in self.t_junctions:
            acc = dict(zip(j.masters, j.weights))
            for _ in range(16 * (self.max_depth + 1)):
                pending = [m for m in acc if m in slave_map]
                if not pending:
                    break
                for m in pending:
                    wm = acc.pop(m)
                    for mm, ww in zip(*slave_map[m]):
                        acc[mm] = acc.get(mm, 0.0) + wm * ww
            else:
                raise MeshError(f"T-junction chain at node {j.slave} did not terminate")
            items = sorted((m, w) for m, w in acc.items() if abs(w) > 1e-14)
            out.append(TJunction(j.slave, [m for m, _ in items], [w for _, w in items]))
        return out

    def build_t_matrix(self, n_dofs: int | None = None):
        """Sparse T with one row triple per junction: u_slave - sum w u_master = 0.

        Chained junctions are flattened so the rows are linearly independent.
        """
        from scipy import sparse
        juncs = self.flattened_t_junctions()
        n = 3 * self.n_nodes if n_dofs is None else n_dofs
        rows, cols, vals = [], [], []
        for r, j in enumerate(juncs):
            for ax in range(3):
                rows.append(3 * r + ax)
                cols.append(3 * j.slave + ax)
                vals.append(1.0)
                for m, w in zip(j.masters, j.weights):
                    rows.append(3 * r + ax)
                    cols.append(3 * m + ax)
                    vals.append(-w)
        return sparse.csr_matrix((vals, (rows, cols)), shape=(3 * len(juncs), n))

    # ------------------------------------------------------------- queries

    def locate(self, p) -> tuple[int, np.ndarray] | None:
        """Active element containing p plus natural coordinates, or None.

        Descends the refinement hierarchy from the base grid cell; points on
        shared boundaries resolve to the first containing child (ties are
        harmless: the trilinear maps agree on shared faces).
        """
        p = np.asarray(p, dtype=float)
        idx = np.floor((p - self.origin) / self.spacing).astype(int)
        idx = np.clip(idx, 0, self.extents - 1)
        nx, ny, nz = self.extents
        eid = self._cell_to_element.get(int(idx[0] + nx * (idx[1] + ny * idx[2])))
        if eid is None:
            return None
        lo, hi = self.element_box(eid)
        tol = 10.0 * self._dedup_tol
        if np.any(p < lo - tol) or np.any(p > hi + tol):
            return None
        while not self.elements[eid].active:
            el = self.elements[eid]
            nxt = None
            for cid in el.child_ids:
                clo, chi = self.element_box(cid)
                if np.all(p >= clo - tol) and np.all(p <= chi + tol):
                    nxt = cid
                    break
            if nxt is None:
                return None
            eid = nxt
        lo, hi = self.element_box(eid)
        xi = np.clip((p - lo) / (hi - lo), 0.0, 1.0)
        return eid, xi

    def locate_or_nearest(self, p) -> tuple[int, np.ndarray, bool]:
        """Like locate, falling back to the nearest active element (clamped
        natural coordinates) for points outside the material region."""
        hit = self.locate(p)
        if hit is not None:
            return hit[0], hit[1], True
        ids = self.active_element_ids()
        centres = self.element_centres(ids)
        k = int(np.argmin(np.einsum("ij,ij->i", centres - p, centres - p)))
        eid = int(ids[k])
        lo, hi = self.element_box(eid)
        xi = np.clip((np.asarray(p, dtype=float) - lo) / (hi - lo), 0.0, 1.0)
        log.debug("point %s outside all active elements; anchored to element %d", p, eid)
        return eid, xi, False

    def world_position(self, eid: int, xi) -> np.ndarray:
        """Forward trilinear map of natural coordinates in element eid."""
        return shape_values(xi) @ self.nodes[self.elements[eid].node_ids]

    # ---------------------------------------------------------- validation

    def validate(self) -> None:
        """Raise MeshError on violation of the structural invariants."""
        n = self.n_nodes
        for i, el in enumerate(self.elements):
            nid = np.asarray(el.node_ids)
            if len(set(int(x) for x in nid)) != 8 or nid.min() < 0 or nid.max() >= n:
                raise MeshError(f"element {i}: bad node ids {nid}")
            lo, hi = self.element_box(i)
            if np.any(hi - lo <= 0):
                raise MeshError(f"element {i}: non-positive Jacobian")
            if el.active and el.child_ids:
                raise MeshError(f"element {i}: active with children")
            if not el.active and not el.child_ids:
                raise MeshError(f"element {i}: inactive without children")
            for cid in el.child_ids:
                if self.elements[cid].depth != el.depth + 1:
                    raise MeshError(f"element {cid}: depth != parent depth + 1")
            if el.depth > self.max_depth:
                raise MeshError(f"element {i}: depth {el.depth} exceeds max {self.max_depth}")
        slaves = [j.slave for j in self.t_junctions]
        if len(slaves) != len(set(slaves)):
            raise MeshError("node appears in more than one T-junction record")
        for j in self.t_junctions:
            w = np.asarray(j.weights)
            if abs(w.sum() - 1.0) > 1e-12:
                raise MeshError(f"T-junction {j.slave}: weights sum {w.sum()}")
            p = w @ self.nodes[j.masters]
            if np.linalg.norm(p - self.nodes[j.slave]) > 1e-10:
                raise MeshError(f"T-junction {j.slave}: not on master hull")
