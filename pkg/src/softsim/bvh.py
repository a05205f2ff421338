"""Binary AABB tree over tets or triangles.

The topology is built once (top-down median split on the longest axis, one
primitive per leaf) and survives deformation; only the boxes are refit.
Nodes are stored parents-first so a reverse sweep refits bottom-up.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import EmptyInputError, SizeMismatchError


def primitive_boxes(positions: np.ndarray, prims: np.ndarray
                    ) -> tuple[np.ndarray, np.ndarray]:
    """Tight AABBs of index-tuples (tets or triangles) against ``positions``."""
    corners = positions[prims]
    return corners.min(axis=1), corners.max(axis=1)


@dataclass
class AabbTree:
    prims: np.ndarray          # (n, k) vertex indices per primitive
    positions: np.ndarray      # vertex array the boxes were last refit against
    pad: float = 0.0
    bmin: np.ndarray = field(init=False)
    bmax: np.ndarray = field(init=False)
    left: np.ndarray = field(init=False)
    right: np.ndarray = field(init=False)
    prim: np.ndarray = field(init=False)
    level_nodes: np.ndarray = field(init=False)
    level_ptr: np.ndarray = field(init=False)

    def __post_init__(self):
        n = self.prims.shape[0]
        if n == 0:
            raise EmptyInputError("cannot build a tree over zero primitives")
        n_nodes = 2 * n - 1
        self.bmin = np.empty((n_nodes, 3))
        self.bmax = np.empty((n_nodes, 3))
        self.left = np.full(n_nodes, -1, np.int32)
        self.right = np.full(n_nodes, -1, np.int32)
        self.prim = np.full(n_nodes, -1, np.int32)
        pmin, pmax = primitive_boxes(self.positions, self.prims)
        centroids = 0.5 * (pmin + pmax)
        depth = np.zeros(n_nodes, np.int32)

        next_free = 1
        stack: list[tuple[int, np.ndarray]] = [(0, np.arange(n, dtype=np.int64))]
        while stack:
            node, ids = stack.pop()
            if ids.size == 1:
                self.prim[node] = ids[0]
                continue
            c = centroids[ids]
            axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
            order = ids[np.argsort(c[:, axis], kind="stable")]
            half = order.size // 2
            l, r = next_free, next_free + 1
            next_free += 2
            self.left[node] = l
            self.right[node] = r
            depth[l] = depth[r] = depth[node] + 1
            stack.append((l, order[:half]))
            stack.append((r, order[half:]))

        order = np.argsort(depth, kind="stable")
        self.level_nodes = order.astype(np.int64)
        bounds = np.flatnonzero(np.diff(depth[order])) + 1
        self.level_ptr = np.concatenate([[0], bounds, [n_nodes]]).astype(np.int64)
        self._refit(pmin, pmax)

    @property
    def n_prims(self) -> int:
        return self.prims.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.prim.shape[0]

    def height(self) -> int:
        return int(self.level_ptr.shape[0] - 2)

    def _refit(self, pmin, pmax):
        kernels.refit_boxes(self.bmin, self.bmax, self.left, self.right, self.prim,
                            pmin, pmax, self.pad, self.level_nodes, self.level_ptr)

    def refit(self, positions: np.ndarray) -> None:
        """Update all boxes for new vertex positions; topology is untouched."""
        if positions.shape != self.positions.shape:
            raise SizeMismatchError(
                f"refit positions {positions.shape} != build positions {self.positions.shape}")
        self.positions = positions
        self._refit(*primitive_boxes(positions, self.prims))

    # -- queries -----------------------------------------------------------

    def query_points_in_tets(self, points, qverts, excl_keys=None):
        """(vertex_ids, tet_ids, visits) for points strictly inside tets."""
        if excl_keys is None:
            excl_keys = np.empty(0, np.int64)
        return kernels.point_tet_query(
            np.ascontiguousarray(points), np.ascontiguousarray(qverts, dtype=np.int64),
            self.bmin, self.bmax, self.left, self.right, self.prim,
            self.positions, self.prims, excl_keys)

    def query_ray(self, origins, dirs, qverts=None, tri_src=None,
                  excl_keys=None, n_excl_base=1):
        """First-hit parameter and triangle per ray; t = inf on a miss."""
        if qverts is None:
            qverts = np.zeros(origins.shape[0], np.int64)
        if tri_src is None:
            tri_src = np.arange(self.n_prims, dtype=np.int64)
        if excl_keys is None:
            excl_keys = np.empty(0, np.int64)
        return kernels.ray_surface_query(
            np.ascontiguousarray(origins), np.ascontiguousarray(dirs),
            np.ascontiguousarray(qverts, dtype=np.int64),
            self.bmin, self.bmax, self.left, self.right, self.prim,
            self.positions, self.prims, np.ascontiguousarray(tri_src, dtype=np.int64),
            excl_keys, n_excl_base)

    def query_closest(self, points, qverts=None, tri_src=None,
                      excl_keys=None, n_excl_base=1):
        """Closest surface point per query: (point, triangle, dist2, visits)."""
        if qverts is None:
            qverts = np.zeros(points.shape[0], np.int64)
        if tri_src is None:
            tri_src = np.arange(self.n_prims, dtype=np.int64)
        if excl_keys is None:
            excl_keys = np.empty(0, np.int64)
        return kernels.closest_point_query(
            np.ascontiguousarray(points),
            np.ascontiguousarray(qverts, dtype=np.int64),
            self.bmin, self.bmax, self.left, self.right, self.prim,
            self.positions, self.prims, np.ascontiguousarray(tri_src, dtype=np.int64),
            excl_keys, n_excl_base)


class WindingTree:
    """AABB tree over an oriented triangle surface with per-node far-field
    moments, evaluating generalized winding numbers in one traversal."""

    def __init__(self, positions: np.ndarray, triangles: np.ndarray):
        self.tree = AabbTree(np.ascontiguousarray(triangles, dtype=np.int64),
                             np.ascontiguousarray(positions, dtype=np.float64))
        self._build_moments()

    def _build_moments(self):
        t = self.tree
        pos, tris = t.positions, t.prims
        area_n = 0.5 * np.cross(pos[tris[:, 1]] - pos[tris[:, 0]],
                                pos[tris[:, 2]] - pos[tris[:, 0]])
        areas = np.linalg.norm(area_n, axis=1)
        tri_ctr = pos[tris].mean(axis=1)

        n_nodes = t.n_nodes
        self.nrm = np.zeros((n_nodes, 3))
        self.ctr = np.zeros((n_nodes, 3))
        wsum = np.zeros(n_nodes)
        # accumulate area-weighted centroids and normal sums bottom-up
        for lvl in range(t.level_ptr.shape[0] - 2, -1, -1):
            nodes = t.level_nodes[t.level_ptr[lvl]:t.level_ptr[lvl + 1]]
            pr = t.prim[nodes]
            leaf = pr >= 0
            ln = nodes[leaf]
            if ln.size:
                self.nrm[ln] = area_n[pr[leaf]]
                self.ctr[ln] = tri_ctr[pr[leaf]]
                wsum[ln] = np.maximum(areas[pr[leaf]], 1e-300)
            inn = nodes[~leaf]
            if inn.size:
                l, r = t.left[inn], t.right[inn]
                self.nrm[inn] = self.nrm[l] + self.nrm[r]
                wsum[inn] = wsum[l] + wsum[r]
                self.ctr[inn] = ((wsum[l, None] * self.ctr[l] + wsum[r, None] * self.ctr[r])
                                 / wsum[inn, None])
        # conservative node radius: farthest box corner from the node centroid
        r2 = np.zeros(n_nodes)
        for i in range(8):
            pick = np.array([(i >> a) & 1 for a in range(3)], dtype=bool)
            corner = np.where(pick, t.bmax, t.bmin)
            d = corner - self.ctr
            r2 = np.maximum(r2, np.einsum("ij,ij->i", d, d))
        self.rad2 = r2

    def winding(self, points: np.ndarray) -> tuple[np.ndarray, int]:
        t = self.tree
        return kernels.winding_query(np.ascontiguousarray(points),
                                     t.bmin, t.bmax, t.left, t.right, t.prim,
                                     t.positions, t.prims, self.ctr, self.nrm, self.rad2)

    def contains(self, points: np.ndarray) -> np.ndarray:
        w, _ = self.winding(points)
        return w >= 0.5
