"""Collision detection and virtual-spring response.

Surface vertices are tested against the deformed tet tree (self-collision,
strict barycentric interiority, with a topological exclusion neighborhood)
and against watertight obstacles (winding number >= 0.5). Detected vertices
get zero-rest-length springs pulling them to a collision-free correspondence
just outside the collided boundary; springs retarget every iteration and
release once the vertex clears the contact offset.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .bvh import AabbTree, WindingTree
from .errors import NonWatertightError
from .mesh import CHAMBER, SurfaceMesh, TetMesh, boundary_faces, vertex_region_sets

logger = logging.getLogger(__name__)

SELF = "self"
OBSTACLE = "obstacle"


@dataclass
class CollisionRecord:
    vertex_id: int
    kind: str                      # SELF or OBSTACLE
    target: np.ndarray             # collision-free correspondence point
    normal: np.ndarray             # unit outward normal at the contact
    obstacle_id: int | None = None


@dataclass
class SpringElement:
    record: CollisionRecord
    stiffness: float
    active: bool = True


@dataclass
class SpringUpdate:
    created: list[int] = field(default_factory=list)
    released: list[int] = field(default_factory=list)
    retargeted: int = 0


class Obstacle:
    """Static watertight surface placed in the scene."""

    def __init__(self, surface: SurfaceMesh, name: str = "obstacle"):
        ok, detail = surface.watertight_report()
        if not ok:
            raise NonWatertightError(f"{name}: {detail}")
        if surface.signed_volume() < 0.0:
            logger.warning("%s: inward orientation detected, flipping triangles", name)
            surface = SurfaceMesh(surface.positions,
                                  surface.triangles[:, [0, 2, 1]].copy())
        self.surface = surface
        self.name = name
        self.winding = WindingTree(surface.positions, surface.triangles)
        self.tree = self.winding.tree
        self._tri_normals = surface.triangle_normals()

    def contains(self, points: np.ndarray) -> np.ndarray:
        return self.winding.contains(points)

    def closest(self, points: np.ndarray):
        """(surface point, unit normal, triangle id, distance) per query."""
        pts, tri, d2, _ = self.tree.query_closest(points)
        return pts, self._tri_normals[tri], tri, np.sqrt(d2)


def exclusion_pairs(mesh: TetMesh, rings: int) -> np.ndarray:
    """Sorted ``vertex * n_tets + tet`` keys for every self-collision pair to
    skip: tets incident to any vertex within ``rings - 1`` adjacency hops."""
    nt = mesh.n_tets
    if rings <= 0 or nt == 0:
        return np.empty(0, np.int64)
    rows = np.repeat(np.arange(nt), 4)
    incidence = sp.csr_matrix(
        (np.ones(4 * nt, np.int8), (mesh.tets.ravel(), rows)),
        shape=(mesh.n_vertices, nt))
    incidence.data[:] = 1
    hop = (incidence @ incidence.T).astype(bool)  # vertices sharing a tet (incl. self)
    reach = sp.identity(mesh.n_vertices, dtype=bool, format="csr")
    for _ in range(rings - 1):
        reach = (reach @ hop).astype(bool)
    excl = (reach @ incidence.astype(bool)).tocsr()
    excl.sort_indices()
    counts = np.diff(excl.indptr)
    verts = np.repeat(np.arange(mesh.n_vertices, dtype=np.int64), counts)
    return verts * nt + excl.indices.astype(np.int64)


class CollisionPipeline:
    """Per-mesh-topology collision state: trees, surface sets, exclusions.

    Rebuild after remeshing; between remeshes only the boxes are refit.
    """

    def __init__(self, mesh: TetMesh, contact_offset: float,
                 exclusion_rings: int = 2, surface_mode: str = "all"):
        if surface_mode not in ("all", "chamber"):
            raise ValueError(f"unknown surface mode {surface_mode!r}")
        self.mesh = mesh
        self.contact_offset = float(contact_offset)
        self.exclusion_rings = int(exclusion_rings)
        self.surface_mode = surface_mode
        self.rebuild()

    def rebuild(self) -> None:
        mesh = self.mesh
        pad = 0.5 * self.contact_offset
        self.tet_tree = AabbTree(mesh.tets, mesh.pos, pad=pad)
        self.tris, self.tri_src = boundary_faces(mesh.tets)
        self.tri_tree = AabbTree(self.tris, mesh.pos, pad=pad)
        outer = np.unique(self.tris)
        cv, bv, interface = vertex_region_sets(mesh)
        if self.surface_mode == "chamber":
            self.surface_vertices = interface
        else:
            self.surface_vertices = np.union1d(outer, interface)
        self._outer_set = outer
        chamber_mask = mesh.region == CHAMBER
        if np.any(chamber_mask):
            self.chamber_tris, _ = boundary_faces(mesh.tets, chamber_mask)
        else:
            self.chamber_tris = np.empty((0, 3), np.int64)
        self.excl_keys = exclusion_pairs(mesh, self.exclusion_rings)
        self.last_visits = 0

    def refit(self, positions: np.ndarray | None = None) -> None:
        pos = self.mesh.pos if positions is None else positions
        self.tet_tree.refit(pos)
        self.tri_tree.refit(pos)

    # -- geometry helpers ----------------------------------------------------

    def vertex_normals(self, positions: np.ndarray) -> np.ndarray:
        """Outward normals for all collision-surface vertices; interface
        vertices not on the outer skin use the chamber-boundary orientation."""
        normals = np.zeros_like(positions)
        fn = np.cross(positions[self.tris[:, 1]] - positions[self.tris[:, 0]],
                      positions[self.tris[:, 2]] - positions[self.tris[:, 0]])
        for k in range(3):
            np.add.at(normals, self.tris[:, k], fn)
        if self.chamber_tris.shape[0]:
            inner = np.zeros_like(positions)
            cfn = np.cross(positions[self.chamber_tris[:, 1]] - positions[self.chamber_tris[:, 0]],
                           positions[self.chamber_tris[:, 2]] - positions[self.chamber_tris[:, 0]])
            for k in range(3):
                np.add.at(inner, self.chamber_tris[:, k], cfn)
            missing = np.ones(positions.shape[0], bool)
            missing[self._outer_set] = False
            normals[missing] = inner[missing]
        ln = np.linalg.norm(normals, axis=1, keepdims=True)
        ln[ln == 0.0] = 1.0
        return normals / ln

    def _tri_unit_normals(self, positions: np.ndarray, tri_ids: np.ndarray) -> np.ndarray:
        t = self.tris[tri_ids]
        n = np.cross(positions[t[:, 1]] - positions[t[:, 0]],
                     positions[t[:, 2]] - positions[t[:, 0]])
        ln = np.linalg.norm(n, axis=1, keepdims=True)
        ln[ln == 0.0] = 1.0
        return n / ln

    # -- detection -------------------------------------------------------------

    def detect_self(self, positions: np.ndarray) -> np.ndarray:
        """Sorted surface vertices strictly inside a non-excluded tet."""
        qv = self.surface_vertices
        hits_v, _, visits = self.tet_tree.query_points_in_tets(
            positions[qv], qv, self.excl_keys)
        self.last_visits = visits
        return np.unique(hits_v)

    def detect_obstacles(self, positions: np.ndarray,
                         obstacles: list[Obstacle]) -> list[tuple[int, int]]:
        """(vertex, obstacle) pairs for surface vertices inside an obstacle."""
        qv = self.surface_vertices
        pts = positions[qv]
        pairs: list[tuple[int, int]] = []
        for oid, obs in enumerate(obstacles):
            inside = obs.contains(pts)
            pairs.extend((int(v), oid) for v in qv[inside])
        pairs.sort()
        return pairs

    # -- correspondences ---------------------------------------------------------

    def self_correspondence(self, vids: np.ndarray, positions: np.ndarray,
                            normals: np.ndarray, penetrating: bool = True
                            ) -> list[CollisionRecord]:
        """Collision-free targets on the opposing boundary.

        Penetrating vertices cast a ray back along their inverse normal and
        take the first non-excluded hit; cleared vertices (and ray misses)
        fall back to the closest non-excluded surface point. Targets sit
        ``contact_offset`` outside the hit surface.
        """
        if len(vids) == 0:
            return []
        vids = np.asarray(vids, dtype=np.int64)
        eps = self.contact_offset
        nt = self.mesh.n_tets
        origins = positions[vids]
        records: dict[int, CollisionRecord] = {}
        need_closest = vids
        if penetrating:
            dirs = -normals[vids]
            t, tri, _ = self.tri_tree.query_ray(origins, dirs, qverts=vids,
                                                tri_src=self.tri_src,
                                                excl_keys=self.excl_keys,
                                                n_excl_base=nt)
            hit = np.isfinite(t)
            if np.any(hit):
                n_hit = self._tri_unit_normals(positions, tri[hit])
                targets = origins[hit] + t[hit, None] * dirs[hit] + eps * n_hit
                for v, vc, n in zip(vids[hit], targets, n_hit):
                    records[int(v)] = CollisionRecord(int(v), SELF, vc, n)
            need_closest = vids[~hit]
        if len(need_closest):
            pts, tri, d2, _ = self.tri_tree.query_closest(
                positions[need_closest], qverts=need_closest,
                tri_src=self.tri_src, excl_keys=self.excl_keys, n_excl_base=nt)
            ok = tri >= 0
            n_hit = self._tri_unit_normals(positions, tri[ok])
            targets = pts[ok] + eps * n_hit
            for v, vc, n in zip(need_closest[ok], targets, n_hit):
                records[int(v)] = CollisionRecord(int(v), SELF, vc, n)
        return [records[int(v)] for v in vids if int(v) in records]

    def obstacle_correspondence(self, vids: np.ndarray, positions: np.ndarray,
                                obstacle: Obstacle, obstacle_id: int
                                ) -> list[CollisionRecord]:
        if len(vids) == 0:
            return []
        vids = np.asarray(vids, dtype=np.int64)
        pts, normals, _, _ = obstacle.closest(positions[vids])
        targets = pts + self.contact_offset * normals
        return [CollisionRecord(int(v), OBSTACLE, vc, n, obstacle_id)
                for v, vc, n in zip(vids, targets, normals)]

    # -- spring lifecycle -----------------------------------------------------

    def update_springs(self, springs: dict[int, SpringElement],
                       positions: np.ndarray, obstacles: list[Obstacle],
                       self_hits: np.ndarray, obstacle_hits: list[tuple[int, int]],
                       stiffness: float) -> tuple[dict[int, SpringElement], SpringUpdate]:
        """Create, retarget, and release springs against fresh detection results.

        A vertex colliding with an obstacle takes an obstacle spring even if
        it also self-collides. A spring releases when its vertex is no longer
        detected anywhere and its signed clearance beyond the correspondence
        exceeds the contact offset.
        """
        eps = self.contact_offset
        normals = self.vertex_normals(positions)
        self_set = set(int(v) for v in self_hits)
        obs_map: dict[int, int] = {}
        for v, oid in obstacle_hits:
            obs_map.setdefault(v, oid)

        update = SpringUpdate()
        out: dict[int, SpringElement] = {}

        # group retarget/creation work by correspondence routine
        groups: dict[tuple, list[int]] = {}
        for v in sorted(set(springs) | set(obs_map) | self_set):
            if v in obs_map:
                key = (OBSTACLE, obs_map[v])
            elif v in self_set:
                key = (SELF, True)
            else:
                spring = springs[v]
                if spring.record.kind == OBSTACLE:
                    key = (OBSTACLE, spring.record.obstacle_id)
                else:
                    key = (SELF, False)
            groups.setdefault(key, []).append(v)

        records: dict[int, CollisionRecord] = {}
        for key, vids in sorted(groups.items()):
            varr = np.asarray(vids, dtype=np.int64)
            if key[0] == OBSTACLE:
                recs = self.obstacle_correspondence(varr, positions,
                                                    obstacles[key[1]], key[1])
            else:
                recs = self.self_correspondence(varr, positions, normals,
                                                penetrating=key[1])
            for r in recs:
                records[r.vertex_id] = r

        for v in sorted(set(springs) | set(records)):
            rec = records.get(v)
            old = springs.get(v)
            detected = v in self_set or v in obs_map
            if old is not None:
                if rec is None:
                    # no correspondence found: drop rather than pin to stale data
                    update.released.append(v)
                    continue
                # |n . (v - v_c)|: the magnitude form also releases vertices
                # that slid around a corner of the collided region, where the
                # plane-projected clearance goes negative while the vertex is
                # actually clear of the solid (it is not detected).
                signed = float(np.dot(rec.normal, positions[v] - rec.target))
                if not detected and abs(signed) > eps:
                    update.released.append(v)
                    continue
                # a spring pulls while its vertex is inside the solid or still
                # short of the offset shell; the pull vanishes smoothly at the
                # shell and the spring then goes dormant (zero energy), so it
                # can never drag the body back onto the contact. It waits in
                # the set until the clearance rule above retires it.
                out[v] = SpringElement(rec, old.stiffness,
                                       active=detected or signed < 0.0)
                update.retargeted += 1
            elif rec is not None and detected:
                out[v] = SpringElement(rec, stiffness, active=True)
                update.created.append(v)
        return out, update
