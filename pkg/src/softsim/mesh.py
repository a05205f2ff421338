"""Tetrahedral and triangle mesh containers plus per-element geometry.

Element shapes are ``(3, 4)`` float64 arrays whose columns are vertex
positions. Region tags: 0 = body, 1 = chamber.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateElementError, ValidationError

BODY = 0
CHAMBER = 1

# column ordering of the four outward faces of a positively oriented tet
TET_FACES = np.array([[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]], dtype=np.int64)


def centering_matrix() -> np.ndarray:
    """The 4x4 projector that shifts an element's centroid to the origin."""
    return np.eye(4) - 0.25


def tet_volume(shape: np.ndarray) -> float:
    """Signed volume of one element; zero for coplanar vertices."""
    d = shape[:, 1:] - shape[:, :1]
    return float(np.linalg.det(d)) / 6.0


def tet_volumes(pos: np.ndarray, tets: np.ndarray) -> np.ndarray:
    """Signed volumes for every row of ``tets`` against ``pos``."""
    a = pos[tets[:, 1]] - pos[tets[:, 0]]
    b = pos[tets[:, 2]] - pos[tets[:, 0]]
    c = pos[tets[:, 3]] - pos[tets[:, 0]]
    return np.einsum("ij,ij->i", a, np.cross(b, c)) / 6.0


def shape_volumes(shapes: np.ndarray) -> np.ndarray:
    """Signed volumes of a stack of ``(n, 3, 4)`` element shapes."""
    a = shapes[:, :, 1] - shapes[:, :, 0]
    b = shapes[:, :, 2] - shapes[:, :, 0]
    c = shapes[:, :, 3] - shapes[:, :, 0]
    return np.einsum("ij,ij->i", a, np.cross(b, c)) / 6.0


def center_shape(shape: np.ndarray) -> np.ndarray:
    """Shift an element so its vertex centroid sits at the origin."""
    return shape - shape.mean(axis=1, keepdims=True)


def center_shapes(shapes: np.ndarray) -> np.ndarray:
    return shapes - shapes.mean(axis=2, keepdims=True)


def fit_rotation(deformed: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, bool]:
    """Proper rotation R minimizing ||centered(deformed) - R centered(target)||.

    Returns ``(R, degenerate)``. A target of rank < 2 leaves the rotation
    underdetermined; the identity is returned with the flag set.
    """
    a = center_shape(deformed)
    b = center_shape(target)
    h = a @ b.T
    u, s, vt = np.linalg.svd(h)
    if s[0] <= 0.0 or s[1] <= 1e-12 * s[0]:
        return np.eye(3), True
    if np.linalg.det(u) * np.linalg.det(vt) < 0.0:
        u = u.copy()
        u[:, 2] *= -1.0
    return u @ vt, False


@dataclass
class DistortionReport:
    tet_id: int
    volume_ratio: float
    sigma_norm: float


def measure_distortion(rest: np.ndarray, deformed: np.ndarray,
                       tet_id: int = -1, volume_eps: float = 1e-12) -> DistortionReport:
    """Principal-stretch distortion of the affine map taking rest to deformed.

    ``sigma_norm`` is ``max(s_max, 1/s_min)`` so both extreme stretch and
    extreme compression register; ``volume_ratio`` is deformed over rest.
    """
    vr = tet_volume(rest)
    if abs(vr) <= volume_eps:
        raise DegenerateElementError(f"rest element volume {vr:g} below {volume_eps:g}")
    b = center_shape(rest)
    a = center_shape(deformed)
    f = np.linalg.solve(b @ b.T, (a @ b.T).T).T
    sig = np.linalg.svd(f, compute_uv=False)
    smin = sig[-1]
    sigma_norm = float(max(sig[0], np.inf if smin <= 0.0 else 1.0 / smin))
    return DistortionReport(tet_id=tet_id,
                            volume_ratio=tet_volume(deformed) / vr,
                            sigma_norm=sigma_norm)


@dataclass
class SurfaceMesh:
    """Triangle surface; ``source_vertices``/``source_tets`` link back to a
    parent volume mesh when the surface was extracted from one."""

    positions: np.ndarray
    triangles: np.ndarray
    source_vertices: np.ndarray | None = None
    source_tets: np.ndarray | None = None

    @property
    def n_vertices(self) -> int:
        return self.positions.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    def triangle_normals(self, normalized: bool = True) -> np.ndarray:
        t = self.triangles
        n = np.cross(self.positions[t[:, 1]] - self.positions[t[:, 0]],
                     self.positions[t[:, 2]] - self.positions[t[:, 0]])
        if normalized:
            ln = np.linalg.norm(n, axis=1, keepdims=True)
            ln[ln == 0.0] = 1.0
            n = n / ln
        return n

    def triangle_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.triangle_normals(normalized=False), axis=1)

    def vertex_normals(self) -> np.ndarray:
        """Area-weighted per-vertex normals, unit length."""
        fn = self.triangle_normals(normalized=False)  # magnitude carries the area weight
        vn = np.zeros_like(self.positions)
        for k in range(3):
            np.add.at(vn, self.triangles[:, k], fn)
        ln = np.linalg.norm(vn, axis=1, keepdims=True)
        ln[ln == 0.0] = 1.0
        return vn / ln

    def signed_volume(self) -> float:
        p = self.positions
        t = self.triangles
        return float(np.einsum("ij,ij->i", p[t[:, 0]],
                               np.cross(p[t[:, 1]], p[t[:, 2]])).sum()) / 6.0

    def edge_counts(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Undirected edges with their total and forward-direction counts."""
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        und = np.sort(e, axis=1)
        keys, counts = np.unique(und, axis=0, return_counts=True)
        fwd = e[:, 0] < e[:, 1]
        fkeys, fcounts = np.unique(und[fwd], axis=0, return_counts=True)
        fmap = np.zeros(len(keys), dtype=np.int64)
        idx = np.searchsorted(keys[:, 0] * (self.n_vertices + 1) + keys[:, 1],
                              fkeys[:, 0] * (self.n_vertices + 1) + fkeys[:, 1])
        fmap[idx] = fcounts
        return keys, counts, fmap

    def watertight_report(self) -> tuple[bool, str]:
        """Closed and consistently oriented: every edge used once per direction."""
        if self.n_triangles == 0:
            return False, "no triangles"
        _, counts, fwd = self.edge_counts()
        if np.any(counts != 2):
            bad = int(np.sum(counts != 2))
            return False, f"{bad} edges not shared by exactly 2 triangles"
        if np.any(fwd != 1):
            bad = int(np.sum(fwd != 1))
            return False, f"{bad} edges traversed twice in the same direction"
        return True, "closed and consistently oriented"


@dataclass
class TetMesh:
    """Volumetric mesh with rest and deformed configurations.

    ``rest_shapes`` is the per-element rest geometry used by the energy; it
    starts as a gather of ``rest`` but remeshing can rebase freshly created
    chamber elements onto their birth shape. ``chamber_base`` records the
    cumulative inflation already baked into each element's rest shape.
    """

    rest: np.ndarray
    pos: np.ndarray
    tets: np.ndarray
    region: np.ndarray
    fixed: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))
    rest_shapes: np.ndarray | None = None
    chamber_base: np.ndarray | None = None

    def __post_init__(self):
        self.rest = np.ascontiguousarray(self.rest, dtype=np.float64)
        self.pos = np.ascontiguousarray(self.pos, dtype=np.float64)
        self.tets = np.ascontiguousarray(self.tets, dtype=np.int64)
        self.region = np.ascontiguousarray(self.region, dtype=np.uint8)
        self.fixed = np.unique(np.asarray(self.fixed, dtype=np.int64))
        if self.rest_shapes is None:
            in_range = self.n_tets == 0 or (self.tets.min() >= 0
                                            and self.tets.max() < self.n_vertices)
            # out-of-range indices are reported by validate(), not here
            self.rest_shapes = gather_shapes(self.rest, self.tets) if in_range \
                else np.zeros((self.n_tets, 3, 4))
        if self.chamber_base is None:
            self.chamber_base = np.ones(self.n_tets)

    @property
    def n_vertices(self) -> int:
        return self.rest.shape[0]

    @property
    def n_tets(self) -> int:
        return self.tets.shape[0]

    def region_mask(self, region: int | None) -> np.ndarray:
        if region is None:
            return np.ones(self.n_tets, dtype=bool)
        return self.region == region

    def rest_volumes(self) -> np.ndarray:
        return shape_volumes(self.rest_shapes)

    def deformed_volumes(self) -> np.ndarray:
        return tet_volumes(self.pos, self.tets)

    def region_volume(self, region: int | None, configuration: str = "deformed") -> float:
        """Summed element volume of a tagged region in one configuration."""
        mask = self.region_mask(region)
        if configuration == "deformed":
            vols = self.deformed_volumes()
        elif configuration == "rest":
            vols = self.rest_volumes()
        else:
            raise ValueError(f"unknown configuration {configuration!r}")
        return float(vols[mask].sum())

    def bbox_diag(self, configuration: str = "deformed") -> float:
        p = self.pos if configuration == "deformed" else self.rest
        return float(np.linalg.norm(p.max(axis=0) - p.min(axis=0)))

    def copy(self) -> "TetMesh":
        return TetMesh(rest=self.rest.copy(), pos=self.pos.copy(),
                       tets=self.tets.copy(), region=self.region.copy(),
                       fixed=self.fixed.copy(),
                       rest_shapes=self.rest_shapes.copy(),
                       chamber_base=self.chamber_base.copy())

    def validate(self) -> None:
        """Raise ValidationError on the first violated structural invariant."""
        for name, ok, detail in validity_checks(self):
            if not ok:
                raise ValidationError(f"{name}: {detail}")


def gather_shapes(positions: np.ndarray, tets: np.ndarray) -> np.ndarray:
    """Stack per-element ``(3, 4)`` shapes from a vertex array."""
    return positions[tets].transpose(0, 2, 1).copy()


def face_keys(tets: np.ndarray) -> np.ndarray:
    """All 4 faces per tet as sorted triples, shape ``(4 * n, 3)``."""
    faces = tets[:, TET_FACES]  # (n, 4, 3)
    return np.sort(faces.reshape(-1, 3), axis=1)


def boundary_faces(tets: np.ndarray, mask: np.ndarray | None = None
                   ) -> tuple[np.ndarray, np.ndarray]:
    """Outward-oriented faces used exactly once within the masked tet set.

    Returns ``(triangles, source_tets)`` with triangles indexing the parent
    vertex array.
    """
    if mask is not None:
        sel = np.flatnonzero(mask)
        sub = tets[sel]
    else:
        sel = np.arange(tets.shape[0])
        sub = tets
    oriented = sub[:, TET_FACES].reshape(-1, 3)
    src = np.repeat(sel, 4)
    keys = np.sort(oriented, axis=1)
    order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))
    keys = keys[order]
    same = np.all(keys[1:] == keys[:-1], axis=1)
    first_of_run = np.concatenate([[True], ~same])
    last_of_run = np.concatenate([~same, [True]])
    single = first_of_run & last_of_run
    picked = order[single]
    return oriented[picked], src[picked]


def extract_boundary(mesh: TetMesh, region: int | None = None,
                     configuration: str = "deformed") -> SurfaceMesh:
    """Boundary surface of a tagged region, compacted to its own vertex set."""
    tris, src = boundary_faces(mesh.tets, mesh.region_mask(region) if region is not None else None)
    used = np.unique(tris)
    remap = np.full(mesh.n_vertices, -1, dtype=np.int64)
    remap[used] = np.arange(used.size)
    p = mesh.pos if configuration == "deformed" else mesh.rest
    return SurfaceMesh(positions=p[used].copy(), triangles=remap[tris],
                       source_vertices=used, source_tets=src)


def validity_checks(mesh: TetMesh) -> list[tuple[str, bool, str]]:
    """All structural checks as (name, passed, detail) rows."""
    checks: list[tuple[str, bool, str]] = []
    nv, nt = mesh.n_vertices, mesh.n_tets
    checks.append(("shape", mesh.rest.shape == mesh.pos.shape,
                   f"rest {mesh.rest.shape} vs deformed {mesh.pos.shape}"))
    checks.append(("finite", bool(np.isfinite(mesh.rest).all() and np.isfinite(mesh.pos).all()),
                   "all coordinates finite"))
    in_range = bool(nt == 0 or (mesh.tets.min() >= 0 and mesh.tets.max() < nv))
    checks.append(("index-range", in_range, f"{nt} tets over {nv} vertices"))
    if not in_range:
        return checks

    vols = mesh.rest_volumes()
    n_bad = int(np.sum(vols <= 0.0))
    checks.append(("positive-volume", n_bad == 0, f"{n_bad} non-positive rest volumes"))

    dup = nt - np.unique(np.sort(mesh.tets, axis=1), axis=0).shape[0]
    keys, counts = np.unique(face_keys(mesh.tets), axis=0, return_counts=True)
    over = int(np.sum(counts > 2))
    conforming = dup == 0 and over == 0
    checks.append(("conformity", conforming,
                   f"{dup} duplicate tets, {over} faces shared by >2 tets"))

    tagged = bool(np.all((mesh.region == BODY) | (mesh.region == CHAMBER)))
    checks.append(("region-tags", tagged, "tags limited to body/chamber"))

    has_c = bool(np.any(mesh.region == CHAMBER))
    has_b = bool(np.any(mesh.region == BODY))
    if has_c and has_b:
        cv = np.unique(mesh.tets[mesh.region == CHAMBER])
        bv = np.unique(mesh.tets[mesh.region == BODY])
        shared = np.intersect1d(cv, bv, assume_unique=True)
        checks.append(("interface-connected", shared.size > 0,
                       f"{shared.size} shared chamber/body vertices"))

    fixed_ok = bool(mesh.fixed.size == 0 or
                    (mesh.fixed.min() >= 0 and mesh.fixed.max() < nv))
    checks.append(("fixed-ids", fixed_ok, f"{mesh.fixed.size} anchored vertices"))

    surf = extract_boundary(mesh, None, "rest")
    w_ok, w_detail = surf.watertight_report()
    checks.append(("closed-boundary", w_ok, w_detail))

    referenced = np.zeros(nv, dtype=bool)
    referenced[np.unique(mesh.tets)] = True
    orphans = int(nv - referenced.sum())
    checks.append(("orphan-vertices", True, f"{orphans} unreferenced vertices (allowed)"))
    return checks


def fix_orientation(positions: np.ndarray, tets: np.ndarray) -> int:
    """Swap two indices of negative-volume tets in place; returns fix count."""
    vols = tet_volumes(positions, tets)
    bad = vols < 0.0
    n = int(bad.sum())
    if n:
        tets[bad] = tets[bad][:, [0, 2, 1, 3]]
    return n


def vertex_region_sets(mesh: TetMesh) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(chamber vertices, body vertices, interface vertices), all sorted."""
    cv = np.unique(mesh.tets[mesh.region == CHAMBER])
    bv = np.unique(mesh.tets[mesh.region == BODY])
    return cv, bv, np.intersect1d(cv, bv, assume_unique=True)
