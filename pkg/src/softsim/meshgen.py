"""Synthetic meshes for fixtures, benchmarks, and the CLI.

Grids use the 6-tet corner-to-corner split of each cell, which is conforming
across a translated lattice.
"""

from __future__ import annotations

import numpy as np

from .mesh import BODY, CHAMBER, SurfaceMesh, TetMesh, fix_orientation

# 6 tets around the main diagonal of a unit cell; corners are indexed by
# bit-packed (dx, dy, dz)
_CUBE_TETS = np.array([
    [0, 1, 3, 7],
    [0, 3, 2, 7],
    [0, 2, 6, 7],
    [0, 6, 4, 7],
    [0, 4, 5, 7],
    [0, 5, 1, 7],
], dtype=np.int64)


def box_grid(shape: tuple[int, int, int], cell: float = 0.01,
             origin: tuple[float, float, float] = (0.0, 0.0, 0.0),
             cell_mask=None, chamber_mask=None,
             fixed_box: tuple | None = None) -> TetMesh:
    """Tet grid over ``shape`` cells of size ``cell``.

    ``cell_mask(i, j, k)`` carves the solid; ``chamber_mask(i, j, k)`` tags
    kept cells as chamber. ``fixed_box`` anchors vertices inside an
    axis-aligned (lo, hi) box in rest coordinates.
    """
    nx, ny, nz = shape
    ii, jj, kk = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    cells = np.stack([ii.ravel(), jj.ravel(), kk.ravel()], axis=1)
    if cell_mask is not None:
        keep = np.array([bool(cell_mask(i, j, k)) for i, j, k in cells])
        cells = cells[keep]
    if cells.shape[0] == 0:
        raise ValueError("cell mask removed every cell")

    def vid(i, j, k):
        return (i * (ny + 1) + j) * (nz + 1) + k

    corner_offsets = np.array([[(b >> 2) & 1, (b >> 1) & 1, b & 1] for b in range(8)])
    tets = []
    region = []
    for i, j, k in cells:
        corner_ids = np.array([vid(i + dx, j + dy, k + dz) for dx, dy, dz in corner_offsets])
        tets.append(corner_ids[_CUBE_TETS])
        tag = CHAMBER if (chamber_mask is not None and chamber_mask(i, j, k)) else BODY
        region.extend([tag] * 6)
    tets = np.concatenate(tets)

    used = np.unique(tets)
    remap = np.full((nx + 1) * (ny + 1) * (nz + 1), -1, dtype=np.int64)
    remap[used] = np.arange(used.size)
    gi = used // ((ny + 1) * (nz + 1))
    gj = (used // (nz + 1)) % (ny + 1)
    gk = used % (nz + 1)
    pos = np.stack([gi, gj, gk], axis=1).astype(np.float64) * cell + np.asarray(origin)
    tets = remap[tets]
    fix_orientation(pos, tets)

    fixed = np.empty(0, np.int64)
    if fixed_box is not None:
        lo, hi = np.asarray(fixed_box[0], float), np.asarray(fixed_box[1], float)
        fixed = np.flatnonzero(np.all((pos >= lo) & (pos <= hi), axis=1))
    return TetMesh(rest=pos, pos=pos.copy(), tets=tets,
                   region=np.asarray(region, np.uint8), fixed=fixed)


def cube_with_core(n: int = 6, cell: float = 0.01, core: int = 2,
                   anchor_bottom: bool = True) -> TetMesh:
    """Solid cube with a centered cubic chamber core of ``core`` cells."""
    lo = (n - core) // 2
    hi = lo + core

    def chamber(i, j, k):
        return lo <= i < hi and lo <= j < hi and lo <= k < hi

    fixed_box = None
    if anchor_bottom:
        eps = 0.25 * cell
        fixed_box = ((-eps, -eps, -eps), (n * cell + eps, n * cell + eps, eps))
    return box_grid((n, n, n), cell=cell, chamber_mask=chamber, fixed_box=fixed_box)


def merge_meshes(a: TetMesh, b: TetMesh) -> TetMesh:
    """Concatenate two meshes into one (no vertex welding)."""
    off = a.n_vertices
    return TetMesh(rest=np.vstack([a.rest, b.rest]),
                   pos=np.vstack([a.pos, b.pos]),
                   tets=np.vstack([a.tets, b.tets + off]),
                   region=np.concatenate([a.region, b.region]),
                   fixed=np.concatenate([a.fixed, b.fixed + off]))


def select_vertices_in_box(positions: np.ndarray, lo, hi) -> np.ndarray:
    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)
    return np.flatnonzero(np.all((positions >= lo) & (positions <= hi), axis=1))


def random_tet_soup(n: int, seed: int = 0, extent: float = 1.0,
                    size: float | None = None) -> TetMesh:
    """Disconnected random tets in a box; for detection benchmarks only.

    Tet size defaults to half the mean spacing so overlap density stays
    constant as ``n`` grows.
    """
    rng = np.random.default_rng(seed)
    if size is None:
        size = 0.5 * extent / max(float(n), 1.0) ** (1.0 / 3.0)
    centers = rng.uniform(0.0, extent, size=(n, 3))
    corners = centers[:, None, :] + rng.uniform(-size, size, size=(n, 4, 3))
    pos = corners.reshape(-1, 3)
    tets = np.arange(4 * n, dtype=np.int64).reshape(n, 4)
    fix_orientation(pos, tets)
    return TetMesh(rest=pos, pos=pos.copy(), tets=tets,
                   region=np.zeros(n, np.uint8))


def icosphere(radius: float = 1.0, subdivisions: int = 2,
              center=(0.0, 0.0, 0.0)) -> SurfaceMesh:
    """Watertight sphere approximation by subdivided icosahedron."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=np.float64)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)

    for _ in range(subdivisions):
        verts_list = list(verts)
        midpoint: dict[tuple[int, int], int] = {}

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in midpoint:
                m = verts_list[i] + verts_list[j]
                m = m / np.linalg.norm(m)
                midpoint[key] = len(verts_list)
                verts_list.append(m)
            return midpoint[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        verts = np.asarray(verts_list)
        faces = np.asarray(new_faces, dtype=np.int64)

    return SurfaceMesh(positions=verts * radius + np.asarray(center, float),
                       triangles=faces)


def box_surface(lo, hi) -> SurfaceMesh:
    """Closed, outward-oriented 12-triangle box."""
    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)
    x0, y0, z0 = lo
    x1, y1, z1 = hi
    v = np.array([
        [x0, y0, z0], [x1, y0, z0], [x1, y1, z0], [x0, y1, z0],
        [x0, y0, z1], [x1, y0, z1], [x1, y1, z1], [x0, y1, z1],
    ])
    f = np.array([
        [0, 2, 1], [0, 3, 2],          # bottom (z0), normal -z
        [4, 5, 6], [4, 6, 7],          # top (z1), normal +z
        [0, 1, 5], [0, 5, 4],          # y0 side, normal -y
        [2, 3, 7], [2, 7, 6],          # y1 side, normal +y
        [1, 2, 6], [1, 6, 5],          # x1 side, normal +x
        [3, 0, 4], [3, 4, 7],          # x0 side, normal -x
    ], dtype=np.int64)
    return SurfaceMesh(positions=v, triangles=f)


def cylinder_surface(radius: float, height: float, segments: int = 24,
                     center=(0.0, 0.0, 0.0), axis: str = "z") -> SurfaceMesh:
    """Closed cylinder with fan caps, axis-aligned."""
    ang = np.linspace(0.0, 2.0 * np.pi, segments, endpoint=False)
    ring = np.stack([radius * np.cos(ang), radius * np.sin(ang)], axis=1)
    bot = np.column_stack([ring, np.full(segments, -height / 2.0)])
    top = np.column_stack([ring, np.full(segments, height / 2.0)])
    verts = np.vstack([bot, top,
                       [[0.0, 0.0, -height / 2.0]], [[0.0, 0.0, height / 2.0]]])
    cb, ct = 2 * segments, 2 * segments + 1
    tris = []
    for i in range(segments):
        j = (i + 1) % segments
        tris += [[i, j, segments + i], [j, segments + j, segments + i]]
        tris += [[cb, j, i], [ct, segments + i, segments + j]]
    verts = np.asarray(verts)
    if axis == "x":
        verts = verts[:, [2, 0, 1]]
    elif axis == "y":
        verts = verts[:, [1, 2, 0]]
    return SurfaceMesh(positions=verts + np.asarray(center, float),
                       triangles=np.asarray(tris, dtype=np.int64))
