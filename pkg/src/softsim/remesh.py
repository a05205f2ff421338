"""Distortion-triggered chamber re-tessellation.

Chamber elements that inflate or distort past the configured thresholds are
split. Triggered tets away from the chamber/body interface get a full
edge-midpoint 1->8 split; any other chamber tet touching a split edge, and
triggered tets with an edge shared by a body tet (those edges must never be
split), are subdivided by a centroid fan over their consistently
triangulated faces. Face triangulation rules key on global vertex ids, so
neighboring tets always agree and the result is conforming. Body elements
are never touched.

Freshly created chamber elements are born strain-free: their rest shape is
their birth (deformed) shape, and ``chamber_base`` records the cumulative
inflation already achieved so later actuation targets only the remainder.

An external tessellator can replace the whole chamber instead: it receives
the deformed chamber boundary surface and must return a tet mesh whose
boundary vertices coincide with it.
"""

from __future__ import annotations

import logging
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .errors import InterfaceMismatchError, RemeshError
from .mesh import (BODY, CHAMBER, SurfaceMesh, TetMesh, center_shapes,
                   extract_boundary, gather_shapes, shape_volumes, tet_volumes)

logger = logging.getLogger(__name__)

VOLUME_RATIO = "volume-ratio"
DISTORTION = "distortion"

_TET_EDGES = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))
_TET_FACE_CORNERS = ((1, 2, 3), (0, 3, 2), (0, 1, 3), (0, 2, 1))


@dataclass
class RemeshTrigger:
    tet_id: int
    reason: str
    value: float


def scan_triggers(mesh: TetMesh, reference_volumes: np.ndarray, config
                  ) -> list[RemeshTrigger]:
    """Chamber tets past the volume-ratio or distortion threshold.

    ``reference_volumes`` are per-tet volumes at the last remesh (the rest
    volumes, since rebirth resets the rest shape). Body tets never trigger.
    """
    chamber = np.flatnonzero(mesh.region == CHAMBER)
    if chamber.size == 0:
        return []
    ref = np.asarray(reference_volumes)[chamber]
    cur = tet_volumes(mesh.pos, mesh.tets[chamber])
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(ref != 0.0, cur / ref, np.inf)

    rest_c = center_shapes(mesh.rest_shapes[chamber])
    def_c = center_shapes(gather_shapes(mesh.pos, mesh.tets[chamber]))
    _, sigma, _ = kernels.fit_rotations(rest_c, def_c)
    smin = sigma[:, -1]
    with np.errstate(divide="ignore"):
        sigma_norm = np.maximum(sigma[:, 0], np.where(smin > 0.0, 1.0 / smin, np.inf))

    triggers = []
    for i, tet in enumerate(chamber):
        if ratio[i] > config.alpha_max:
            triggers.append(RemeshTrigger(int(tet), VOLUME_RATIO, float(ratio[i])))
        elif sigma_norm[i] > config.d_max:
            triggers.append(RemeshTrigger(int(tet), DISTORTION, float(sigma_norm[i])))
    return triggers


# ---------------------------------------------------------------------------
# built-in conforming subdivision


def _face_triangulation(face: tuple[int, int, int], midpoint: dict) -> list[tuple[int, int, int]]:
    """Triangulate one face against the global split-edge midpoints.

    Operates on the sorted vertex triple so both tets sharing the face
    produce the same triangle set; diagonal choices key on midpoint ids.
    """
    a, b, c = sorted(face)
    mab = midpoint.get((a, b))
    mac = midpoint.get((a, c))
    mbc = midpoint.get((b, c))
    n = sum(m is not None for m in (mab, mac, mbc))
    if n == 0:
        return [(a, b, c)]
    if n == 3:
        return [(a, mab, mac), (b, mab, mbc), (c, mac, mbc), (mab, mbc, mac)]
    if n == 1:
        if mab is not None:
            return [(mab, c, a), (mab, b, c)]
        if mac is not None:
            return [(mac, b, a), (mac, c, b)]
        return [(mbc, a, b), (mbc, c, a)]
    # two split edges: triangle at the doubly-split corner plus a quad
    if mab is None:
        corner, m1, m2, opp1, opp2 = c, mac, mbc, a, b
    elif mac is None:
        corner, m1, m2, opp1, opp2 = b, mab, mbc, a, c
    else:
        corner, m1, m2, opp1, opp2 = a, mab, mac, b, c
    tris = [(corner, m1, m2)]
    if m1 < m2:
        tris += [(opp1, m1, opp2), (m1, m2, opp2)]
    else:
        tris += [(opp1, m1, m2), (opp1, m2, opp2)]
    return tris


def _red_children(tet, midpoint, positions):
    v0, v1, v2, v3 = (int(v) for v in tet)

    def mid(i, j):
        return midpoint[(min(i, j), max(i, j))]

    m01, m02, m03 = mid(v0, v1), mid(v0, v2), mid(v0, v3)
    m12, m13, m23 = mid(v1, v2), mid(v1, v3), mid(v2, v3)
    children = [
        (v0, m01, m02, m03),
        (v1, m01, m12, m13),
        (v2, m02, m12, m23),
        (v3, m03, m13, m23),
    ]
    # split the inner octahedron along its shortest diagonal
    diagonals = [(m01, m23, (m02, m12, m13, m03)),
                 (m02, m13, (m01, m12, m23, m03)),
                 (m03, m12, (m01, m02, m23, m13))]
    lengths = [np.linalg.norm(positions[a] - positions[b]) for a, b, _ in diagonals]
    a, b, ring = diagonals[int(np.argmin(lengths))]
    for i in range(4):
        children.append((a, b, ring[i], ring[(i + 1) % 4]))
    return children


def builtin_subdivide(mesh: TetMesh, triggers: list[RemeshTrigger]):
    """Conforming split of triggered chamber tets.

    Returns ``(positions, tets, reborn, region, chamber_base, kept_mask)``:
    positions extend the input vertex array, body rows are untouched, and
    ``reborn`` marks tet rows created by the subdivision.
    """
    if not triggers:
        return (mesh.pos.copy(), mesh.tets.copy(), np.zeros(mesh.n_tets, bool),
                mesh.region.copy(), mesh.chamber_base.copy(),
                np.ones(mesh.n_tets, bool))
    triggered = np.zeros(mesh.n_tets, bool)
    for t in triggers:
        if mesh.region[t.tet_id] != CHAMBER:
            raise RemeshError(f"trigger on non-chamber tet {t.tet_id}")
        triggered[t.tet_id] = True

    locked: set[tuple[int, int]] = set()
    for tet in mesh.tets[mesh.region == BODY]:
        for i, j in _TET_EDGES:
            a, b = int(tet[i]), int(tet[j])
            locked.add((min(a, b), max(a, b)))

    red = []
    fan = set()
    for t in np.flatnonzero(triggered):
        tet = mesh.tets[t]
        edges = [(min(int(tet[i]), int(tet[j])), max(int(tet[i]), int(tet[j])))
                 for i, j in _TET_EDGES]
        if any(e in locked for e in edges):
            fan.add(int(t))  # face-preserving split keeps the interface intact
        else:
            red.append(int(t))

    positions = [mesh.pos]
    extra: list[np.ndarray] = []
    next_id = mesh.n_vertices
    midpoint: dict[tuple[int, int], int] = {}

    def add_vertex(p) -> int:
        nonlocal next_id
        extra.append(np.asarray(p, float))
        next_id += 1
        return next_id - 1

    for t in red:
        tet = mesh.tets[t]
        for i, j in _TET_EDGES:
            key = (min(int(tet[i]), int(tet[j])), max(int(tet[i]), int(tet[j])))
            if key not in midpoint:
                midpoint[key] = add_vertex(0.5 * (mesh.pos[key[0]] + mesh.pos[key[1]]))

    # chamber neighbors touching any split edge need a transitional split
    chamber_ids = np.flatnonzero(mesh.region == CHAMBER)
    for t in chamber_ids:
        if triggered[t]:
            continue
        tet = mesh.tets[t]
        for i, j in _TET_EDGES:
            key = (min(int(tet[i]), int(tet[j])), max(int(tet[i]), int(tet[j])))
            if key in midpoint:
                fan.add(int(t))
                break

    all_pos = np.vstack([mesh.pos] + [np.asarray(extra)]) if extra else mesh.pos.copy()

    new_rows: list[tuple[int, int, int, int]] = []
    replaced = np.zeros(mesh.n_tets, bool)
    for t in red:
        replaced[t] = True
        new_rows.extend(_red_children(mesh.tets[t], midpoint, all_pos))

    centroid_rows: list[np.ndarray] = []
    for t in sorted(fan):
        replaced[t] = True
        tet = mesh.tets[t]
        apex = next_id + len(centroid_rows)
        centroid_rows.append(all_pos[tet].mean(axis=0))
        for ci in _TET_FACE_CORNERS:
            face = (int(tet[ci[0]]), int(tet[ci[1]]), int(tet[ci[2]]))
            for tri in _face_triangulation(face, midpoint):
                new_rows.append((tri[0], tri[1], tri[2], apex))
    if centroid_rows:
        all_pos = np.vstack([all_pos, np.asarray(centroid_rows)])

    keep = ~replaced
    tets = np.vstack([mesh.tets[keep], np.asarray(new_rows, dtype=np.int64)])
    reborn = np.zeros(tets.shape[0], bool)
    reborn[int(keep.sum()):] = True

    # orient children positively in the current (deformed) configuration
    vols = tet_volumes(all_pos, tets)
    flip = (vols < 0.0) & reborn
    tets[flip] = tets[flip][:, [0, 2, 1, 3]]
    if np.any(tet_volumes(all_pos, tets)[reborn] <= 0.0):
        raise RemeshError("subdivision produced a degenerate child element")

    region = np.concatenate([mesh.region[keep],
                             np.full(len(new_rows), CHAMBER, np.uint8)])
    base = np.concatenate([mesh.chamber_base[keep], np.ones(len(new_rows))])
    return all_pos, tets, reborn, region, base, keep


def apply_builtin_subdivision(mesh: TetMesh, triggers: list[RemeshTrigger],
                              achieved_ratio: float) -> TetMesh:
    """Subdivide in place of the triggered tets and rebase the children."""
    if not triggers:
        return mesh
    all_pos, tets, reborn, region, base, keep = builtin_subdivide(mesh, triggers)
    n_old = mesh.n_vertices
    rest = np.vstack([mesh.rest, all_pos[n_old:]])
    rest_shapes = np.concatenate([mesh.rest_shapes[keep],
                                  gather_shapes(all_pos, tets[reborn])])
    base[reborn] = achieved_ratio
    out = TetMesh(rest=rest, pos=all_pos, tets=tets, region=region,
                  fixed=mesh.fixed, rest_shapes=rest_shapes, chamber_base=base)
    return out


# ---------------------------------------------------------------------------
# external tessellator protocol


def remesh_chamber(mesh: TetMesh, tessellator, achieved_ratio: float = 1.0,
                   match_tol_rel: float = 1e-9) -> TetMesh:
    """Replace the whole chamber with a tessellation of its deformed boundary.

    ``tessellator(surface: SurfaceMesh) -> TetMesh``; the returned mesh's
    boundary vertices must coincide with the input surface vertices (exact
    match first, then a relative tolerance). Interior vertices get fresh ids;
    old chamber-interior vertices are left in place unreferenced so body
    connectivity is untouched.
    """
    surface = extract_boundary(mesh, CHAMBER, "deformed")
    if surface.n_triangles == 0:
        raise RemeshError("mesh has no chamber region to remesh")
    new_chamber = tessellator(surface)
    if new_chamber.n_tets == 0:
        raise RemeshError("tessellator returned no tets")

    tol = match_tol_rel * mesh.bbox_diag("deformed")
    boundary = extract_boundary(new_chamber, None, "deformed")
    boundary_set = set(int(v) for v in boundary.source_vertices)

    # map every new-chamber vertex: boundary -> existing interface id,
    # interior -> fresh id
    order = np.lexsort((surface.positions[:, 2], surface.positions[:, 1],
                        surface.positions[:, 0]))
    sorted_pos = surface.positions[order]
    mapping = np.full(new_chamber.n_vertices, -1, np.int64)
    next_id = mesh.n_vertices
    new_positions = []
    for v in range(new_chamber.n_vertices):
        p = new_chamber.pos[v]
        lo = np.searchsorted(sorted_pos[:, 0], p[0] - tol, side="left")
        hi = np.searchsorted(sorted_pos[:, 0], p[0] + tol, side="right")
        match = -1
        best = tol if tol > 0 else 0.0
        for i in range(lo, hi):
            d = np.linalg.norm(sorted_pos[i] - p)
            if d <= best:
                match = int(order[i])
                best = d
                if d == 0.0:
                    break
        if v in boundary_set:
            if match < 0:
                raise InterfaceMismatchError(
                    f"tessellator boundary vertex {v} at {p} matches no interface vertex")
            mapping[v] = surface.source_vertices[match]
        elif match >= 0:
            mapping[v] = surface.source_vertices[match]
        else:
            mapping[v] = next_id
            next_id += 1
            new_positions.append(p)

    used_interface = set(int(m) for m in mapping[list(boundary_set)])
    expected = set(int(v) for v in surface.source_vertices)
    if not expected <= used_interface:
        missing = len(expected - used_interface)
        raise InterfaceMismatchError(
            f"tessellator dropped {missing} interface vertices; body faces would hang")

    body_keep = mesh.region == BODY
    chamber_tets = mapping[new_chamber.tets]
    pos = np.vstack([mesh.pos] + ([np.asarray(new_positions)] if new_positions else []))
    rest = np.vstack([mesh.rest] + ([np.asarray(new_positions)] if new_positions else []))
    tets = np.vstack([mesh.tets[body_keep], chamber_tets])
    region = np.concatenate([mesh.region[body_keep],
                             np.full(chamber_tets.shape[0], CHAMBER, np.uint8)])
    vols = tet_volumes(pos, tets)
    flip = vols < 0.0
    flip[:int(body_keep.sum())] = False
    tets[flip] = tets[flip][:, [0, 2, 1, 3]]
    rest_shapes = np.concatenate([mesh.rest_shapes[body_keep],
                                  gather_shapes(pos, tets[int(body_keep.sum()):])])
    base = np.concatenate([mesh.chamber_base[body_keep],
                           np.full(chamber_tets.shape[0], achieved_ratio)])
    out = TetMesh(rest=rest, pos=pos, tets=tets, region=region, fixed=mesh.fixed,
                  rest_shapes=rest_shapes, chamber_base=base)
    if np.any(shape_volumes(out.rest_shapes) <= 0.0):
        raise RemeshError("tessellator produced degenerate elements")
    return out


def apply_remesh(mesh: TetMesh, triggers: list[RemeshTrigger],
                 achieved_ratio: float, tessellator=None) -> TetMesh:
    """Dispatch to the built-in subdivision or an external tessellator."""
    logger.info("remeshing: %d triggers, achieved chamber ratio %.3g",
                len(triggers), achieved_ratio)
    if tessellator is None:
        return apply_builtin_subdivision(mesh, triggers, achieved_ratio)
    return remesh_chamber(mesh, tessellator, achieved_ratio)


def chamber_submesh(mesh: TetMesh) -> TetMesh:
    """The chamber region as a standalone mesh (e.g. a pass-through tessellation)."""
    sel = mesh.region == CHAMBER
    used = np.unique(mesh.tets[sel])
    remap = np.full(mesh.n_vertices, -1, np.int64)
    remap[used] = np.arange(used.size)
    return TetMesh(rest=mesh.rest[used].copy(), pos=mesh.pos[used].copy(),
                   tets=remap[mesh.tets[sel]],
                   region=np.full(int(sel.sum()), CHAMBER, np.uint8))


def subprocess_tessellator(command: list[str] | str):
    """Wrap an external program as a tessellator callable.

    The program is invoked as ``command surface.obj out_base`` and must write
    ``out_base.node`` / ``out_base.ele``. File formats are the package's
    standard OBJ and TetGen formats.
    """
    from .io import load_tet_mesh, save_obj

    base_cmd = command.split() if isinstance(command, str) else list(command)

    def run(surface: SurfaceMesh) -> TetMesh:
        with tempfile.TemporaryDirectory(prefix="softsim-remesh-") as tmp:
            obj_path = Path(tmp) / "chamber.obj"
            out_base = Path(tmp) / "chamber_out"
            save_obj(obj_path, surface)
            proc = subprocess.run(base_cmd + [str(obj_path), str(out_base)],
                                  capture_output=True, text=True)
            if proc.returncode != 0:
                raise RemeshError(
                    f"tessellator exited with {proc.returncode}: {proc.stderr.strip()}")
            return load_tet_mesh(out_base, default_region=CHAMBER)

    return run
