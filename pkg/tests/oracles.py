"""Independent brute-force reference implementations used as test oracles.

Everything here is deliberately written against plain numpy (np.linalg
solves, exhaustive scans) and shares no code with the package's accelerated
paths.
"""

from __future__ import annotations

import numpy as np


def barycentric(tet_pts: np.ndarray, p: np.ndarray) -> np.ndarray | None:
    """All four barycentric coordinates of p, or None for a degenerate tet."""
    t = (tet_pts[1:] - tet_pts[0]).T
    try:
        lam = np.linalg.solve(t, p - tet_pts[0])
    except np.linalg.LinAlgError:
        return None
    return np.array([1.0 - lam.sum(), lam[0], lam[1], lam[2]])


def strictly_inside_tet(tet_pts: np.ndarray, p: np.ndarray) -> bool:
    lam = barycentric(tet_pts, p)
    return lam is not None and bool(np.all(lam > 0.0))


def brute_self_collisions(positions, tets, surface_vertices, excluded_pairs):
    """Exhaustive vertex-against-every-tet scan; ``excluded_pairs`` is a set
    of (vertex, tet) tuples. Vectorized over all pairs via per-tet inverse
    matrices (a different formulation than the package's Cramer kernels)."""
    nt = tets.shape[0]
    basis = np.stack([(positions[tets[:, k]] - positions[tets[:, 0]])
                      for k in (1, 2, 3)], axis=2)  # (nt, 3, 3) columns
    dets = np.linalg.det(basis)
    ok = np.abs(dets) > 0.0
    safe = np.where(ok[:, None, None], basis, np.eye(3))
    inv = np.linalg.inv(safe)
    hits = []
    for v in surface_vertices:
        rel = positions[v] - positions[tets[:, 0]]
        lam = np.einsum("tij,tj->ti", inv, rel)
        inside = (ok & (lam > 0.0).all(axis=1) & (lam.sum(axis=1) < 1.0))
        for t in np.flatnonzero(inside):
            if (int(v), int(t)) not in excluded_pairs:
                hits.append(int(v))
                break
    return np.unique(np.asarray(hits, dtype=np.int64))


def ring_exclusion(tets, n_vertices, vertex, rings):
    """Tets incident to any vertex within ``rings - 1`` tet-sharing hops."""
    if rings <= 0:
        return set()
    incident = [[] for _ in range(n_vertices)]
    for t, row in enumerate(tets):
        for v in row:
            incident[int(v)].append(t)
    frontier = {int(vertex)}
    for _ in range(rings - 1):
        grown = set(frontier)
        for v in frontier:
            for t in incident[v]:
                grown.update(int(u) for u in tets[t])
        frontier = grown
    out = set()
    for v in frontier:
        out.update(incident[v])
    return out


def ray_triangle(orig, direction, a, b, c):
    """Moller-Trumbore hit parameter, or None."""
    e1, e2 = b - a, c - a
    h = np.cross(direction, e2)
    det = float(e1 @ h)
    if abs(det) < 1e-14:
        return None
    s = orig - a
    u = float(s @ h) / det
    if u < 0.0 or u > 1.0:
        return None
    q = np.cross(s, e1)
    v = float(direction @ q) / det
    if v < 0.0 or u + v > 1.0:
        return None
    t = float(e2 @ q) / det
    return t if t >= 0.0 else None


def brute_first_hit(orig, direction, positions, triangles, excluded=()):
    """(t, triangle index) of the nearest hit, ties to the lower index."""
    best_t, best_i = np.inf, -1
    for i, tri in enumerate(triangles):
        if i in excluded:
            continue
        t = ray_triangle(orig, direction, positions[tri[0]], positions[tri[1]],
                         positions[tri[2]])
        if t is not None and (t < best_t or (t == best_t and i < best_i)):
            best_t, best_i = t, i
    return best_t, best_i


def closest_point_on_triangle(p, a, b, c):
    """Exhaustive closest point: best of face projection, edges, corners."""
    candidates = [a, b, c]
    for u, v in ((a, b), (b, c), (c, a)):
        d = v - u
        denom = float(d @ d)
        if denom > 0.0:
            t = np.clip(float((p - u) @ d) / denom, 0.0, 1.0)
            candidates.append(u + t * d)
    n = np.cross(b - a, c - a)
    nn = float(n @ n)
    if nn > 0.0:
        q = p - n * float((p - a) @ n) / nn
        lam = barycentric_2d(q, a, b, c, n)
        if lam is not None and np.all(lam >= 0.0):
            candidates.append(q)
    d2 = [float((p - q) @ (p - q)) for q in candidates]
    return candidates[int(np.argmin(d2))]


def barycentric_2d(q, a, b, c, n):
    nn = float(n @ n)
    if nn == 0.0:
        return None
    l0 = float(np.cross(b - q, c - q) @ n) / nn
    l1 = float(np.cross(c - q, a - q) @ n) / nn
    l2 = float(np.cross(a - q, b - q) @ n) / nn
    return np.array([l0, l1, l2])


def brute_closest(p, positions, triangles, excluded=()):
    """(point, triangle index, distance); equal distances pick the lower index."""
    best = (None, -1, np.inf)
    for i, tri in enumerate(triangles):
        if i in excluded:
            continue
        q = closest_point_on_triangle(p, positions[tri[0]], positions[tri[1]],
                                      positions[tri[2]])
        d = float(np.linalg.norm(p - q))
        if d < best[2] or (d == best[2] and i < best[1]):
            best = (q, i, d)
    return best


def ray_parity_inside(points, positions, triangles, seed=0):
    """Ray-crossing parity per point, retrying on near-degenerate hits."""
    rng = np.random.default_rng(seed)
    out = np.zeros(len(points), dtype=bool)
    for k, p in enumerate(points):
        for attempt in range(16):
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            crossings = 0
            degenerate = False
            for tri in triangles:
                a, b, c = positions[tri[0]], positions[tri[1]], positions[tri[2]]
                e1, e2 = b - a, c - a
                h = np.cross(d, e2)
                det = float(e1 @ h)
                if abs(det) < 1e-12:
                    continue
                s = p - a
                u = float(s @ h) / det
                q = np.cross(s, e1)
                v = float(d @ q) / det
                t = float(e2 @ q) / det
                if -1e-10 < u < 1e-10 or -1e-10 < v < 1e-10 or abs(u + v - 1.0) < 1e-10:
                    if 0.0 <= u <= 1.0 and 0.0 <= v <= 1.0 and u + v <= 1.0 and t > 0.0:
                        degenerate = True
                        break
                if 0.0 < u < 1.0 and 0.0 < v < 1.0 and u + v < 1.0 and t > 0.0:
                    crossings += 1
            if not degenerate:
                out[k] = crossings % 2 == 1
                break
        else:
            raise RuntimeError("could not find a non-degenerate ray direction")
    return out


def winding_exact(points, positions, triangles):
    """Direct solid-angle summation over every triangle."""
    w = np.zeros(len(points))
    for k, p in enumerate(points):
        a = positions[triangles[:, 0]] - p
        b = positions[triangles[:, 1]] - p
        c = positions[triangles[:, 2]] - p
        la = np.linalg.norm(a, axis=1)
        lb = np.linalg.norm(b, axis=1)
        lc = np.linalg.norm(c, axis=1)
        num = np.einsum("ij,ij->i", a, np.cross(b, c))
        den = (la * lb * lc + np.einsum("ij,ij->i", a, b) * lc
               + np.einsum("ij,ij->i", b, c) * la
               + np.einsum("ij,ij->i", c, a) * lb)
        w[k] = np.sum(2.0 * np.arctan2(num, den)) / (4.0 * np.pi)
    return w


def boundary_face_count(tets, mask=None):
    """Hash every face; boundary faces are the singletons."""
    faces = {}
    rows = np.flatnonzero(mask) if mask is not None else range(tets.shape[0])
    for t in rows:
        a, b, c, d = (int(x) for x in tets[t])
        for tri in ((b, c, d), (a, d, c), (a, b, d), (a, c, b)):
            key = tuple(sorted(tri))
            faces[key] = faces.get(key, 0) + 1
    return sum(1 for v in faces.values() if v == 1)


def face_conformity_ok(tets):
    """Every face shared by at most two tets and no duplicated tets."""
    seen = set()
    faces = {}
    for row in tets:
        key = tuple(sorted(int(x) for x in row))
        if key in seen:
            return False
        seen.add(key)
        a, b, c, d = key
        for tri in ((a, b, c), (a, b, d), (a, c, d), (b, c, d)):
            faces[tri] = faces.get(tri, 0) + 1
    return all(v <= 2 for v in faces.values())


def dense_blend_solution(positions, tets, weights, rotated_targets, fixed,
                         spring_vertices=(), spring_targets=None, spring_k=None):
    """Dense normal-equations solve of the blend energy, one coordinate at a
    time, with anchored vertices eliminated by substitution."""
    nv = positions.shape[0]
    cm = np.eye(4) - 0.25
    a = np.zeros((nv, nv))
    rhs = np.zeros((nv, 3))
    for e, row in enumerate(tets):
        idx = [int(v) for v in row]
        a[np.ix_(idx, idx)] += weights[e] * cm
        rhs[idx] += weights[e] * rotated_targets[e].T
    for j, v in enumerate(spring_vertices):
        a[v, v] += spring_k[j]
        rhs[v] += spring_k[j] * spring_targets[j]
    fixed = np.asarray(fixed, dtype=np.int64)
    referenced = np.zeros(nv, dtype=bool)
    referenced[np.unique(tets)] = True
    fixed_mask = np.zeros(nv, dtype=bool)
    fixed_mask[fixed] = True
    free = np.flatnonzero(referenced & ~fixed_mask)
    out = positions.copy()
    b = rhs[free] - a[np.ix_(free, fixed)] @ positions[fixed]
    out[free] = np.linalg.solve(a[np.ix_(free, free)], b)
    return out


def blend_energy(positions, tets, weights, rotated_targets,
                 spring_vertices=(), spring_targets=None, spring_k=None):
    """Direct evaluation of the blend energy."""
    total = 0.0
    for e, row in enumerate(tets):
        shape = positions[row].T
        centered = shape - shape.mean(axis=1, keepdims=True)
        d = centered - rotated_targets[e]
        total += weights[e] * float(np.sum(d * d))
    for j, v in enumerate(spring_vertices):
        d = positions[v] - spring_targets[j]
        total += spring_k[j] * float(d @ d)
    return total


def random_rotation(rng) -> np.ndarray:
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    if np.linalg.det(q) < 0.0:
        q[:, 0] = -q[:, 0]
    return q
