"""Hot numerical kernels with two interchangeable backends.

Tree traversal, point-in-element tests, and per-element rotation fitting
dominate runtime, so each of these kernels exists twice: a numba @njit loop
and a vectorized pure-numpy twin. Setting ``SOFTSIM_NUMBA=0`` (or running
without numba installed) selects the numpy path; ``BACKEND`` reports which
one is active. ``benchmarks/backend_bench.py`` times the pairs side by side.

Conventions: positions are float64 ``(n, 3)`` arrays, tets ``(m, 4)`` int64,
triangles ``(m, 3)`` int64. Exclusion sets are passed as sorted int64 keys
``vertex_id * n_primitives + primitive_id`` so both backends can use binary
search. Query kernels return a node-visit count (one per point/box test)
used by the BVH benchmarks.
"""

from __future__ import annotations

import os

import numpy as np

_flag = os.environ.get("SOFTSIM_NUMBA", "1").strip().lower()
_requested = _flag not in {"0", "false", "off", "no"}

NUMBA_AVAILABLE = False
if _requested:
    try:
        from numba import njit as _njit

        NUMBA_AVAILABLE = True
    except ImportError:  # pragma: no cover - numba is a hard dep, but stay usable
        NUMBA_AVAILABLE = False

BACKEND = "numba" if NUMBA_AVAILABLE else "numpy"

_STACK = 128  # tree height is ~log2(n)+1 for median splits; 128 is generous


def _jit(func):
    if NUMBA_AVAILABLE:
        return _njit(cache=True)(func)
    return func


# ---------------------------------------------------------------------------
# bottom-up box refit


def _refit_loop(bmin, bmax, left, right, prim, pmin, pmax, pad):
    # nodes are stored parents-first, so a reverse sweep sees children first
    for i in range(left.shape[0] - 1, -1, -1):
        p = prim[i]
        if p >= 0:
            for a in range(3):
                bmin[i, a] = pmin[p, a] - pad
                bmax[i, a] = pmax[p, a] + pad
        else:
            l = left[i]
            r = right[i]
            for a in range(3):
                bmin[i, a] = min(bmin[l, a], bmin[r, a])
                bmax[i, a] = max(bmax[l, a], bmax[r, a])


_refit_numba = _jit(_refit_loop)


def _refit_numpy(bmin, bmax, left, right, prim, pmin, pmax, pad, level_nodes, level_ptr):
    n_levels = level_ptr.shape[0] - 1
    for lvl in range(n_levels - 1, -1, -1):
        nodes = level_nodes[level_ptr[lvl]:level_ptr[lvl + 1]]
        pr = prim[nodes]
        leaf = pr >= 0
        ln = nodes[leaf]
        if ln.size:
            bmin[ln] = pmin[pr[leaf]] - pad
            bmax[ln] = pmax[pr[leaf]] + pad
        inn = nodes[~leaf]
        if inn.size:
            bmin[inn] = np.minimum(bmin[left[inn]], bmin[right[inn]])
            bmax[inn] = np.maximum(bmax[left[inn]], bmax[right[inn]])


def refit_boxes(bmin, bmax, left, right, prim, pmin, pmax, pad, level_nodes, level_ptr):
    """Recompute all node boxes in place; tree topology is untouched."""
    if NUMBA_AVAILABLE:
        _refit_numba(bmin, bmax, left, right, prim, pmin, pmax, pad)
    else:
        _refit_numpy(bmin, bmax, left, right, prim, pmin, pmax, pad, level_nodes, level_ptr)


# ---------------------------------------------------------------------------
# point-in-tetrahedron queries


def _key_found(keys, key):
    lo = 0
    hi = keys.shape[0]
    while lo < hi:
        mid = (lo + hi) // 2
        if keys[mid] < key:
            lo = mid + 1
        else:
            hi = mid
    return lo < keys.shape[0] and keys[lo] == key


_key_found_numba = _jit(_key_found)


def _point_in_tet(pos, tets, t, px, py, pz):
    i0 = tets[t, 0]
    ax = pos[tets[t, 1], 0] - pos[i0, 0]
    ay = pos[tets[t, 1], 1] - pos[i0, 1]
    az = pos[tets[t, 1], 2] - pos[i0, 2]
    bx = pos[tets[t, 2], 0] - pos[i0, 0]
    by = pos[tets[t, 2], 1] - pos[i0, 1]
    bz = pos[tets[t, 2], 2] - pos[i0, 2]
    cx = pos[tets[t, 3], 0] - pos[i0, 0]
    cy = pos[tets[t, 3], 1] - pos[i0, 1]
    cz = pos[tets[t, 3], 2] - pos[i0, 2]
    det = ax * (by * cz - bz * cy) - bx * (ay * cz - az * cy) + cx * (ay * bz - az * by)
    if det == 0.0:
        return False
    dx = px - pos[i0, 0]
    dy = py - pos[i0, 1]
    dz = pz - pos[i0, 2]
    l1 = (dx * (by * cz - bz * cy) - bx * (dy * cz - dz * cy) + cx * (dy * bz - dz * by)) / det
    l2 = (ax * (dy * cz - dz * cy) - dx * (ay * cz - az * cy) + cx * (ay * dz - az * dy)) / det
    l3 = (ax * (by * dz - bz * dy) - bx * (ay * dz - az * dy) + dx * (ay * bz - az * by)) / det
    return l1 > 0.0 and l2 > 0.0 and l3 > 0.0 and (l1 + l2 + l3) < 1.0


_point_in_tet_numba = _jit(_point_in_tet)


def _point_tet_query_loop(points, qverts, bmin, bmax, left, right, prim,
                          pos, tets, excl_keys, n_prims, out_vert, out_tet):
    stack = np.empty(_STACK, np.int32)
    cap = out_vert.shape[0]
    nout = 0
    visits = 0
    for qi in range(points.shape[0]):
        px = points[qi, 0]
        py = points[qi, 1]
        pz = points[qi, 2]
        v = qverts[qi]
        top = 0
        stack[0] = 0
        while top >= 0:
            node = stack[top]
            top -= 1
            visits += 1
            if (px < bmin[node, 0] or px > bmax[node, 0]
                    or py < bmin[node, 1] or py > bmax[node, 1]
                    or pz < bmin[node, 2] or pz > bmax[node, 2]):
                continue
            p = prim[node]
            if p >= 0:
                if _key_found_numba(excl_keys, v * n_prims + p):
                    continue
                if _point_in_tet_numba(pos, tets, p, px, py, pz):
                    if nout < cap:
                        out_vert[nout] = v
                        out_tet[nout] = p
                    nout += 1
            else:
                top += 1
                stack[top] = left[node]
                top += 1
                stack[top] = right[node]
    return nout, visits


_point_tet_query_numba = _jit(_point_tet_query_loop)


def _barycentric_inside_numpy(points, pos, tets):
    v0 = pos[tets[:, 0]]
    a = pos[tets[:, 1]] - v0
    b = pos[tets[:, 2]] - v0
    c = pos[tets[:, 3]] - v0
    d = points - v0
    bxc = np.cross(b, c)
    axc = np.cross(a, c)  # note: det terms below keep Cramer's signs explicit
    axb = np.cross(a, b)
    det = np.einsum("ij,ij->i", a, bxc)
    l1 = np.einsum("ij,ij->i", d, bxc)
    l2 = -np.einsum("ij,ij->i", d, axc)
    l3 = np.einsum("ij,ij->i", d, axb)
    with np.errstate(divide="ignore", invalid="ignore"):
        l1 = l1 / det
        l2 = l2 / det
        l3 = l3 / det
    ok = det != 0.0
    return ok & (l1 > 0.0) & (l2 > 0.0) & (l3 > 0.0) & ((l1 + l2 + l3) < 1.0)


def _point_tet_query_numpy(points, qverts, bmin, bmax, left, right, prim,
                           pos, tets, excl_keys, n_prims):
    q = np.arange(points.shape[0], dtype=np.int64)
    node = np.zeros(points.shape[0], dtype=np.int64)
    hits_v = []
    hits_t = []
    visits = 0
    while q.size:
        visits += q.size
        pts = points[q]
        inside = np.all((pts >= bmin[node]) & (pts <= bmax[node]), axis=1)
        q = q[inside]
        node = node[inside]
        if not q.size:
            break
        pr = prim[node]
        leaf = pr >= 0
        lq = q[leaf]
        lt = pr[leaf].astype(np.int64)
        if lq.size:
            if excl_keys.shape[0] > 0:
                keys = qverts[lq] * n_prims + lt
                at = np.minimum(np.searchsorted(excl_keys, keys), excl_keys.shape[0] - 1)
                excluded = excl_keys[at] == keys
                lq = lq[~excluded]
                lt = lt[~excluded]
            if lq.size:
                inb = _barycentric_inside_numpy(points[lq], pos, tets[lt])
                hits_v.append(qverts[lq[inb]])
                hits_t.append(lt[inb])
        iq = q[~leaf]
        inode = node[~leaf]
        q = np.concatenate([iq, iq])
        node = np.concatenate([left[inode].astype(np.int64), right[inode].astype(np.int64)])
    if hits_v:
        return np.concatenate(hits_v), np.concatenate(hits_t), visits
    return (np.empty(0, np.int64), np.empty(0, np.int64), visits)


def point_tet_query(points, qverts, bmin, bmax, left, right, prim,
                    pos, tets, excl_keys):
    """Vertices strictly inside non-excluded tets.

    Returns ``(vertex_ids, tet_ids, node_visits)``; one row per containment.
    """
    n_prims = tets.shape[0]
    if not NUMBA_AVAILABLE:
        return _point_tet_query_numpy(points, qverts, bmin, bmax, left, right,
                                      prim, pos, tets, excl_keys, n_prims)
    cap = 4 * points.shape[0] + 64
    while True:
        out_v = np.empty(cap, np.int64)
        out_t = np.empty(cap, np.int64)
        nout, visits = _point_tet_query_numba(points, qverts, bmin, bmax, left, right,
                                              prim, pos, tets, excl_keys, n_prims,
                                              out_v, out_t)
        if nout <= cap:
            return out_v[:nout], out_t[:nout], visits
        cap = nout


# ---------------------------------------------------------------------------
# ray / first-hit against a triangle soup


def _ray_tri(pos, tris, t, ox, oy, oz, dx, dy, dz):
    """Moller-Trumbore; returns hit parameter or inf (no backface culling)."""
    i0 = tris[t, 0]
    i1 = tris[t, 1]
    i2 = tris[t, 2]
    e1x = pos[i1, 0] - pos[i0, 0]
    e1y = pos[i1, 1] - pos[i0, 1]
    e1z = pos[i1, 2] - pos[i0, 2]
    e2x = pos[i2, 0] - pos[i0, 0]
    e2y = pos[i2, 1] - pos[i0, 1]
    e2z = pos[i2, 2] - pos[i0, 2]
    hx = dy * e2z - dz * e2y
    hy = dz * e2x - dx * e2z
    hz = dx * e2y - dy * e2x
    det = e1x * hx + e1y * hy + e1z * hz
    if det > -1e-14 and det < 1e-14:
        return np.inf
    inv = 1.0 / det
    sx = ox - pos[i0, 0]
    sy = oy - pos[i0, 1]
    sz = oz - pos[i0, 2]
    u = (sx * hx + sy * hy + sz * hz) * inv
    if u < 0.0 or u > 1.0:
        return np.inf
    qx = sy * e1z - sz * e1y
    qy = sz * e1x - sx * e1z
    qz = sx * e1y - sy * e1x
    v = (dx * qx + dy * qy + dz * qz) * inv
    if v < 0.0 or u + v > 1.0:
        return np.inf
    t_hit = (e2x * qx + e2y * qy + e2z * qz) * inv
    if t_hit < 0.0:
        return np.inf
    return t_hit


_ray_tri_numba = _jit(_ray_tri)


def _ray_box(bmin, bmax, node, ox, oy, oz, dx, dy, dz):
    """Slab test; returns entry parameter or inf when the ray misses."""
    tmin = 0.0
    tmax = np.inf
    for a in range(3):
        if a == 0:
            o = ox
            d = dx
        elif a == 1:
            o = oy
            d = dy
        else:
            o = oz
            d = dz
        lo = bmin[node, a]
        hi = bmax[node, a]
        if d == 0.0:
            if o < lo or o > hi:
                return np.inf
        else:
            t1 = (lo - o) / d
            t2 = (hi - o) / d
            if t1 > t2:
                t1, t2 = t2, t1
            if t1 > tmin:
                tmin = t1
            if t2 < tmax:
                tmax = t2
            if tmin > tmax:
                return np.inf
    return tmin


_ray_box_numba = _jit(_ray_box)


def _ray_query_loop(origins, dirs, qverts, bmin, bmax, left, right, prim,
                    pos, tris, tri_src, excl_keys, n_excl_base,
                    out_t, out_tri):
    stack = np.empty(_STACK, np.int32)
    visits = 0
    for qi in range(origins.shape[0]):
        ox = origins[qi, 0]
        oy = origins[qi, 1]
        oz = origins[qi, 2]
        dx = dirs[qi, 0]
        dy = dirs[qi, 1]
        dz = dirs[qi, 2]
        v = qverts[qi]
        best = np.inf
        best_tri = -1
        top = 0
        stack[0] = 0
        while top >= 0:
            node = stack[top]
            top -= 1
            visits += 1
            entry = _ray_box_numba(bmin, bmax, node, ox, oy, oz, dx, dy, dz)
            if entry == np.inf or entry > best:
                continue
            p = prim[node]
            if p >= 0:
                if _key_found_numba(excl_keys, v * n_excl_base + tri_src[p]):
                    continue
                t_hit = _ray_tri_numba(pos, tris, p, ox, oy, oz, dx, dy, dz)
                if t_hit < best or (t_hit == best and p < best_tri):
                    best = t_hit
                    best_tri = p
            else:
                top += 1
                stack[top] = left[node]
                top += 1
                stack[top] = right[node]
        out_t[qi] = best
        out_tri[qi] = best_tri
    return visits


_ray_query_numba = _jit(_ray_query_loop)


def _ray_tri_numpy(orig, dirs, pos, tris):
    v0 = pos[tris[:, 0]]
    e1 = pos[tris[:, 1]] - v0
    e2 = pos[tris[:, 2]] - v0
    h = np.cross(dirs, e2)
    det = np.einsum("ij,ij->i", e1, h)
    s = orig - v0
    q = np.cross(s, e1)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / det
        u = np.einsum("ij,ij->i", s, h) * inv
        v = np.einsum("ij,ij->i", dirs, q) * inv
        t = np.einsum("ij,ij->i", e2, q) * inv
    ok = (np.abs(det) >= 1e-14) & (u >= 0.0) & (u <= 1.0) & (v >= 0.0) & (u + v <= 1.0) & (t >= 0.0)
    t = np.where(ok, t, np.inf)
    return t


def _ray_query_numpy(origins, dirs, qverts, bmin, bmax, left, right, prim,
                     pos, tris, tri_src, excl_keys, n_excl_base):
    nq = origins.shape[0]
    best = np.full(nq, np.inf)
    best_tri = np.full(nq, -1, np.int64)
    q = np.arange(nq, dtype=np.int64)
    node = np.zeros(nq, dtype=np.int64)
    visits = 0
    while q.size:
        visits += q.size
        entry = _ray_box_numpy(bmin[node], bmax[node], origins[q], dirs[q])
        keep = np.isfinite(entry) & (entry <= best[q])
        q = q[keep]
        node = node[keep]
        if not q.size:
            break
        pr = prim[node]
        leaf = pr >= 0
        lq = q[leaf]
        lt = pr[leaf].astype(np.int64)
        if lq.size:
            if excl_keys.shape[0] > 0:
                keys = qverts[lq] * n_excl_base + tri_src[lt]
                at = np.minimum(np.searchsorted(excl_keys, keys), excl_keys.shape[0] - 1)
                excluded = excl_keys[at] == keys
                lq = lq[~excluded]
                lt = lt[~excluded]
            if lq.size:
                t = _ray_tri_numpy(origins[lq], dirs[lq], pos, tris[lt])
                # first-hit with index tie-break, applied per query in hit order
                for j in np.argsort(t, kind="stable"):
                    qq = lq[j]
                    if t[j] < best[qq] or (t[j] == best[qq] and lt[j] < best_tri[qq]):
                        best[qq] = t[j]
                        best_tri[qq] = lt[j]
        iq = q[~leaf]
        inode = node[~leaf]
        q = np.concatenate([iq, iq])
        node = np.concatenate([left[inode].astype(np.int64), right[inode].astype(np.int64)])
    return best, best_tri, visits


def _ray_box_numpy(bmin, bmax, orig, dirs):
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (bmin - orig) / dirs
        t2 = (bmax - orig) / dirs
    lo = np.minimum(t1, t2)
    hi = np.maximum(t1, t2)
    par = dirs == 0.0
    inside = (orig >= bmin) & (orig <= bmax)
    lo = np.where(par, np.where(inside, -np.inf, np.inf), lo)
    hi = np.where(par, np.where(inside, np.inf, -np.inf), hi)
    tmin = np.maximum(np.max(lo, axis=1), 0.0)
    tmax = np.min(hi, axis=1)
    return np.where(tmin <= tmax, tmin, np.inf)


def ray_surface_query(origins, dirs, qverts, bmin, bmax, left, right, prim,
                      pos, tris, tri_src, excl_keys, n_excl_base):
    """First ray hit on non-excluded triangles.

    Returns ``(t, triangle_id, node_visits)`` with ``t = inf`` on a miss.
    Ties in ``t`` resolve to the lower triangle index.
    """
    if not NUMBA_AVAILABLE:
        return _ray_query_numpy(origins, dirs, qverts, bmin, bmax, left, right,
                                prim, pos, tris, tri_src, excl_keys, n_excl_base)
    out_t = np.empty(origins.shape[0])
    out_tri = np.empty(origins.shape[0], np.int64)
    visits = _ray_query_numba(origins, dirs, qverts, bmin, bmax, left, right,
                              prim, pos, tris, tri_src, excl_keys, n_excl_base,
                              out_t, out_tri)
    return out_t, out_tri, visits


# ---------------------------------------------------------------------------
# closest point on a triangle soup


def _closest_on_tri(pos, tris, t, px, py, pz):
    """Ericson's region-walk closest point; returns (x, y, z, dist2)."""
    i0 = tris[t, 0]
    i1 = tris[t, 1]
    i2 = tris[t, 2]
    ax = pos[i0, 0]
    ay = pos[i0, 1]
    az = pos[i0, 2]
    abx = pos[i1, 0] - ax
    aby = pos[i1, 1] - ay
    abz = pos[i1, 2] - az
    acx = pos[i2, 0] - ax
    acy = pos[i2, 1] - ay
    acz = pos[i2, 2] - az
    apx = px - ax
    apy = py - ay
    apz = pz - az
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        qx, qy, qz = ax, ay, az
    else:
        bpx = px - pos[i1, 0]
        bpy = py - pos[i1, 1]
        bpz = pz - pos[i1, 2]
        d3 = abx * bpx + aby * bpy + abz * bpz
        d4 = acx * bpx + acy * bpy + acz * bpz
        if d3 >= 0.0 and d4 <= d3:
            qx, qy, qz = pos[i1, 0], pos[i1, 1], pos[i1, 2]
        else:
            vc = d1 * d4 - d3 * d2
            if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
                w = d1 / (d1 - d3)
                qx = ax + w * abx
                qy = ay + w * aby
                qz = az + w * abz
            else:
                cpx = px - pos[i2, 0]
                cpy = py - pos[i2, 1]
                cpz = pz - pos[i2, 2]
                d5 = abx * cpx + aby * cpy + abz * cpz
                d6 = acx * cpx + acy * cpy + acz * cpz
                if d6 >= 0.0 and d5 <= d6:
                    qx, qy, qz = pos[i2, 0], pos[i2, 1], pos[i2, 2]
                else:
                    vb = d5 * d2 - d1 * d6
                    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
                        w = d2 / (d2 - d6)
                        qx = ax + w * acx
                        qy = ay + w * acy
                        qz = az + w * acz
                    else:
                        va = d3 * d6 - d5 * d4
                        if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
                            w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
                            qx = pos[i1, 0] + w * (pos[i2, 0] - pos[i1, 0])
                            qy = pos[i1, 1] + w * (pos[i2, 1] - pos[i1, 1])
                            qz = pos[i1, 2] + w * (pos[i2, 2] - pos[i1, 2])
                        else:
                            denom = 1.0 / (va + vb + vc)
                            v = vb * denom
                            w = vc * denom
                            qx = ax + abx * v + acx * w
                            qy = ay + aby * v + acy * w
                            qz = az + abz * v + acz * w
    dx = px - qx
    dy = py - qy
    dz = pz - qz
    return qx, qy, qz, dx * dx + dy * dy + dz * dz


_closest_on_tri_numba = _jit(_closest_on_tri)


def _box_dist2(bmin, bmax, node, px, py, pz):
    d2 = 0.0
    for a in range(3):
        if a == 0:
            c = px
        elif a == 1:
            c = py
        else:
            c = pz
        if c < bmin[node, a]:
            d = bmin[node, a] - c
            d2 += d * d
        elif c > bmax[node, a]:
            d = c - bmax[node, a]
            d2 += d * d
    return d2


_box_dist2_numba = _jit(_box_dist2)


def _closest_query_loop(points, qverts, bmin, bmax, left, right, prim,
                        pos, tris, tri_src, excl_keys, n_excl_base,
                        out_pt, out_tri, out_d2):
    stack = np.empty(_STACK, np.int32)
    visits = 0
    for qi in range(points.shape[0]):
        px = points[qi, 0]
        py = points[qi, 1]
        pz = points[qi, 2]
        v = qverts[qi]
        best = np.inf
        best_tri = -1
        bx = 0.0
        by = 0.0
        bz = 0.0
        top = 0
        stack[0] = 0
        while top >= 0:
            node = stack[top]
            top -= 1
            visits += 1
            if _box_dist2_numba(bmin, bmax, node, px, py, pz) > best:
                continue
            p = prim[node]
            if p >= 0:
                if excl_keys.shape[0] > 0 and _key_found_numba(excl_keys, v * n_excl_base + tri_src[p]):
                    continue
                qx, qy, qz, d2 = _closest_on_tri_numba(pos, tris, p, px, py, pz)
                if d2 < best or (d2 == best and p < best_tri):
                    best = d2
                    best_tri = p
                    bx, by, bz = qx, qy, qz
            else:
                top += 1
                stack[top] = left[node]
                top += 1
                stack[top] = right[node]
        out_pt[qi, 0] = bx
        out_pt[qi, 1] = by
        out_pt[qi, 2] = bz
        out_tri[qi] = best_tri
        out_d2[qi] = best
    return visits


_closest_query_numba = _jit(_closest_query_loop)


def _closest_on_tri_numpy(points, pos, tris):
    a = pos[tris[:, 0]]
    b = pos[tris[:, 1]]
    c = pos[tris[:, 2]]
    ab = b - a
    ac = c - a
    ap = points - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = points - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = points - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4
    out = np.empty_like(points)
    done = np.zeros(points.shape[0], bool)

    m = (d1 <= 0) & (d2 <= 0)
    out[m] = a[m]
    done |= m
    m = ~done & (d3 >= 0) & (d4 <= d3)
    out[m] = b[m]
    done |= m
    m = ~done & (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    w = np.where(d1 - d3 != 0, d1 / np.where(d1 - d3 == 0, 1.0, d1 - d3), 0.0)
    out[m] = a[m] + w[m, None] * ab[m]
    done |= m
    m = ~done & (d6 >= 0) & (d5 <= d6)
    out[m] = c[m]
    done |= m
    m = ~done & (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    w = np.where(d2 - d6 != 0, d2 / np.where(d2 - d6 == 0, 1.0, d2 - d6), 0.0)
    out[m] = a[m] + w[m, None] * ac[m]
    done |= m
    m = ~done & (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
    den = (d4 - d3) + (d5 - d6)
    w = np.where(den != 0, (d4 - d3) / np.where(den == 0, 1.0, den), 0.0)
    out[m] = b[m] + w[m, None] * (c[m] - b[m])
    done |= m
    m = ~done
    den = va + vb + vc
    den = np.where(den == 0, 1.0, den)
    v = vb / den
    w = vc / den
    out[m] = a[m] + v[m, None] * ab[m] + w[m, None] * ac[m]
    d = points - out
    return out, np.einsum("ij,ij->i", d, d)


def _closest_query_numpy(points, qverts, bmin, bmax, left, right, prim,
                         pos, tris, tri_src, excl_keys, n_excl_base):
    nq = points.shape[0]
    best = np.full(nq, np.inf)
    best_tri = np.full(nq, -1, np.int64)
    best_pt = np.zeros((nq, 3))
    q = np.arange(nq, dtype=np.int64)
    node = np.zeros(nq, dtype=np.int64)
    visits = 0
    while q.size:
        visits += q.size
        lo = np.maximum(bmin[node] - points[q], 0.0)
        hi = np.maximum(points[q] - bmax[node], 0.0)
        d2 = np.einsum("ij,ij->i", lo, lo) + np.einsum("ij,ij->i", hi, hi)
        keep = d2 <= best[q]
        q = q[keep]
        node = node[keep]
        if not q.size:
            break
        pr = prim[node]
        leaf = pr >= 0
        lq = q[leaf]
        lt = pr[leaf].astype(np.int64)
        if lq.size:
            if excl_keys.shape[0] > 0:
                keys = qverts[lq] * n_excl_base + tri_src[lt]
                at = np.searchsorted(excl_keys, keys)
                at = np.minimum(at, excl_keys.shape[0] - 1)
                excluded = excl_keys[at] == keys
                lq = lq[~excluded]
                lt = lt[~excluded]
            if lq.size:
                pts, d2 = _closest_on_tri_numpy(points[lq], pos, tris[lt])
                order = np.argsort(d2, kind="stable")
                for j in order:
                    qq = lq[j]
                    if d2[j] < best[qq] or (d2[j] == best[qq] and lt[j] < best_tri[qq]):
                        best[qq] = d2[j]
                        best_tri[qq] = lt[j]
                        best_pt[qq] = pts[j]
        iq = q[~leaf]
        inode = node[~leaf]
        q = np.concatenate([iq, iq])
        node = np.concatenate([left[inode].astype(np.int64), right[inode].astype(np.int64)])
    return best_pt, best_tri, best, visits


def closest_point_query(points, qverts, bmin, bmax, left, right, prim,
                        pos, tris, tri_src, excl_keys, n_excl_base):
    """Closest surface point over non-excluded triangles.

    Returns ``(point, triangle_id, dist2, node_visits)``; equidistant
    triangles resolve to the lower index.
    """
    if not NUMBA_AVAILABLE:
        return _closest_query_numpy(points, qverts, bmin, bmax, left, right,
                                    prim, pos, tris, tri_src, excl_keys, n_excl_base)
    out_pt = np.empty((points.shape[0], 3))
    out_tri = np.empty(points.shape[0], np.int64)
    out_d2 = np.empty(points.shape[0])
    visits = _closest_query_numba(points, qverts, bmin, bmax, left, right, prim,
                                  pos, tris, tri_src, excl_keys, n_excl_base,
                                  out_pt, out_tri, out_d2)
    return out_pt, out_tri, out_d2, visits


# ---------------------------------------------------------------------------
# generalized winding number (far-field dipole + exact near-field)

WINDING_BETA2 = 4.0  # squared far-field opening threshold


def _tri_solid_angle(pos, tris, t, px, py, pz):
    """van Oosterom-Strackee signed solid angle of one triangle."""
    ax = pos[tris[t, 0], 0] - px
    ay = pos[tris[t, 0], 1] - py
    az = pos[tris[t, 0], 2] - pz
    bx = pos[tris[t, 1], 0] - px
    by = pos[tris[t, 1], 1] - py
    bz = pos[tris[t, 1], 2] - pz
    cx = pos[tris[t, 2], 0] - px
    cy = pos[tris[t, 2], 1] - py
    cz = pos[tris[t, 2], 2] - pz
    la = np.sqrt(ax * ax + ay * ay + az * az)
    lb = np.sqrt(bx * bx + by * by + bz * bz)
    lc = np.sqrt(cx * cx + cy * cy + cz * cz)
    num = (ax * (by * cz - bz * cy)
           - bx * (ay * cz - az * cy)
           + cx * (ay * bz - az * by))
    den = (la * lb * lc + (ax * bx + ay * by + az * bz) * lc
           + (bx * cx + by * cy + bz * cz) * la
           + (cx * ax + cy * ay + cz * az) * lb)
    return 2.0 * np.arctan2(num, den)


_tri_solid_angle_numba = _jit(_tri_solid_angle)


def _winding_query_loop(points, bmin, bmax, left, right, prim,
                        pos, tris, ctr, nrm, rad2, out_w):
    stack = np.empty(_STACK, np.int32)
    visits = 0
    four_pi = 4.0 * np.pi
    for qi in range(points.shape[0]):
        px = points[qi, 0]
        py = points[qi, 1]
        pz = points[qi, 2]
        acc = 0.0
        top = 0
        stack[0] = 0
        while top >= 0:
            node = stack[top]
            top -= 1
            visits += 1
            rx = ctr[node, 0] - px
            ry = ctr[node, 1] - py
            rz = ctr[node, 2] - pz
            d2 = rx * rx + ry * ry + rz * rz
            if d2 > WINDING_BETA2 * rad2[node]:
                d = np.sqrt(d2)
                acc += (nrm[node, 0] * rx + nrm[node, 1] * ry + nrm[node, 2] * rz) / (d2 * d)
                continue
            p = prim[node]
            if p >= 0:
                acc += _tri_solid_angle_numba(pos, tris, p, px, py, pz)
            else:
                top += 1
                stack[top] = left[node]
                top += 1
                stack[top] = right[node]
        out_w[qi] = acc / four_pi
    return visits


_winding_query_numba = _jit(_winding_query_loop)


def _solid_angles_numpy(points, pos, tris):
    a = pos[tris[:, 0]] - points
    b = pos[tris[:, 1]] - points
    c = pos[tris[:, 2]] - points
    la = np.linalg.norm(a, axis=1)
    lb = np.linalg.norm(b, axis=1)
    lc = np.linalg.norm(c, axis=1)
    num = np.einsum("ij,ij->i", a, np.cross(b, c))
    den = (la * lb * lc + np.einsum("ij,ij->i", a, b) * lc
           + np.einsum("ij,ij->i", b, c) * la
           + np.einsum("ij,ij->i", c, a) * lb)
    return 2.0 * np.arctan2(num, den)


def _winding_query_numpy(points, bmin, bmax, left, right, prim,
                         pos, tris, ctr, nrm, rad2):
    nq = points.shape[0]
    w = np.zeros(nq)
    q = np.arange(nq, dtype=np.int64)
    node = np.zeros(nq, dtype=np.int64)
    visits = 0
    while q.size:
        visits += q.size
        r = ctr[node] - points[q]
        d2 = np.einsum("ij,ij->i", r, r)
        far = d2 > WINDING_BETA2 * rad2[node]
        if np.any(far):
            d = np.sqrt(d2[far])
            contrib = np.einsum("ij,ij->i", nrm[node[far]], r[far]) / (d2[far] * d)
            np.add.at(w, q[far], contrib)
        q = q[~far]
        node = node[~far]
        if not q.size:
            break
        pr = prim[node]
        leaf = pr >= 0
        lq = q[leaf]
        lt = pr[leaf].astype(np.int64)
        if lq.size:
            np.add.at(w, lq, _solid_angles_numpy(points[lq], pos, tris[lt]))
        iq = q[~leaf]
        inode = node[~leaf]
        q = np.concatenate([iq, iq])
        node = np.concatenate([left[inode].astype(np.int64), right[inode].astype(np.int64)])
    return w / (4.0 * np.pi), visits


def winding_query(points, bmin, bmax, left, right, prim, pos, tris, ctr, nrm, rad2):
    """Generalized winding numbers of query points w.r.t. an oriented surface."""
    if not NUMBA_AVAILABLE:
        return _winding_query_numpy(points, bmin, bmax, left, right, prim,
                                    pos, tris, ctr, nrm, rad2)
    out_w = np.empty(points.shape[0])
    visits = _winding_query_numba(points, bmin, bmax, left, right, prim,
                                  pos, tris, ctr, nrm, rad2, out_w)
    return out_w, visits


# ---------------------------------------------------------------------------
# per-element rotation fit (shape matching) + principal stretches


def _fit_rotations_loop(rest_c, def_c, out_r, out_sig, out_flag):
    n = rest_c.shape[0]
    for e in range(n):
        B = rest_c[e]
        A = def_c[e]
        H = A @ B.T
        U, s, Vt = np.linalg.svd(H)
        if s[0] <= 0.0 or s[1] <= 1e-12 * s[0]:
            out_flag[e] = 1
            out_r[e, 0, 0] = 1.0
            out_r[e, 0, 1] = 0.0
            out_r[e, 0, 2] = 0.0
            out_r[e, 1, 0] = 0.0
            out_r[e, 1, 1] = 1.0
            out_r[e, 1, 2] = 0.0
            out_r[e, 2, 0] = 0.0
            out_r[e, 2, 1] = 0.0
            out_r[e, 2, 2] = 1.0
        else:
            out_flag[e] = 0
            d = np.linalg.det(U) * np.linalg.det(Vt)
            if d < 0.0:
                U[0, 2] = -U[0, 2]
                U[1, 2] = -U[1, 2]
                U[2, 2] = -U[2, 2]
            out_r[e] = U @ Vt
        BBt = B @ B.T
        if abs(np.linalg.det(BBt)) <= 1e-300:
            out_sig[e, 0] = 1.0
            out_sig[e, 1] = 1.0
            out_sig[e, 2] = 1.0
            out_flag[e] = 1
        else:
            F = np.linalg.solve(BBt, H.T).T
            _, sf, _ = np.linalg.svd(F)
            out_sig[e] = sf


_fit_rotations_numba = _jit(_fit_rotations_loop)


def _fit_rotations_numpy(rest_c, def_c):
    B = rest_c
    A = def_c
    H = A @ B.transpose(0, 2, 1)
    U, s, Vt = np.linalg.svd(H)
    flags = (s[:, 0] <= 0.0) | (s[:, 1] <= 1e-12 * s[:, 0])
    d = np.linalg.det(U) * np.linalg.det(Vt)
    U = U.copy()
    U[d < 0.0, :, 2] *= -1.0
    R = U @ Vt
    R[flags] = np.eye(3)
    BBt = B @ B.transpose(0, 2, 1)
    bad = np.abs(np.linalg.det(BBt)) <= 1e-300
    safe = np.where(bad[:, None, None], np.eye(3), BBt)
    F = np.linalg.solve(safe, H.transpose(0, 2, 1)).transpose(0, 2, 1)
    sig = np.linalg.svd(F, compute_uv=False)
    sig[bad] = 1.0
    flags = flags | bad
    return R, sig, flags


def fit_rotations(rest_c, def_c):
    """Best proper rotations mapping centered rest shapes onto deformed ones.

    Also returns the principal stretches of the rest-to-deformed affine map
    and a flag marking elements too degenerate for a well-defined fit (those
    get the identity rotation and unit stretches).
    """
    n = rest_c.shape[0]
    if not NUMBA_AVAILABLE:
        return _fit_rotations_numpy(rest_c, def_c)
    out_r = np.empty((n, 3, 3))
    out_sig = np.empty((n, 3))
    out_flag = np.zeros(n, np.uint8)
    _fit_rotations_numba(np.ascontiguousarray(rest_c), np.ascontiguousarray(def_c),
                         out_r, out_sig, out_flag)
    return out_r, out_sig, out_flag.astype(bool)
