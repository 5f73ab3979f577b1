"""Planar geometry helpers: polygon areas, convex clipping, overlap maps.

All polygons are (n, 2) float arrays with counter-clockwise orientation.
Clipping follows Sutherland-Hodgman against convex clippers, which is exact
for the convex-convex cases the mesh volumes and estimator overlaps need.
"""

from __future__ import annotations

import numpy as np

from .lattice import DET_A


def polygon_area(pts: np.ndarray) -> float:
    """Signed shoelace area; positive for counter-clockwise orientation."""
    p = np.asarray(pts, dtype=float)
    if len(p) < 3:
        return 0.0
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_convex(subject: np.ndarray, clipper: np.ndarray) -> np.ndarray:
    """Clip polygon ``subject`` by the convex CCW polygon ``clipper``."""
    out = [tuple(p) for p in np.asarray(subject, dtype=float)]
    clip = np.asarray(clipper, dtype=float)
    n = len(clip)
    for i in range(n):
        if not out:
            break
        a = clip[i]
        b = clip[(i + 1) % n]
        ex, ey = b[0] - a[0], b[1] - a[1]
        inp = out
        out = []
        prev = inp[-1]
        prev_in = ex * (prev[1] - a[1]) - ey * (prev[0] - a[0]) >= -1e-14
        for cur in inp:
            cur_in = ex * (cur[1] - a[1]) - ey * (cur[0] - a[0]) >= -1e-14
            if cur_in != prev_in:
                dx, dy = cur[0] - prev[0], cur[1] - prev[1]
                denom = ex * dy - ey * dx
                if abs(denom) > 1e-300:
                    t = (ey * (prev[0] - a[0]) - ex * (prev[1] - a[1])) / denom
                    out.append((prev[0] + t * dx, prev[1] + t * dy))
            if cur_in:
                out.append(cur)
            prev, prev_in = cur, cur_in
    return np.array(out, dtype=float).reshape(-1, 2)


def overlap_area(poly_a: np.ndarray, poly_b: np.ndarray) -> float:
    """Area of the intersection of two convex polygons (any orientation)."""
    a = np.asarray(poly_a, dtype=float)
    b = np.asarray(poly_b, dtype=float)
    if polygon_area(a) < 0:
        a = a[::-1]
    if polygon_area(b) < 0:
        b = b[::-1]
    inter = clip_convex(a, b)
    return abs(polygon_area(inter)) if len(inter) >= 3 else 0.0


def batch_triangle_overlap(tri_a: np.ndarray, tri_b: np.ndarray
                           ) -> np.ndarray:
    """Intersection areas of paired triangles, fully vectorized.

    tri_a, tri_b: (n, 3, 2) vertex arrays (any orientation).  Runs one
    Sutherland-Hodgman pass per clipping half-plane on a padded vertex
    buffer (a triangle-triangle intersection has at most six vertices).
    Matches overlap_area pair by pair.
    """
    a = np.asarray(tri_a, dtype=float)
    b = np.asarray(tri_b, dtype=float)
    n = len(a)
    if n == 0:
        return np.zeros(0)

    def ccw(t):
        e1 = t[:, 1] - t[:, 0]
        e2 = t[:, 2] - t[:, 0]
        flip = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0] < 0
        t = t.copy()
        t[flip] = t[flip][:, ::-1]
        return t

    a = ccw(a)
    b = ccw(b)

    kmax = 8
    poly = np.zeros((n, kmax, 2))
    poly[:, :3] = a
    cnt = np.full(n, 3, dtype=np.int64)
    rows = np.arange(n)

    for i in range(3):
        p0 = b[:, i]
        p1 = b[:, (i + 1) % 3]
        ex = p1[:, 0] - p0[:, 0]
        ey = p1[:, 1] - p0[:, 1]
        # signed side of every buffered vertex wrt the clip edge
        side = (ex[:, None] * (poly[:, :, 1] - p0[:, None, 1])
                - ey[:, None] * (poly[:, :, 0] - p0[:, None, 0]))
        inside = side >= -1e-14
        live = np.arange(kmax)[None, :] < cnt[:, None]
        prev_idx = (np.arange(kmax)[None, :] - 1) % np.maximum(cnt, 1)[:, None]
        prev = poly[rows[:, None], prev_idx]
        sprev = np.take_along_axis(side, prev_idx, axis=1)
        iprev = sprev >= -1e-14

        # crossing point of segment prev->cur with the clip line
        d = poly - prev
        denom = ex[:, None] * d[:, :, 1] - ey[:, None] * d[:, :, 0]
        safe = np.where(np.abs(denom) > 1e-300, denom, 1.0)
        t = (ey[:, None] * (prev[:, :, 0] - p0[:, None, 0])
             - ex[:, None] * (prev[:, :, 1] - p0[:, None, 1])) / safe
        cross = prev + t[:, :, None] * d

        emit_cross = live & (inside != iprev) & (np.abs(denom) > 1e-300)
        emit_cur = live & inside
        out = np.zeros((n, 2 * kmax, 2))
        valid = np.zeros((n, 2 * kmax), dtype=bool)
        out[:, 0::2] = cross
        out[:, 1::2] = poly
        valid[:, 0::2] = emit_cross
        valid[:, 1::2] = emit_cur

        pos = np.cumsum(valid, axis=1) - 1
        new_poly = np.zeros((n, kmax, 2))
        r, j = np.nonzero(valid)
        p = pos[r, j]
        keep = p < kmax
        new_poly[r[keep], p[keep]] = out[r[keep], j[keep]]
        poly = new_poly
        cnt = np.minimum(valid.sum(axis=1), kmax)

    live = np.arange(kmax)[None, :] < cnt[:, None]
    nxt_idx = (np.arange(kmax)[None, :] + 1) % np.maximum(cnt, 1)[:, None]
    nxt = poly[rows[:, None], nxt_idx]
    terms = poly[:, :, 0] * nxt[:, :, 1] - poly[:, :, 1] * nxt[:, :, 0]
    area = 0.5 * np.abs(np.sum(np.where(live, terms, 0.0), axis=1))
    area[cnt < 3] = 0.0
    return area


# Voronoi cell of a triangular-lattice site: regular hexagon of inradius 1/2
# (circumradius 1/sqrt(3)), vertices at 30 + 60k degrees, area det A.
_VOR_ANGLES = np.deg2rad(30.0 + 60.0 * np.arange(6))
VORONOI_HEXAGON = np.column_stack([np.cos(_VOR_ANGLES),
                                   np.sin(_VOR_ANGLES)]) / np.sqrt(3.0)
VORONOI_AREA = DET_A


def voronoi_cell(center: np.ndarray) -> np.ndarray:
    """Homogeneous-lattice Voronoi hexagon translated to ``center``."""
    return VORONOI_HEXAGON + np.asarray(center, dtype=float)


def triangle_min_angle(pts: np.ndarray) -> float:
    """Smallest interior angle of a triangle in degrees."""
    p = np.asarray(pts, dtype=float)
    e = np.array([p[1] - p[0], p[2] - p[1], p[0] - p[2]])
    ln = np.linalg.norm(e, axis=1)
    if ln.min() <= 0.0:
        return 0.0
    # angle at vertex i is between edges entering/leaving it
    ang = []
    for i in range(3):
        u = -e[(i + 2) % 3]
        v = e[i]
        c = np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v))
        ang.append(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))
    return float(min(ang))


def triangles_min_angles(points: np.ndarray, tri: np.ndarray) -> np.ndarray:
    """Vectorized smallest interior angle per triangle, degrees."""
    p = points[tri]
    a, b, c = p[:, 0], p[:, 1], p[:, 2]
    la = np.linalg.norm(b - c, axis=1)
    lb = np.linalg.norm(c - a, axis=1)
    lc = np.linalg.norm(a - b, axis=1)
    angs = np.empty((len(tri), 3))
    for i, (opp, e1, e2) in enumerate(((la, lb, lc), (lb, lc, la),
                                       (lc, la, lb))):
        cosv = (e1 ** 2 + e2 ** 2 - opp ** 2) / (2.0 * e1 * e2)
        angs[:, i] = np.degrees(np.arccos(np.clip(cosv, -1.0, 1.0)))
    return angs.min(axis=1)
