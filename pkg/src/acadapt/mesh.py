"""Coupled atomistic/continuum triangulations of hexagonal domains.

The mesh joins a lattice-resolved atomistic core (micro-triangulation with
vacancy holes), a lattice-fine transition band, and graded continuum rings
whose target size grows like ``(|x|/Ra)**beta``.  All boundaries between
rings are concentric hexagons, so ring-to-ring bands can be triangulated by
a deterministic angular merge ("zip").  Effective Cauchy-Born volumes
subtract the Voronoi cells of real atoms from element areas so that site
energies and element energies partition the domain exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import (VORONOI_HEXAGON, clip_convex, polygon_area,
                       triangles_min_angles)
from .lattice import DET_A, LATTICE_A, TriangularLattice

KIND_CORE, KIND_INTERFACE, KIND_CONTINUUM = 0, 1, 2
REGION_A, REGION_I, REGION_C = 0, 1, 2

#: Circumradius of a lattice Voronoi cell, with a safety margin.
_CELL_REACH = 1.0 / np.sqrt(3.0) + 1e-9

_A_INV = np.linalg.inv(LATTICE_A)

#: Hexagon corner steps in lattice coordinates, counter-clockwise from (1,0).
_CORNER_MN = np.array([[1, 0], [0, 1], [-1, 1], [-1, 0], [0, -1], [1, -1]],
                      dtype=float)
_CORNERS = _CORNER_MN @ LATTICE_A.T


class MeshError(RuntimeError):
    """Raised when a mesh operation cannot produce a valid triangulation."""


def cartesian_hexnorm(xy: np.ndarray) -> np.ndarray:
    """Continuous hexagonal norm of Cartesian points (lattice layers)."""
    u = np.asarray(xy, dtype=float) @ _A_INV.T
    return np.maximum(np.maximum(np.abs(u[..., 0]), np.abs(u[..., 1])),
                      np.abs(u[..., 0] + u[..., 1]))


def hex_ring_points(rho: float, n: int) -> np.ndarray:
    """6n points on the hexagon of hex-radius rho, CCW from (rho, 0)."""
    corners = rho * _CORNERS
    pts = np.empty((6 * n, 2))
    t = (np.arange(n) / n)[:, None]
    for j in range(6):
        c0, c1 = corners[j], corners[(j + 1) % 6]
        pts[j * n:(j + 1) * n] = c0 + t * (c1 - c0)
    return pts


def _ring_angles(pts: np.ndarray) -> np.ndarray:
    ang = np.arctan2(pts[:, 1], pts[:, 0])
    ang[ang < -1e-12] += 2.0 * np.pi
    ang[np.abs(ang) <= 1e-12] = 0.0
    return ang


def _sort_ccw(ids: np.ndarray, xy: np.ndarray) -> np.ndarray:
    """Sort node ids counter-clockwise starting near angle zero."""
    ang = _ring_angles(xy[ids])
    order = np.argsort(ang, kind="stable")
    return ids[order]


def _tri_quality(a, b, c) -> float:
    """Minimum interior angle in degrees; negative for CW orientation."""
    u, v, w = b - a, c - b, a - c
    area2 = u[0] * v[1] - u[1] * v[0]
    lu = np.hypot(u[0], u[1])
    lv = np.hypot(v[0], v[1])
    lw = np.hypot(w[0], w[1])
    if min(lu, lv, lw) <= 0.0:
        return -180.0
    angs = []
    for p, q in ((u, -w), (v, -u), (w, -v)):
        cc = (p[0] * q[0] + p[1] * q[1]) / (
            np.hypot(p[0], p[1]) * np.hypot(q[0], q[1]))
        angs.append(np.degrees(np.arccos(np.clip(cc, -1.0, 1.0))))
    q = min(angs)
    return q if area2 > 0 else -q


def zip_band(inner_ids, inner_xy, outer_ids, outer_xy) -> np.ndarray:
    """Triangulate the band between two star-shaped CCW node rings.

    Both rings must be sorted by angle starting near angle zero.  The
    band is built by an angular merge: advance on the ring whose next
    node has the smaller angle, emitting one CCW triangle per advance.
    When the two next angles coincide (radially aligned nodes, as at
    hexagon corners of self-similar rings) the candidate triangle with
    the larger minimum angle wins.
    """
    inner_xy = np.asarray(inner_xy, dtype=float)
    outer_xy = np.asarray(outer_xy, dtype=float)
    aI = _ring_angles(inner_xy)
    aO = _ring_angles(outer_xy)
    nI, nO = len(inner_ids), len(outer_ids)
    if nI < 2 or nO < 2:
        raise MeshError("zip band needs at least two nodes per ring")
    tris = np.empty((nI + nO, 3), dtype=np.int64)
    i = j = t = 0
    two_pi = 2.0 * np.pi
    while i < nI or j < nO:
        if i < nI:
            na_i = aI[(i + 1) % nI] + (two_pi if i + 1 >= nI else 0.0)
        else:
            na_i = np.inf
        if j < nO:
            na_j = aO[(j + 1) % nO] + (two_pi if j + 1 >= nO else 0.0)
        else:
            na_j = np.inf
        if na_i < na_j - 1e-9:
            advance_inner = True
        elif na_j < na_i - 1e-9:
            advance_inner = False
        else:
            q_in = _tri_quality(inner_xy[(i + 1) % nI], inner_xy[i % nI],
                                outer_xy[j % nO]) if i < nI else -np.inf
            q_out = _tri_quality(outer_xy[j % nO], outer_xy[(j + 1) % nO],
                                 inner_xy[i % nI]) if j < nO else -np.inf
            advance_inner = q_in >= q_out
        if advance_inner:
            tris[t] = (inner_ids[(i + 1) % nI], inner_ids[i % nI],
                       outer_ids[j % nO])
            i += 1
        else:
            tris[t] = (outer_ids[j % nO], outer_ids[(j + 1) % nO],
                       inner_ids[i % nI])
            j += 1
        t += 1
    return tris


def ladder_rings(rho0: float, n0: int, targets, ra: float,
                 beta: float) -> list:
    """Graded hexagon rings from rho0 out to each target radius.

    Ring spacing follows h(rho) = max(1, (rho/ra)**beta); every target
    radius is hit exactly; per-side node counts are non-increasing with
    tangential spacing tracking h.  Returns [(rho, n_per_side), ...]
    excluding rho0 itself.
    """
    rings = []
    rho, n = float(rho0), int(n0)
    for hi in targets:
        hi = float(hi)
        if hi <= rho + 1e-9:
            raise MeshError(f"ring target {hi} not beyond {rho}")
        while rho < hi - 1e-9:
            h = max(1.0, (rho / ra) ** beta)
            nxt = rho + h
            if nxt + 0.45 * max(1.0, (nxt / ra) ** beta) >= hi:
                nxt = hi
            h_new = max(1.0, (nxt / ra) ** beta)
            n = max(1, min(n, int(np.ceil(nxt / h_new))))
            rings.append((nxt, n))
            rho = nxt
    return rings


def gap_rings(rho0: float, n0: int, rho1: float, n1: int, ra: float,
              beta: float) -> list:
    """Graded rings strictly between two pinned rings.

    Both bounding rings already exist (inner lattice rim, outer retained
    seam), so nothing may snap onto them.  Tentative positions follow the
    step law h(rho) = max(1, (rho/ra)**beta) and are then affinely
    rescaled so the progression lands exactly on rho1; per-side counts
    interpolate the two pinned tangential spacings geometrically and are
    kept non-increasing outward.  Returns [(rho, n_per_side), ...] for
    the intermediate rings only (may be empty when the step law crosses
    the gap in a single stride).
    """
    rho0, rho1 = float(rho0), float(rho1)
    if rho1 <= rho0 + 1e-12:
        raise MeshError("gap must have positive thickness")
    tent = []
    rho = rho0
    while rho < rho1 - 1e-12:
        rho = rho + max(1.0, (rho / ra) ** beta)
        tent.append(rho)
    s0 = rho0 / float(n0)
    s1 = rho1 / float(n1)
    # one intermediate ring per doubling of tangential spacing, even when
    # the step law would cross the gap in a single stride
    ratio = max(s0, s1) / min(s0, s1)
    m = max(len(tent) - 1,
            int(np.ceil(np.log2(ratio))) - 1 if ratio > 2.0 else 0)
    if m <= 0:
        return []
    if len(tent) - 1 >= m:
        scale = (rho1 - rho0) / (tent[-1] - rho0)
        positions = [rho0 + scale * (rt - rho0) for rt in tent[:-1]]
    else:
        positions = [rho0 + (i + 1) * (rho1 - rho0) / (m + 1)
                     for i in range(m)]
    rings = []
    n_prev = int(n0)
    for r in positions:
        t = (r - rho0) / (rho1 - rho0)
        spacing = s0 ** (1.0 - t) * s1 ** t
        n = int(round(r / spacing))
        n = max(int(n1), min(n_prev, max(1, n)))
        rings.append((r, n))
        n_prev = n
    return rings


@dataclass
class NestedShells:
    """Pre-generated graded annuli for successive domain enlargement.

    Restricting the triangulation of shell k+1 to the domain of shell k
    reproduces shell k bit-identically because enlargement appends nodes
    and elements without touching existing ones.
    """
    radii: list
    segments: list  # segments[k] = rings from radii[k] to radii[k+1]

    @classmethod
    def plan(cls, mesh: "CoupledMesh", targets) -> "NestedShells":
        targets = [float(t) for t in targets]
        if not targets or targets[0] <= mesh.R:
            raise MeshError("shell targets must increase beyond current R")
        n0 = mesh.ladder[-1][1] if mesh.ladder else max(1, int(mesh.R))
        rings = ladder_rings(mesh.R, n0, targets, mesh.grading_center,
                             mesh.beta)
        segments, seg = [], []
        ti = 0
        for rho, n in rings:
            seg.append((rho, n))
            if abs(rho - targets[ti]) < 1e-9:
                segments.append(seg)
                seg = []
                ti += 1
        return cls(radii=[mesh.R] + targets, segments=segments)


@dataclass
class EdgeData:
    edges: np.ndarray      # (E, 2) node ids, a < b
    el_edge: np.ndarray    # (m, 3) edge id per local edge (01, 12, 20)
    edge_el: np.ndarray    # (E, 2) incident elements; [:,1] = -1 on boundary
    nu: np.ndarray         # (E, 2) unit normal, outward from edge_el[:,0]
    length: np.ndarray     # (E,)
    interior: np.ndarray   # (E,) bool


class CoupledMesh:
    """Conforming triangulation with atomistic / interface / continuum zones.

    Node kinds: 0 core atom, 1 interface atom, 2 continuum.  Element
    regions: 0 atomistic (micro-triangle, omega = 0), 1 interface
    (0 < omega < |T|), 2 continuum (omega = |T|).
    """

    def __init__(self, k, Ra, W, R, beta, grading_center, micro, xy, kind,
                 site, tri, ladder):
        self.k = int(k)
        self.Ra = int(Ra)
        self.W = int(W)
        self.R = float(R)
        self.beta = float(beta)
        self.grading_center = float(grading_center)
        self.micro = micro
        self.xy = np.asarray(xy, dtype=float)
        self.kind = np.asarray(kind, dtype=np.int8)
        self.site = np.asarray(site, dtype=np.int64)
        self.tri = np.asarray(tri, dtype=np.int64)
        self.ladder = list(ladder)
        self.hexrad = cartesian_hexnorm(self.xy)
        self.region = None
        self.omega = None
        self.area = None
        self.v_atom = None
        self._edges = None
        self._finder = None
        self._shape_grads = None
        self.recompute_volumes()
        self._assign_nvb()

    # -- construction ----------------------------------------------------------

    @classmethod
    def build(cls, k: int, Ra: int, R: float, beta: float = 1.5,
              W: int = 2) -> "CoupledMesh":
        """Initial coupled mesh: micro core + lattice band + graded rings."""
        from .lattice import vacancy_coordinates, hexnorm as hn
        Ra = int(Ra)
        core = int(hn(vacancy_coordinates(k)).max()) if k else 0
        if Ra < core + 2:
            raise MeshError(f"Ra={Ra} too small for defect core {core}")
        if R <= Ra + W + 2:
            raise MeshError(f"R={R} must exceed Ra+W+2={Ra + W + 2}")
        micro = TriangularLattice(k, Ra + W)
        rings = micro.site_rings()
        kind = np.where(rings < Ra, KIND_CORE,
                        np.where(rings == Ra, KIND_INTERFACE,
                                 KIND_CONTINUUM)).astype(np.int8)
        xy = [micro.xy]
        site = [np.arange(micro.S, dtype=np.int64)]
        kinds = [kind]
        tris = [micro.tri.copy()]
        chain = _sort_ccw(np.where(rings == Ra + W)[0], micro.xy)
        chain_xy = micro.xy[chain]
        nxt = micro.S
        ladder = ladder_rings(Ra + W, Ra + W, [float(R)], float(Ra), beta)
        for rho, n in ladder:
            pts = hex_ring_points(rho, n)
            ids = np.arange(nxt, nxt + len(pts), dtype=np.int64)
            nxt += len(pts)
            xy.append(pts)
            site.append(np.full(len(pts), -1, dtype=np.int64))
            kinds.append(np.full(len(pts), KIND_CONTINUUM, dtype=np.int8))
            tris.append(zip_band(chain, chain_xy, ids, pts))
            chain, chain_xy = ids, pts
        return cls(k, Ra, W, R, beta, Ra, micro,
                   np.vstack(xy), np.concatenate(kinds),
                   np.concatenate(site), np.vstack(tris), ladder)

    # -- cached structures -------------------------------------------------------

    def _invalidate(self):
        self._edges = None
        self._finder = None
        self._shape_grads = None

    @property
    def n_nodes(self):
        return len(self.xy)

    @property
    def n_elements(self):
        return len(self.tri)

    def edges(self) -> EdgeData:
        if self._edges is not None:
            return self._edges
        m = len(self.tri)
        pairs = self.tri[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
        key = np.sort(pairs, axis=1)
        edges, inv = np.unique(key, axis=0, return_inverse=True)
        el_edge = inv.reshape(m, 3)
        E = len(edges)
        edge_el = np.full((E, 2), -1, dtype=np.int64)
        pos_seen = np.zeros(E, dtype=bool)
        el_ids = np.repeat(np.arange(m, dtype=np.int64), 3)
        pos = pairs[:, 0] < pairs[:, 1]
        edge_el[inv[pos], 0] = el_ids[pos]
        pos_seen[inv[pos]] = True
        edge_el[inv[~pos], 1] = el_ids[~pos]
        # boundary edges seen only with reversed orientation: promote
        swap = ~pos_seen
        edge_el[swap, 0] = edge_el[swap, 1]
        edge_el[swap, 1] = -1
        d = self.xy[edges[:, 1]] - self.xy[edges[:, 0]]
        length = np.linalg.norm(d, axis=1)
        nu = np.column_stack([d[:, 1], -d[:, 0]]) / length[:, None]
        nu[swap] = -nu[swap]
        interior = edge_el[:, 1] >= 0
        self._edges = EdgeData(edges, el_edge, edge_el, nu, length, interior)
        return self._edges

    def boundary_node_mask(self) -> np.ndarray:
        return self.hexrad >= self.R - 1e-9

    def atom_node_ids(self) -> np.ndarray:
        return np.where(self.kind <= KIND_INTERFACE)[0]

    def min_angle(self, elements=None) -> float:
        tri = self.tri if elements is None else self.tri[elements]
        if len(tri) == 0:
            return 180.0
        return float(triangles_min_angles(self.xy, tri).min())

    # -- point location ----------------------------------------------------------

    def _get_finder(self):
        if self._finder is None:
            import matplotlib.tri as mtri
            t = mtri.Triangulation(self.xy[:, 0], self.xy[:, 1], self.tri)
            self._finder = t.get_trifinder()
        return self._finder

    def locate(self, pts: np.ndarray):
        """Containing element and barycentric coordinates per point.

        Points outside by roundoff are pulled radially inward once;
        anything still unlocated raises.
        """
        pts = np.asarray(pts, dtype=float)
        finder = self._get_finder()
        el = np.asarray(finder(pts[:, 0], pts[:, 1]), dtype=np.int64)
        miss = el < 0
        if np.any(miss):
            shrunk = pts[miss] * (1.0 - 1e-12)
            el[miss] = finder(shrunk[:, 0], shrunk[:, 1])
            if np.any(el < 0):
                bad = pts[el < 0][:5]
                raise MeshError(f"points outside mesh, e.g. {bad}")
        a = self.xy[self.tri[el, 0]]
        b = self.xy[self.tri[el, 1]]
        c = self.xy[self.tri[el, 2]]
        v0, v1 = b - a, c - a
        v2 = pts - a
        den = v0[:, 0] * v1[:, 1] - v0[:, 1] * v1[:, 0]
        l1 = (v2[:, 0] * v1[:, 1] - v2[:, 1] * v1[:, 0]) / den
        l2 = (v0[:, 0] * v2[:, 1] - v0[:, 1] * v2[:, 0]) / den
        bary = np.column_stack([1.0 - l1 - l2, l1, l2])
        return el, bary

    def interpolate(self, values: np.ndarray, pts: np.ndarray) -> np.ndarray:
        """P1 interpolation of nodal values at arbitrary points."""
        el, bary = self.locate(pts)
        v = np.asarray(values, dtype=float)
        return np.einsum("nk,nk...->n...", bary, v[self.tri[el]])

    def gradients(self, values: np.ndarray) -> np.ndarray:
        """Constant P1 gradient per element.

        values (n,) -> (m, 2); values (n, c) -> (m, c, 2).
        """
        v = np.asarray(values, dtype=float)
        scalar = v.ndim == 1
        if scalar:
            v = v[:, None]
        tri = self.tri
        d1 = v[tri[:, 1]] - v[tri[:, 0]]
        d2 = v[tri[:, 2]] - v[tri[:, 0]]
        e1 = self.xy[tri[:, 1]] - self.xy[tri[:, 0]]
        e2 = self.xy[tri[:, 2]] - self.xy[tri[:, 0]]
        det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        # rows of [e1; e2]^{-T}
        g1 = np.column_stack([e2[:, 1], -e2[:, 0]]) / det[:, None]
        g2 = np.column_stack([-e1[:, 1], e1[:, 0]]) / det[:, None]
        out = (d1[:, :, None] * g1[:, None, :]
               + d2[:, :, None] * g2[:, None, :])
        return out[:, 0, :] if scalar else out

    def shape_gradients(self) -> np.ndarray:
        """Gradients of the three nodal hat functions per element, (m, 3, 2).

        For nodal values v, the element gradient is
        sum_p v[tri[e, p]] * shape_gradients()[e, p].
        """
        if self._shape_grads is not None:
            return self._shape_grads
        tri = self.tri
        e1 = self.xy[tri[:, 1]] - self.xy[tri[:, 0]]
        e2 = self.xy[tri[:, 2]] - self.xy[tri[:, 0]]
        det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        g1 = np.column_stack([e2[:, 1], -e2[:, 0]]) / det[:, None]
        g2 = np.column_stack([-e1[:, 1], e1[:, 0]]) / det[:, None]
        self._shape_grads = np.stack([-g1 - g2, g1, g2], axis=1)
        return self._shape_grads

    # -- effective volumes ---------------------------------------------------------

    def _removed_hole_triangles(self):
        """Unique micro-triangles deleted around vacancies, as mn corner sets."""
        out = {}
        for v in self.micro.vacancy_mn:
            v = tuple(int(x) for x in v)
            e1, e2 = (1, 0), (0, 1)
            for sgn in (+1, -1):
                for base in (v,
                             (v[0] - sgn * e1[0], v[1] - sgn * e1[1]),
                             (v[0] - sgn * e2[0], v[1] - sgn * e2[1])):
                    corners = (base,
                               (base[0] + sgn, base[1]),
                               (base[0], base[1] + sgn))
                    out[frozenset(corners)] = corners
        return list(out.values())

    def recompute_volumes(self) -> None:
        """Element areas, Cauchy-Born weights omega, atom volumes v_atom."""
        xy, tri = self.xy, self.tri
        e1 = xy[tri[:, 1]] - xy[tri[:, 0]]
        e2 = xy[tri[:, 2]] - xy[tri[:, 0]]
        two_a = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        if np.any(two_a <= 0):
            raise MeshError("negatively oriented or degenerate element")
        area = 0.5 * two_a
        kindv = self.kind[tri]
        n_atoms = (kindv <= KIND_INTERFACE).sum(axis=1)
        region = np.full(len(tri), REGION_C, dtype=np.int8)
        omega = area.copy()
        all_atom = n_atoms == 3
        region[all_atom] = REGION_A
        omega[all_atom] = 0.0

        atom_nodes = self.atom_node_ids()
        atom_xy = self.xy[atom_nodes]
        tree = cKDTree(atom_xy)
        cent = xy[tri].mean(axis=1)
        circum = np.linalg.norm(
            xy[tri] - cent[:, None, :], axis=2).max(axis=1)
        d_near, _ = tree.query(cent)
        cand = np.where(~all_atom & (d_near <= circum + _CELL_REACH))[0]
        for e in cand:
            hits = tree.query_ball_point(cent[e], circum[e] + _CELL_REACH)
            if not hits:
                continue
            t_xy = xy[tri[e]]
            covered = 0.0
            for a in sorted(hits):
                cell = VORONOI_HEXAGON + atom_xy[a]
                poly = clip_convex(t_xy, cell)
                if len(poly) >= 3:
                    covered += abs(polygon_area(poly))
            if covered > 1e-12 * area[e]:
                omega[e] = max(area[e] - covered, 0.0)
                region[e] = REGION_I if omega[e] > 1e-12 * area[e] \
                    else REGION_A
        self.area, self.omega, self.region = area, omega, region

        # v_atom: Voronoi cell area clipped at vacancy holes
        micro = self.micro
        rings = micro.site_rings()
        v = np.full(micro.S, np.nan)
        is_atom = rings <= self.Ra
        v[is_atom] = DET_A
        for corners in self._removed_hole_triangles():
            t_xy = np.array(corners, dtype=float) @ LATTICE_A.T
            if polygon_area(t_xy) < 0:
                t_xy = t_xy[::-1]
            for mn in corners:
                s = micro.site_index(mn[0], mn[1])
                if s >= 0 and is_atom[s]:
                    cell = VORONOI_HEXAGON + micro.xy[s]
                    poly = clip_convex(cell, t_xy)
                    if len(poly) >= 3:
                        v[s] -= abs(polygon_area(poly))
        self.v_atom = v

    def volume_identity_error(self) -> float:
        """Relative error of sum(v_atom) + sum(omega) against |Omega|."""
        total = float(self.area.sum())
        got = float(np.nansum(self.v_atom) + self.omega.sum())
        return abs(got - total) / total

    # -- newest-vertex bisection ------------------------------------------------------

    def _assign_nvb(self, elements=None) -> None:
        """Rotate vertex order so edge (v0, v1) is the refinement edge.

        The longest edge is chosen; edges shared with weight-carrying
        elements (full atomistic or partial overlap) are excluded so
        closure can never demand a split there: splitting an element
        with omega < |T| creates nodes whose equilibrium residual at
        uniform strain cannot be cancelled by any reconstruction
        coefficients, and would also break lattice bonds into multiple
        mesh edges.
        """
        idx = np.arange(len(self.tri)) if elements is None \
            else np.asarray(elements)
        if len(idx) == 0:
            return
        ed = self.edges()
        a_side = np.zeros(len(ed.edges), dtype=bool)
        is_a = self.region != REGION_C
        a_side[ed.el_edge[is_a].ravel()] = True
        tri = self.tri
        p = self.xy
        for e in idx:
            if is_a[e]:
                continue
            v = tri[e]
            lens = np.array([np.linalg.norm(p[v[1]] - p[v[0]]),
                             np.linalg.norm(p[v[2]] - p[v[1]]),
                             np.linalg.norm(p[v[0]] - p[v[2]])])
            blocked = a_side[ed.el_edge[e]]
            if blocked.all():
                raise MeshError("element enclosed by atomistic region")
            lens[blocked] = -1.0
            s = int(np.argmax(lens))
            if s:
                tri[e] = np.roll(v, -s)
        self._invalidate()

    def bisect(self, marked) -> "CoupledMesh":
        """Newest-vertex bisection of marked continuum elements + closure.

        Elements inherit their refinement edge from the split rule, which
        bounds the similarity classes.  Elements carrying atom-cell
        weight (omega < |T|, regions a and i) are never split — their
        geometry fixes the interface equilibrium constraints and their
        edges carry lattice bonds — so closure rotates any element whose
        refinement edge borders them to its best alternative edge,
        confining quality loss to the lattice-fine band.
        """
        marked = np.unique(np.asarray(marked, dtype=np.int64))
        if len(marked) == 0:
            return self
        if np.any(self.region[marked] != REGION_C):
            raise MeshError(
                "atomistic and interface-band elements cannot be refined")
        ed = self.edges()
        E = len(ed.edges)
        m = len(self.tri)
        ele = ed.el_edge.copy()
        is_a = self.region != REGION_C
        a_edge = np.zeros(E, dtype=bool)
        a_edge[ele[is_a].ravel()] = True
        edge_marked = np.zeros(E, dtype=bool)
        p = self.xy

        def set_ref(e):
            # rotate so the refinement edge avoids region a, preferring
            # already-marked edges to stop the cascade
            eds = ele[e]
            if not a_edge[eds[0]]:
                return
            v = self.tri[e]
            lens = (np.linalg.norm(p[v[1]] - p[v[0]]),
                    np.linalg.norm(p[v[2]] - p[v[1]]),
                    np.linalg.norm(p[v[0]] - p[v[2]]))
            best, key = None, None
            for s in (0, 1, 2):
                if a_edge[eds[s]]:
                    continue
                cand = (1 if edge_marked[eds[s]] else 0, lens[s])
                if best is None or cand > key:
                    best, key = s, cand
            if best is None:
                raise MeshError("element enclosed by atomistic region")
            self.tri[e] = np.roll(v, -best)
            ele[e] = np.roll(eds, -best)

        for e in marked:
            set_ref(e)
            edge_marked[ele[e, 0]] = True
        while True:
            el_any = edge_marked[ele].any(axis=1) & ~is_a
            need = np.where(el_any & ~edge_marked[ele[:, 0]])[0]
            if len(need) == 0:
                break
            for e in need:
                set_ref(e)
                edge_marked[ele[e, 0]] = True
        if np.any(edge_marked & a_edge):
            raise MeshError("refinement closure reached the atomistic "
                            "region")

        which = np.where(edge_marked)[0]
        mid_id = np.full(E, -1, dtype=np.int64)
        mid_id[which] = self.n_nodes + np.arange(len(which))
        mids = 0.5 * (self.xy[ed.edges[which, 0]]
                      + self.xy[ed.edges[which, 1]])
        self.xy = np.vstack([self.xy, mids])
        self.kind = np.concatenate(
            [self.kind, np.full(len(which), KIND_CONTINUUM, dtype=np.int8)])
        self.site = np.concatenate(
            [self.site, np.full(len(which), -1, dtype=np.int64)])
        self.hexrad = np.concatenate(
            [self.hexrad, cartesian_hexnorm(mids)])

        new_tri, new_reg = [], []
        tri = self.tri
        reg = self.region
        elm = ele
        for e in range(m):
            b = edge_marked[elm[e]]
            if not b.any():
                new_tri.append(tri[e])
                new_reg.append(reg[e])
                continue
            v0, v1, v2 = tri[e]
            m0 = mid_id[elm[e, 0]]
            child_a = (v2, v0, m0)   # refinement edge (v2, v0) = local 2
            child_b = (v1, v2, m0)   # refinement edge (v1, v2) = local 1
            if b[2]:
                m2 = mid_id[elm[e, 2]]
                new_tri.append((m0, v2, m2))
                new_tri.append((v0, m0, m2))
                new_reg.extend([reg[e], reg[e]])
            else:
                new_tri.append(child_a)
                new_reg.append(reg[e])
            if b[1]:
                m1 = mid_id[elm[e, 1]]
                new_tri.append((m0, v1, m1))
                new_tri.append((v2, m0, m1))
                new_reg.extend([reg[e], reg[e]])
            else:
                new_tri.append(child_b)
                new_reg.append(reg[e])
        self.tri = np.array(new_tri, dtype=np.int64)
        self._invalidate()
        self.recompute_volumes()
        return self

    # -- interface expansion ---------------------------------------------------------

    def expand_interface(self, layers: int = 1) -> "CoupledMesh":
        """Grow the atomistic region by whole lattice layers.

        Elements inside the first retained template ring are discarded;
        the zone is rebuilt from a larger micro-triangulation, graded gap
        rings, and a zip onto the retained seam chain; new gap nodes are
        Laplacian-smoothed (5 sweeps).
        """
        if layers < 1:
            raise MeshError("expansion needs layers >= 1")
        Na2 = self.Ra + int(layers)
        if Na2 + self.W + 2 > self.R / 2:
            raise MeshError("expansion would cross half the domain radius")
        # retain from the first template ring that leaves a zip band at
        # least half as thick as its own tangential spacing; thinner bands
        # produce slivers that smoothing cannot fix (the seam is pinned)
        rho_keep = None
        for rho, n in sorted(self.ladder):
            if rho < Na2 + self.W + 0.5:
                continue
            if rho - (Na2 + self.W) >= 0.55 * (rho / (6 * n)) * 6:
                rho_keep = rho
                break
        if rho_keep is None:
            raise MeshError("no retained ring available for expansion")

        cent_rad = cartesian_hexnorm(self.xy[self.tri].mean(axis=1))
        keep = cent_rad > rho_keep - 1e-9
        kept_tri = self.tri[keep]
        kept_nodes = np.unique(kept_tri)

        # seam: boundary edges of the kept submesh lying on ring rho_keep
        pairs = np.sort(kept_tri[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2),
                        axis=1)
        uniq, counts = np.unique(pairs, axis=0, return_counts=True)
        bnd = uniq[counts == 1]
        mid_rad = cartesian_hexnorm(
            0.5 * (self.xy[bnd[:, 0]] + self.xy[bnd[:, 1]]))
        seam_edges = bnd[mid_rad <= rho_keep + 1e-6]
        seam_nodes_old = np.unique(seam_edges)
        if len(seam_nodes_old) < 6:
            raise MeshError("degenerate seam chain during expansion")

        micro = TriangularLattice(self.k, Na2 + self.W)
        rings = micro.site_rings()
        new_xy = [micro.xy]
        new_site = [np.arange(micro.S, dtype=np.int64)]
        new_kind = [np.where(rings < Na2, KIND_CORE,
                             np.where(rings == Na2, KIND_INTERFACE,
                                      KIND_CONTINUUM)).astype(np.int8)]
        new_tris = [micro.tri.copy()]
        chain = _sort_ccw(np.where(rings == Na2 + self.W)[0], micro.xy)
        chain_xy = micro.xy[chain]
        nxt = micro.S

        n_keep = next(n for rho, n in sorted(self.ladder)
                      if abs(rho - rho_keep) < 1e-9)
        gap = gap_rings(Na2 + self.W, Na2 + self.W, rho_keep, n_keep,
                        self.grading_center, self.beta)
        gap_ids_all = []
        for rho, n in gap:
            pts = hex_ring_points(rho, n)
            ids = np.arange(nxt, nxt + len(pts), dtype=np.int64)
            nxt += len(pts)
            new_xy.append(pts)
            new_site.append(np.full(len(pts), -1, dtype=np.int64))
            new_kind.append(np.full(len(pts), KIND_CONTINUUM, dtype=np.int8))
            new_tris.append(zip_band(chain, chain_xy, ids, pts))
            gap_ids_all.append(ids)
            chain, chain_xy = ids, pts

        # remap kept nodes to the tail of the new node array
        remap = np.full(self.n_nodes, -1, dtype=np.int64)
        remap[kept_nodes] = nxt + np.arange(len(kept_nodes))
        kept_xy = self.xy[kept_nodes]
        new_xy.append(kept_xy)
        new_site.append(np.full(len(kept_nodes), -1, dtype=np.int64))
        new_kind.append(np.full(len(kept_nodes), KIND_CONTINUUM,
                                dtype=np.int8))
        seam_ids = remap[seam_nodes_old]
        seam_order = _sort_ccw(seam_ids, np.vstack(new_xy))
        band = zip_band(chain, chain_xy,
                        seam_order, np.vstack(new_xy)[seam_order])
        new_tris.append(band)
        new_tris.append(remap[kept_tri])

        xy = np.vstack(new_xy)
        tri = np.vstack(new_tris)
        n_zone = len(tri) - len(kept_tri)

        # tangential Laplacian smoothing of the gap-ring nodes: average
        # the neighbours, then project radially back onto the node's own
        # ring (hexnorm is 1-homogeneous, so the scaled point lies on the
        # exact hexagon).  Pure averaging would drag the rings toward the
        # denser lattice side and flatten corner triangles.
        if gap_ids_all:
            movable = np.concatenate(gap_ids_all)
            mov_rho = np.concatenate(
                [np.full(len(ids), rho)
                 for ids, (rho, _) in zip(gap_ids_all, gap)])
            zone_tri = tri[:n_zone]
            pairs = zone_tri[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
            both = np.vstack([pairs, pairs[:, ::-1]])
            order = np.argsort(both[:, 0], kind="stable")
            srt = both[order]
            starts = np.searchsorted(srt[:, 0], np.arange(len(xy) + 1))
            for _ in range(5):
                upd = xy.copy()
                for nd, rho in zip(movable, mov_rho):
                    nb = np.unique(srt[starts[nd]:starts[nd + 1], 1])
                    p = xy[nb].mean(axis=0)
                    upd[nd] = p * (rho / cartesian_hexnorm(p[None])[0])
                xy = upd
        quality = triangles_min_angles(xy, tri[:n_zone]).min() \
            if n_zone else 90.0
        if quality < 15.0 - 1e-9:
            raise MeshError(f"gap retriangulation failed: min angle "
                            f"{quality:.2f} deg < 15 deg")

        self.micro = micro
        self.Ra = Na2
        self.xy = xy
        self.site = np.concatenate(new_site)
        self.kind = np.concatenate(new_kind)
        self.hexrad = cartesian_hexnorm(xy)
        self.tri = tri
        self.ladder = [(rho, n) for rho, n in self.ladder
                       if rho >= rho_keep - 1e-9]
        self._invalidate()
        self.recompute_volumes()
        # retained elements keep their refinement-edge state; only the
        # rebuilt zone gets a fresh assignment
        self._assign_nvb(np.arange(n_zone))
        return self

    # -- domain enlargement -----------------------------------------------------------

    def enlarge_domain(self, shells: NestedShells) -> "CoupledMesh":
        """Append the next pre-generated annulus; existing arrays are
        pure prefixes of the enlarged ones."""
        k = None
        for i, rad in enumerate(shells.radii):
            if abs(rad - self.R) < 1e-9:
                k = i
                break
        if k is None:
            raise MeshError(f"current R={self.R} is not a shell radius")
        if k >= len(shells.segments):
            raise MeshError("domain already at maximum shell radius")
        chain_ids = np.where(self.boundary_node_mask())[0]
        chain = _sort_ccw(chain_ids, self.xy)
        chain_xy = self.xy[chain]
        nxt = self.n_nodes
        xs, ss, ks, ts = [], [], [], []
        for rho, n in shells.segments[k]:
            pts = hex_ring_points(rho, n)
            ids = np.arange(nxt, nxt + len(pts), dtype=np.int64)
            nxt += len(pts)
            xs.append(pts)
            ss.append(np.full(len(pts), -1, dtype=np.int64))
            ks.append(np.full(len(pts), KIND_CONTINUUM, dtype=np.int8))
            ts.append(zip_band(chain, chain_xy, ids, pts))
            chain, chain_xy = ids, pts
        m_old = len(self.tri)
        self.xy = np.vstack([self.xy] + xs)
        self.site = np.concatenate([self.site] + ss)
        self.kind = np.concatenate([self.kind] + ks)
        self.hexrad = cartesian_hexnorm(self.xy)
        self.tri = np.vstack([self.tri] + ts)
        self.R = shells.radii[k + 1]
        self.ladder = self.ladder + shells.segments[k]
        self._invalidate()
        self.recompute_volumes()
        self._assign_nvb(np.arange(m_old, len(self.tri)))
        return self

    # -- serialization ------------------------------------------------------------------

    def dump_json(self, path) -> None:
        data = {
            "k": self.k, "Ra": self.Ra, "W": self.W, "R": self.R,
            "beta": self.beta, "grading_center": self.grading_center,
            "ladder": [[float(r), int(n)] for r, n in self.ladder],
            "nodes": self.xy.tolist(),
            "kind": self.kind.tolist(),
            "site": self.site.tolist(),
            "elements": self.tri.tolist(),
            "region": self.region.tolist(),
            "omega": self.omega.tolist(),
        }
        with open(path, "w") as fh:
            json.dump(data, fh)

    @classmethod
    def load_json(cls, path) -> "CoupledMesh":
        with open(path) as fh:
            d = json.load(fh)
        micro = TriangularLattice(d["k"], d["Ra"] + d["W"])
        mesh = cls(d["k"], d["Ra"], d["W"], d["R"], d["beta"],
                   d["grading_center"], micro,
                   np.array(d["nodes"], dtype=float),
                   np.array(d["kind"], dtype=np.int8),
                   np.array(d["site"], dtype=np.int64),
                   np.array(d["elements"], dtype=np.int64),
                   [(r, n) for r, n in d["ladder"]])
        return mesh

    def to_svg(self, path, width: int = 900) -> None:
        """Render elements colored by region (SVG, no external assets)."""
        lo = self.xy.min(axis=0) - 1.0
        hi = self.xy.max(axis=0) + 1.0
        span = hi - lo
        scale = width / span[0]
        hgt = int(np.ceil(span[1] * scale))
        fill = {REGION_A: "#7aa6d9", REGION_I: "#e8a24b", REGION_C: "#d9d9d9"}
        parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
                 f'height="{hgt}" viewBox="0 0 {width} {hgt}">',
                 '<rect width="100%" height="100%" fill="white"/>']
        pts = (self.xy - lo) * scale
        pts[:, 1] = hgt - pts[:, 1]
        for e in range(len(self.tri)):
            p = pts[self.tri[e]]
            d = " ".join(f"{q[0]:.2f},{q[1]:.2f}" for q in p)
            parts.append(f'<polygon points="{d}" fill="{fill[self.region[e]]}"'
                         f' stroke="#555" stroke-width="0.3"/>')
        atoms = pts[self.kind <= KIND_INTERFACE]
        for q in atoms:
            parts.append(f'<circle cx="{q[0]:.2f}" cy="{q[1]:.2f}" r="1.2" '
                         f'fill="#1f4e93"/>')
        parts.append("</svg>")
        with open(path, "w") as fh:
            fh.write("\n".join(parts))
