"""Piecewise-constant stress fields and midpoint-continuous corrections.

Three per-element stress tensors are assembled:

* an atomistic stress on the micro-triangulation: every active bond is
  an edge of the triangulation and carries its net conjugate force; the
  bond tensor ``f ⊗ a`` is attributed to each adjacent triangle with
  weight ``1 / (n_adjacent * |T|)``, which makes the first-variation
  identity ``<dE, v> = sum_T |T| sigma_T : grad_T v`` exact for every
  P1 test function,
* a Cauchy-Born stress ``dW(grad y|_T)`` on any triangulation,
* the hybrid stress of a coupled model: lattice-bond part (core
  stencils plus reconstruction chain-rule forces of the interface
  atoms) plus ``omega_T / |T|`` times the Cauchy-Born stress,
  satisfying the same identity against the coupled first variation.

A stress field is discretely divergence-free when the weighted sum
``sum_T |T| sigma_T : grad phi_z`` vanishes for every interior nodal
hat function.  The fields that can be added to a stress without
changing that property are exactly the rotated gradients ``grad(c) J``
of vector-valued functions continuous at edge midpoints; the
correction step exploits this gauge freedom to pull the hybrid stress
toward the (overlap-averaged) atomistic stress on the partially
weighted interface elements without disturbing the equilibrium
residual.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .coupling import CoupledEnergyModel, CouplingError
from .geometry import batch_triangle_overlap, overlap_area
from .lattice import DIRECTIONS, TriangularLattice
from .mesh import KIND_INTERFACE, REGION_I, CoupledMesh
from .potential import EamPotential
from . import atomistic

__all__ = [
    "StressField",
    "CrCorrection",
    "atomistic_stress",
    "continuum_stress",
    "coupling_stress",
    "div_free_check",
    "cr_rotated_gradient",
    "overlap_average",
    "average_onto",
    "correction_elements",
    "correction_edges",
    "correct_stress",
    "identity_residual",
]

#: 90-degree rotation used to turn midpoint-continuous gradients into
#: divergence-free tensor fields.
ROT90 = np.array([[0.0, -1.0], [1.0, 0.0]])


@dataclass
class StressField:
    """A 2x2 tensor per element of a fixed triangulation."""

    points: np.ndarray       # (n, 2)
    tri: np.ndarray          # (m, 3)
    per_element: np.ndarray  # (m, 2, 2)
    areas: np.ndarray        # (m,)
    label: str = ""

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["element", "s00", "s01", "s10", "s11"])
            for e, s in enumerate(self.per_element):
                w.writerow([e, repr(s[0, 0]), repr(s[0, 1]),
                            repr(s[1, 0]), repr(s[1, 1])])


@dataclass
class CrCorrection:
    """Midpoint-continuous correction c with its frozen-edge mask."""

    edges: np.ndarray          # (E, 2) node pairs, sorted per row
    c: np.ndarray              # (E, 2) midpoint values, zero where frozen
    free_mask: np.ndarray      # (E,) True where c was a DOF
    objective_before: float
    objective_after: float
    rank_deficient: bool


def _triangle_areas(points, tri):
    e1 = points[tri[:, 1]] - points[tri[:, 0]]
    e2 = points[tri[:, 2]] - points[tri[:, 0]]
    return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])


def _shape_grads(points, tri):
    e1 = points[tri[:, 1]] - points[tri[:, 0]]
    e2 = points[tri[:, 2]] - points[tri[:, 0]]
    det = (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])[:, None]
    g1 = np.column_stack([e2[:, 1], -e2[:, 0]]) / det
    g2 = np.column_stack([-e1[:, 1], e1[:, 0]]) / det
    return np.stack([-g1 - g2, g1, g2], axis=1)


def _edge_table(tri, n_points):
    """Unique sorted edges, adjacency counts, and their sorted codes."""
    pairs = np.sort(tri[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    edges, counts = np.unique(pairs, axis=0, return_counts=True)
    codes = edges[:, 0].astype(np.int64) * n_points + edges[:, 1]
    return edges, counts, codes


def _edge_index(codes, lo, hi, n_points, what):
    bc = lo.astype(np.int64) * n_points + hi
    idx = np.searchsorted(codes, bc)
    ok = (idx < len(codes)) & (codes[np.minimum(idx, len(codes) - 1)] == bc)
    if not np.all(ok):
        k = int(np.argmin(ok))
        raise CouplingError(
            f"{what} ({int(lo[k])}, {int(hi[k])}) is not an edge of the "
            "triangulation (was an interface-zone element refined?)")
    return idx


def _scatter_bonds(tri, areas, n_points, tails, heads, dirs, forces):
    """Per-element tensor from bond forces.

    Each undirected bond contributes ``F ⊗ a / (n_adjacent * |T|)`` to
    every adjacent element: summed over the adjacent elements,
    ``|T| sigma_T : grad v`` then reproduces ``F . (v(head) - v(tail))``
    exactly for P1 test functions, because the tangential derivative of
    v along the bond is the same seen from either side.
    """
    edges, counts, codes = _edge_table(tri, n_points)
    E = len(edges)
    lo = np.minimum(tails, heads)
    hi = np.maximum(tails, heads)
    sign = np.where(tails < heads, 1.0, -1.0)
    idx = _edge_index(codes, lo, hi, n_points, "bond")
    F = np.zeros((E, 2))
    np.add.at(F, idx, sign[:, None] * forces)
    dcan = np.where(sign > 0, dirs, (dirs + 3) % 6)
    dir_edge = np.zeros(E, dtype=np.int64)
    dir_edge[idx] = dcan          # geometric direction lo -> hi: unique
    avec = DIRECTIONS[dir_edge]

    m = len(tri)
    pairs = np.sort(tri[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    el_ids = np.repeat(np.arange(m), 3)
    eidx = _edge_index(codes, pairs[:, 0], pairs[:, 1], n_points,
                       "element edge")
    w = 1.0 / (counts[eidx] * areas[el_ids])
    contrib = (w[:, None, None] * F[eidx][:, :, None]
               * avec[eidx][:, None, :])
    out = np.zeros((m, 2, 2))
    np.add.at(out, el_ids, contrib)
    return out


def atomistic_stress(lattice: TriangularLattice, pot: EamPotential,
                     y: np.ndarray) -> StressField:
    """Per-triangle stress of the atomistic energy on the micro-mesh."""
    y = np.asarray(y, dtype=float)
    tri = lattice.tri
    areas = _triangle_areas(lattice.xy, tri)
    tails, heads, dirs, forces = [], [], [], []
    for ds, sites in atomistic.mask_groups(lattice):
        g = y[lattice.nbr[np.ix_(sites, ds)]] - y[sites][:, None, :]
        dv = pot.gradient(g)
        for k, d in enumerate(ds):
            tails.append(sites)
            heads.append(lattice.nbr[sites, d])
            dirs.append(np.full(len(sites), d))
            forces.append(dv[:, k])
    field = _scatter_bonds(tri, areas, lattice.S,
                           np.concatenate(tails), np.concatenate(heads),
                           np.concatenate(dirs), np.concatenate(forces))
    return StressField(lattice.xy, tri, field, areas, "atomistic")


def continuum_stress(model: CoupledEnergyModel, y: np.ndarray) -> StressField:
    """Cauchy-Born stress dW(grad y|_T) on every element of the mesh."""
    mesh = model.mesh
    G = mesh.shape_gradients()
    F = np.einsum("mpi,mpj->mij", np.asarray(y, dtype=float)[mesh.tri], G)
    det = F[:, 0, 0] * F[:, 1, 1] - F[:, 0, 1] * F[:, 1, 0]
    if np.any(det <= 0):
        raise CouplingError(
            f"degenerate element {int(np.argmin(det))}: "
            f"det grad y = {det.min():.3e}")
    P = model.potential.cb_stress_batch(F)
    return StressField(mesh.xy, mesh.tri, P, mesh.area.copy(), "cauchy-born")


def coupling_stress(model: CoupledEnergyModel, y: np.ndarray) -> StressField:
    """Hybrid stress on the coupled mesh.

    Lattice-bond forces (core stencils and interface chain-rule forces)
    land on their adjacent elements; every element additionally carries
    ``omega_T / |T|`` of the Cauchy-Born stress.  The assembled field
    satisfies ``sum_T |T| sigma_T : grad v = <dE(y), v>`` for all P1
    fields v on the mesh, with the raw (no Dirichlet mask) gradient.
    """
    mesh = model.mesh
    y = np.asarray(y, dtype=float)
    pot = model.potential

    tails, heads, dirs, forces = [], [], [], []
    for ds, tl, hd in model.core_groups:
        g = y[hd] - y[tl][:, None, :]
        dv = pot.gradient(g)
        for k, d in enumerate(ds):
            tails.append(tl)
            heads.append(hd[:, k])
            dirs.append(np.full(len(tl), d))
            forces.append(dv[:, k])
    if len(model.ifc_nodes):
        ghat = model._interface_stencils(y)
        dv = pot.gradient(ghat)
        f = np.einsum("arj,ars->asj", dv, model.ifc_C)   # (ni, 6, 2)
        for s in range(6):
            tails.append(model.ifc_nodes)
            heads.append(model.ifc_nbr[:, s])
            dirs.append(np.full(len(model.ifc_nodes), s))
            forces.append(f[:, s])

    field = _scatter_bonds(mesh.tri, mesh.area, mesh.n_nodes,
                           np.concatenate(tails), np.concatenate(heads),
                           np.concatenate(dirs), np.concatenate(forces))

    F = np.einsum("mpi,mpj->mij", y[mesh.tri], mesh.shape_gradients())
    det = F[:, 0, 0] * F[:, 1, 1] - F[:, 0, 1] * F[:, 1, 0]
    cb = mesh.omega > 0
    if np.any(det[cb] <= 0):
        raise CouplingError("degenerate element in hybrid stress assembly")
    P = pot.cb_stress_batch(F[cb])
    field[cb] += (mesh.omega[cb] / mesh.area[cb])[:, None, None] * P
    return StressField(mesh.xy, mesh.tri, field, mesh.area.copy(), "hybrid")


def identity_residual(field: StressField, grad: np.ndarray) -> float:
    """Relative mismatch of sum_T |T| sigma_T : grad v against <g, v>.

    Tested over the full nodal P1 basis: the per-node residual is
    ``sum_T |T| sigma_T grad(phi_z) - g_z``; returns its max norm over
    all nodes, relative to the larger of the two assembled fields.
    """
    G = _shape_grads(field.points, field.tri)
    contrib = np.einsum("m,mij,mpj->mpi", field.areas,
                        field.per_element, G)
    out = np.zeros_like(grad)
    np.add.at(out, field.tri.reshape(-1), contrib.reshape(-1, 2))
    scale = max(float(np.abs(out).max()), float(np.abs(grad).max()), 1e-30)
    return float(np.abs(out - grad).max()) / scale


def div_free_check(field: StressField) -> float:
    """max over interior nodal hats v of | sum_T |T| sigma_T : grad v |.

    Nodes incident to a single-element edge (domain boundary or hole
    rim) are excluded: constant fields are divergence-free only against
    hats with interior support.
    """
    edges, counts, _ = _edge_table(field.tri, len(field.points))
    boundary = np.zeros(len(field.points), dtype=bool)
    boundary[edges[counts == 1].reshape(-1)] = True
    G = _shape_grads(field.points, field.tri)
    contrib = np.einsum("m,mij,mpj->mpi", field.areas,
                        field.per_element, G)
    out = np.zeros((len(field.points), 2))
    np.add.at(out, field.tri.reshape(-1), contrib.reshape(-1, 2))
    interior = ~boundary
    if not np.any(interior):
        return 0.0
    return float(np.linalg.norm(out[interior], axis=1).max())


# ---------------------------------------------------------------------------
# midpoint-continuous corrections
# ---------------------------------------------------------------------------


def cr_rotated_gradient(mesh: CoupledMesh, c: np.ndarray) -> np.ndarray:
    """Per-element rotated gradient grad(c) J of midpoint values c.

    c has shape (E, 2) over mesh.edges().edges; on each element the
    interpolant matches c at its three edge midpoints.
    """
    ed = mesh.edges()
    G = mesh.shape_gradients()              # (m, 3, 2)
    out = np.zeros((mesh.n_elements, 2, 2))
    for p in range(3):
        f = ed.el_edge[:, (p + 1) % 3]      # edge opposite vertex p
        h = (-2.0 * G[:, p]) @ ROT90        # J^T grad(chi_p)
        out += c[f][:, :, None] * h[:, None, :]
    return out


def overlap_average(src_points: np.ndarray, src_tri: np.ndarray,
                    src_values: np.ndarray, dst_points: np.ndarray,
                    dst_tri: np.ndarray, dst_ids: np.ndarray,
                    dst_areas: np.ndarray | None = None) -> np.ndarray:
    """Area-weighted overlap average of a per-triangle field.

    For each requested destination triangle T the result is
    ``sum_{T' in src} |T' ∩ T| / |T| * value(T')`` with overlaps from
    exact convex clipping; the source triangulation must cover every
    requested triangle, else CouplingError.
    """
    from scipy.spatial import cKDTree
    src_values = np.asarray(src_values)
    ids = np.asarray(dst_ids, dtype=np.int64)
    n = len(ids)
    if n == 0:
        return np.zeros((0,) + src_values.shape[1:])
    sxy = src_points[src_tri]               # (ms, 3, 2)
    scent = sxy.mean(axis=1)
    srad = np.linalg.norm(sxy - scent[:, None, :], axis=2).max(axis=1)
    smax = float(srad.max()) if len(srad) else 0.0
    dxy = dst_points[dst_tri[ids]]          # (n, 3, 2)
    dcent = dxy.mean(axis=1)
    drad = np.linalg.norm(dxy - dcent[:, None, :], axis=2).max(axis=1)
    if dst_areas is not None:
        areas = np.asarray(dst_areas, dtype=float)
    else:
        v1 = dxy[:, 1] - dxy[:, 0]
        v2 = dxy[:, 2] - dxy[:, 0]
        areas = 0.5 * np.abs(v1[:, 0] * v2[:, 1] - v1[:, 1] * v2[:, 0])

    # candidate pairs, bucketing the source by circumradius so tiny
    # destination triangles never query with the largest element's
    # radius (that would make the pair list quadratic)
    smin = max(float(srad.min()), 1e-12) if len(srad) else 1e-12
    nclass = max(1, int(np.ceil(np.log2(max(smax / smin, 1.0)))) + 1)
    klass = np.minimum(np.log2(np.maximum(srad / smin, 1.0)).astype(np.int64),
                       nclass - 1)
    drows, srows = [], []
    for kc in range(nclass):
        members = np.where(klass == kc)[0]
        if len(members) == 0:
            continue
        rmax = float(srad[members].max())
        tree = cKDTree(scent[members])
        balls = tree.query_ball_point(dcent, drad + rmax + 1e-9)
        reps = np.fromiter((len(b) for b in balls), dtype=np.int64, count=n)
        if reps.sum() == 0:
            continue
        drows.append(np.repeat(np.arange(n), reps))
        srows.append(members[np.concatenate(balls).astype(np.int64)])
    if drows:
        drow = np.concatenate(drows)
        srow = np.concatenate(srows)
    else:
        drow = np.zeros(0, dtype=np.int64)
        srow = np.zeros(0, dtype=np.int64)
    near = (np.linalg.norm(scent[srow] - dcent[drow], axis=1)
            <= drad[drow] + srad[srow] + 1e-9)
    drow, srow = drow[near], srow[near]

    total = np.zeros(n)
    ws = []
    chunk = 200_000
    for lo in range(0, len(drow), chunk):
        hi = min(lo + chunk, len(drow))
        ws.append(batch_triangle_overlap(dxy[drow[lo:hi]], sxy[srow[lo:hi]]))
    w = np.concatenate(ws) if ws else np.zeros(0)
    pos = w > 0
    drow, srow, w = drow[pos], srow[pos], w[pos]
    np.add.at(total, drow, w)
    bad = np.abs(total - areas) > 1e-6 * areas
    if np.any(bad):
        k = int(np.argmax(bad))
        raise CouplingError(
            f"triangle {int(ids[k])} not covered by the source field "
            f"(covered {total[k]:.3e} of {areas[k]:.3e}; "
            f"{int(bad.sum())} uncovered in total)")
    acc = np.zeros((n,) + src_values.shape[1:])
    extra = (1,) * (src_values.ndim - 1)
    np.add.at(acc, drow, w.reshape(-1, *extra) * src_values[srow])
    return acc / areas.reshape(-1, *extra)


def average_onto(src: StressField, mesh: CoupledMesh,
                 elements: np.ndarray) -> np.ndarray:
    """Overlap average of a stress field onto the given mesh elements."""
    elements = np.asarray(elements)
    return overlap_average(src.points, src.tri, src.per_element,
                           mesh.xy, mesh.tri, elements,
                           dst_areas=mesh.area[elements])


def correction_elements(mesh: CoupledMesh) -> np.ndarray:
    """Elements whose stress the interface reconstruction can distort.

    Boolean mask: partially weighted elements plus every element with
    an interface-atom vertex.  Outside this set the hybrid stress
    already equals the pure bond stress (atomistic side) or the exact
    Cauchy-Born stress (continuum side) element by element.
    """
    ifc = mesh.kind == KIND_INTERFACE
    return (mesh.region == REGION_I) | ifc[mesh.tri].any(axis=1)


def correction_edges(mesh: CoupledMesh, sel: np.ndarray | None = None
                     ) -> np.ndarray:
    """Edges all of whose adjacent elements lie in the correction set.

    Midpoint values supported on these edges change the stress of
    selection elements only, so a correction built on them leaves the
    field outside the selection bit-identical.
    """
    ed = mesh.edges()
    if sel is None:
        sel = correction_elements(mesh)
    grow = np.append(np.asarray(sel, dtype=bool), False)    # -1 -> False
    adj = grow[ed.edge_el]
    return adj[:, 0] & np.where(ed.edge_el[:, 1] >= 0, adj[:, 1],
                                adj[:, 0])


def correct_stress(model: CoupledEnergyModel, y: np.ndarray,
                   sigma_a: StressField, sigma_h: StressField,
                   reg: float = 1e-12):
    """Gauge-correct the hybrid stress toward the atomistic stress.

    Minimizes ``sum_{T in selection} |T| * || sigma_a_avg(T) -
    (sigma_h(T) + grad(c) J|_T) ||_F^2`` over midpoint values c on the
    edges interior to the selection (all other edges frozen at zero),
    via the normal equations with a small diagonal regularization.
    Because zero is feasible the objective never increases, and because
    the free edges are interior the corrected field is bit-identical to
    the input outside the selection.  DOFs on edges that never enter
    the objective keep their minimum-norm value of zero; such
    structural rank deficiency is reported, not raised.  Returns the
    corrected field and the correction.
    """
    mesh = model.mesh
    ed = mesh.edges()
    E = len(ed.edges)
    sel = correction_elements(mesh)
    free_mask = correction_edges(mesh, sel)
    free_edges = np.where(free_mask)[0]
    dof_of = np.full(E, -1, dtype=np.int64)
    dof_of[free_edges] = np.arange(len(free_edges))
    ndof = 2 * len(free_edges)

    Ti = np.where(sel)[0]
    sbar = average_onto(sigma_a, mesh, Ti)
    mis0 = sbar - sigma_h.per_element[Ti]
    w = mesh.area[Ti]
    obj_before = float(np.sum(w * np.sum(mis0 ** 2, axis=(1, 2))))

    G = mesh.shape_gradients()[Ti]
    A = np.zeros((4 * len(Ti), ndof))
    b = np.zeros(4 * len(Ti))
    sw = np.sqrt(w)
    touched = np.zeros(E, dtype=bool)
    for t, e in enumerate(Ti):
        for p in range(3):
            f = ed.el_edge[e, (p + 1) % 3]
            touched[f] = True
            d = dof_of[f]
            if d < 0:
                continue
            h = ROT90.T @ (-2.0 * G[t, p])
            for i in range(2):
                A[4 * t + 2 * i: 4 * t + 2 * i + 2, 2 * d + i] += sw[t] * h
        b[4 * t: 4 * t + 4] = sw[t] * mis0[t].reshape(-1)

    rank_def = bool(np.any(free_mask & ~touched))
    if ndof:
        N = A.T @ A + reg * np.eye(ndof)
        cvec = scipy.linalg.solve(N, A.T @ b, assume_a="pos")
    else:
        cvec = np.zeros(0)
    c = np.zeros((E, 2))
    if ndof:
        c[free_edges] = cvec.reshape(-1, 2)

    grad_cJ = cr_rotated_gradient(mesh, c)
    corrected = StressField(mesh.xy, mesh.tri,
                            sigma_h.per_element + grad_cJ,
                            sigma_h.areas.copy(), "hybrid+correction")
    mis1 = sbar - corrected.per_element[Ti]
    obj_after = float(np.sum(w * np.sum(mis1 ** 2, axis=(1, 2))))
    corr = CrCorrection(ed.edges.copy(), c, free_mask,
                        obj_before, obj_after, rank_def)
    return corrected, corr
