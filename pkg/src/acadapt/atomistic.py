"""Assembly of the full atomistic energy, its gradient and Hessian.

States are arrays y of shape (S, 2): deformed positions of the real
sites of a TriangularLattice. The total energy is the sum of the
normalized site energies; sites near the domain boundary or next to a
vacancy simply carry reduced stencils.

Sites are processed in groups of equal direction mask so the potential
evaluators can run vectorized.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .lattice import TriangularLattice
from .potential import EamPotential


def mask_groups(lattice: TriangularLattice):
    """Yield (active-direction tuple, site index array) per mask value."""
    masks = lattice.range_mask
    out = []
    for mask in np.unique(masks):
        if mask == 0:
            continue
        dirs = tuple(j for j in range(6) if mask >> j & 1)
        out.append((dirs, np.nonzero(masks == mask)[0]))
    return out


def _stencil(lattice, y, sites, dirs):
    heads = lattice.nbr[np.ix_(sites, dirs)]
    return y[heads] - y[sites][:, None, :], heads


def energy(lattice: TriangularLattice, pot: EamPotential, y: np.ndarray) -> float:
    total = 0.0
    for dirs, sites in mask_groups(lattice):
        g, _ = _stencil(lattice, y, sites, dirs)
        total += float(np.sum(pot.value(g)))
    return total


def gradient(lattice: TriangularLattice, pot: EamPotential, y: np.ndarray) -> np.ndarray:
    out = np.zeros_like(y)
    for dirs, sites in mask_groups(lattice):
        g, heads = _stencil(lattice, y, sites, dirs)
        dv = pot.gradient(g)
        np.add.at(out, heads.ravel(), dv.reshape(-1, 2))
        out[sites] -= dv.sum(axis=1)
    return out


def energy_and_gradient(lattice, pot, y):
    total = 0.0
    out = np.zeros_like(y)
    for dirs, sites in mask_groups(lattice):
        g, heads = _stencil(lattice, y, sites, dirs)
        val, dv = pot.value_and_gradient(g)
        total += float(np.sum(val))
        np.add.at(out, heads.ravel(), dv.reshape(-1, 2))
        out[sites] -= dv.sum(axis=1)
    return total, out


def hessian(lattice: TriangularLattice, pot: EamPotential, y: np.ndarray) -> sp.csr_matrix:
    """Sparse (2S, 2S) second derivative of the total energy."""
    S = lattice.S
    rows, cols, vals = [], [], []

    def emit(r_idx, c_idx, blocks):
        # r_idx, c_idx: (n,) site indices; blocks: (n, 2, 2)
        n = len(r_idx)
        rr = (2 * r_idx[:, None, None] + np.arange(2)[None, :, None]).repeat(2, axis=2)
        cc = (2 * c_idx[:, None, None] + np.arange(2)[None, None, :]).repeat(2, axis=1)
        rows.append(rr.reshape(-1))
        cols.append(cc.reshape(-1))
        vals.append(blocks.reshape(n * 4))

    for dirs, sites in mask_groups(lattice):
        g, heads = _stencil(lattice, y, sites, dirs)
        H = pot.hessian(g)  # (n, nd, nd, 2, 2)
        nd = len(dirs)
        Hsum = H.sum(axis=(1, 2))
        emit(sites, sites, Hsum)
        for p in range(nd):
            emit(heads[:, p], sites, -H[:, p, :, :, :].sum(axis=1))
            emit(sites, heads[:, p], -H[:, :, p, :, :].sum(axis=1))
            for q in range(nd):
                emit(heads[:, p], heads[:, q], H[:, p, q])

    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    M = sp.coo_matrix((vals, (rows, cols)), shape=(2 * S, 2 * S))
    return M.tocsr()


def p1_gradient_gram(lattice: TriangularLattice, tri=None, points=None) -> sp.csr_matrix:
    """Gram matrix of the gradient seminorm on the micro-triangulation.

    v -> sum_T |T| |grad I_a v|_F^2 as a sparse quadratic form over the
    stacked (2S,) displacement vector. Both displacement components see
    the same scalar P1 stiffness, assembled here directly.
    """
    tri = lattice.tri if tri is None else tri
    if points is None:
        points = lattice.hom_xy if tri.max() >= lattice.S else lattice.xy
    p = np.asarray(points, dtype=float)
    nv = len(p)
    e1 = p[tri[:, 1]] - p[tri[:, 0]]
    e2 = p[tri[:, 2]] - p[tri[:, 0]]
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    area = 0.5 * np.abs(det)
    # gradients of the three barycentric functions
    g0 = np.stack([(e1[:, 1] - e2[:, 1]) / det, (e2[:, 0] - e1[:, 0]) / det], axis=1)
    g1 = np.stack([e2[:, 1] / det, -e2[:, 0] / det], axis=1)
    g2 = np.stack([-e1[:, 1] / det, e1[:, 0] / det], axis=1)
    grads = np.stack([g0, g1, g2], axis=1)  # (T, 3, 2)
    loc = np.einsum("tic,tjc->tij", grads, grads) * area[:, None, None]
    rows = np.repeat(tri, 3, axis=1).reshape(-1)
    cols = np.tile(tri, (1, 3)).reshape(-1)
    K = sp.coo_matrix((loc.reshape(-1), (rows, cols)), shape=(nv, nv)).tocsr()
    return sp.kron(K, sp.eye(2), format="csr")
