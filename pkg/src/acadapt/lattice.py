"""Triangular reference lattice with point defects.

Geometry conventions used throughout the package:

* Lattice sites are indexed by integer pairs (m, n) with Cartesian
  position x = A (m, n)^T, where A = [[1, 1/2], [0, sqrt(3)/2]].
* The six nearest-neighbour directions are a_1 = (1, 0)^T rotated
  clockwise by multiples of pi/3; in integer coordinates they are the
  rows of STEPS below, and a_{j+3} = -a_j.
* The computational domain is the hexagon aligned with the lattice
  directions: sites with hexnorm(m, n) = max(|m|, |n|, |m+n|) <= N.
  Its boundary passes through lattice sites, so the atomistic region
  and the continuum mesh can share the interface exactly.
* Vacancies sit on the e_1 axis: k even removes {-k/2, ..., k/2-1} e_1,
  k odd removes {-(k-1)/2, ..., (k-1)/2} e_1.

The micro-triangulation splits every unit cell into an "up" triangle
{xi, xi+e1, xi+e2} and a "down" triangle {xi, xi-e1, xi-e2}; cells that
touch a vacancy are omitted, leaving a hexagonal hole per vacancy.
"""

from __future__ import annotations

import csv

import numpy as np

SQRT3 = float(np.sqrt(3.0))

#: Lattice basis matrix; site (m, n) sits at LATTICE_A @ (m, n).
LATTICE_A = np.array([[1.0, 0.5], [0.0, SQRT3 / 2.0]])
DET_A = SQRT3 / 2.0

#: Rotation by pi/3, clockwise. DIRECTIONS[j] = ROT60_CW^j @ (1, 0).
ROT60_CW = np.array([[0.5, SQRT3 / 2.0], [-SQRT3 / 2.0, 0.5]])

#: Integer steps of the six neighbour directions a_1..a_6 (clockwise).
STEPS = np.array(
    [[1, 0], [1, -1], [0, -1], [-1, 0], [-1, 1], [0, 1]], dtype=np.int64
)

#: Cartesian unit vectors of the six directions, shape (6, 2).
DIRECTIONS = STEPS @ LATTICE_A.T

#: Canonical bond directions: one per antipodal pair {a_j, -a_j}.
CANONICAL_DIRS = (0, 1, 2)


def hexnorm(mn: np.ndarray) -> np.ndarray:
    """Hexagonal norm max(|m|, |n|, |m+n|) of integer coordinates.

    The unit ball is the hexagon whose six corners are the lattice
    points at Euclidean distance 1 in the directions 0, 60, ..., 300
    degrees.
    """
    mn = np.asarray(mn)
    m = mn[..., 0]
    n = mn[..., 1]
    return np.maximum(np.maximum(np.abs(m), np.abs(n)), np.abs(m + n))


def vacancy_coordinates(k: int) -> np.ndarray:
    """Integer coordinates of the k removed sites on the e_1 axis."""
    if k < 0:
        raise ValueError(f"vacancy count must be nonnegative, got {k}")
    if k == 0:
        return np.zeros((0, 2), dtype=np.int64)
    if k % 2 == 0:
        ms = np.arange(-(k // 2), k // 2)
    else:
        ms = np.arange(-((k - 1) // 2), (k - 1) // 2 + 1)
    out = np.zeros((k, 2), dtype=np.int64)
    out[:, 0] = ms
    return out


class TriangularLattice:
    """Defected triangular lattice truncated to a hexagonal domain.

    Parameters
    ----------
    k : number of vacancies removed along the e_1 axis.
    radius : hexagon circumradius in lattice units; rounded to an
        integer number of lattice layers.

    Attributes
    ----------
    mn : (S, 2) integer coordinates of the real (non-vacancy) sites.
    xy : (S, 2) Cartesian positions.
    nbr : (S, 6) index of the neighbour in direction j, or -1 if that
        direction points at a vacancy or out of the domain.
    range_mask : (S,) uint8 bitmask of active directions.
    bonds : (nb, 2) canonical bonds (tail, head) between real sites,
        each undirected bond stored once; bond_dir gives its direction
        index in 0..2.
    tri : (T, 3) micro-triangulation of the real sites (holes at
        vacancies), vertex indices into the site arrays.
    """

    def __init__(self, k: int, radius: float):
        N = int(round(radius))
        if N < 3:
            raise ValueError(f"domain radius {radius} too small (need >= 3)")
        vac = vacancy_coordinates(k)
        if k > 0 and int(hexnorm(vac).max()) + 2 > N:
            raise ValueError(
                f"radius {radius} cannot contain the defect core plus one "
                f"interaction shell for k={k}"
            )
        self.k = k
        self.radius = float(radius)
        self.N = N
        self.vacancy_mn = vac

        # Enumerate the hexagon row by row in m, then n: deterministic
        # site order independent of construction path.
        m_grid, n_grid = np.meshgrid(
            np.arange(-N, N + 1), np.arange(-N, N + 1), indexing="ij"
        )
        mn_all = np.stack([m_grid.ravel(), n_grid.ravel()], axis=1)
        mn_all = mn_all[hexnorm(mn_all) <= N]

        vac_set = {tuple(v) for v in vac}
        is_vac = np.fromiter(
            (tuple(p) in vac_set for p in mn_all), count=len(mn_all), dtype=bool
        )
        self.mn = np.ascontiguousarray(mn_all[~is_vac])
        self.S = len(self.mn)
        self.xy = self.mn @ LATTICE_A.T

        # Dense (2N+1)^2 lookup grid for O(1) neighbour queries.
        side = 2 * N + 1
        grid = np.full((side, side), -1, dtype=np.int64)
        grid[self.mn[:, 0] + N, self.mn[:, 1] + N] = np.arange(self.S)
        self._grid = grid

        self.nbr = np.empty((self.S, 6), dtype=np.int64)
        for j in range(6):
            tgt = self.mn + STEPS[j]
            inside = hexnorm(tgt) <= N
            idx = np.full(self.S, -1, dtype=np.int64)
            t = tgt[inside]
            idx[inside] = grid[t[:, 0] + N, t[:, 1] + N]
            self.nbr[:, j] = idx

        masks = (self.nbr >= 0).astype(np.uint8)
        self.range_mask = np.zeros(self.S, dtype=np.uint8)
        for j in range(6):
            self.range_mask |= masks[:, j] << j
        self.n_neighbors = masks.sum(axis=1).astype(np.int64)

        self.bonds, self.bond_dir = self._collect_bonds(self.nbr)
        self.tri = self._build_triangulation(self._grid, self.mn, holes=True)

        # Homogeneous companion: the same hexagon with vacancies filled
        # back in as "virtual" sites S..S+k-1 (order of vacancy_mn).
        self.hom_xy = np.vstack([self.xy, vac @ LATTICE_A.T]) if k else self.xy
        hom_grid = grid.copy()
        if k:
            hom_grid[vac[:, 0] + N, vac[:, 1] + N] = self.S + np.arange(k)
        self._hom_grid = hom_grid
        hom_mn = np.vstack([self.mn, vac]) if k else self.mn
        self.hom_mn = hom_mn
        self.hom_nbr = np.empty((self.S + k, 6), dtype=np.int64)
        for j in range(6):
            tgt = hom_mn + STEPS[j]
            inside = hexnorm(tgt) <= N
            idx = np.full(self.S + k, -1, dtype=np.int64)
            t = tgt[inside]
            idx[inside] = hom_grid[t[:, 0] + N, t[:, 1] + N]
            self.hom_nbr[:, j] = idx
        self.hom_bonds, self.hom_bond_dir = self._collect_bonds(self.hom_nbr)
        self.hom_tri = self._build_triangulation(hom_grid, hom_mn, holes=False)

        self._extension = None
        self._site_tri = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _collect_bonds(nbr: np.ndarray):
        tails, dirs_, heads = [], [], []
        for j in CANONICAL_DIRS:
            has = nbr[:, j] >= 0
            t = np.nonzero(has)[0]
            tails.append(t)
            heads.append(nbr[t, j])
            dirs_.append(np.full(len(t), j, dtype=np.int64))
        bonds = np.stack(
            [np.concatenate(tails), np.concatenate(heads)], axis=1
        )
        return bonds, np.concatenate(dirs_)

    @staticmethod
    def _build_triangulation(grid, mn, holes: bool):
        N = (grid.shape[0] - 1) // 2
        tris = []
        for sign in (+1, -1):
            # up: {xi, xi+e1, xi+e2}; down: {xi, xi-e1, xi-e2}
            v1 = mn + sign * np.array([1, 0])
            v2 = mn + sign * np.array([0, 1])
            ok = (hexnorm(v1) <= N) & (hexnorm(v2) <= N)
            i0 = grid[mn[ok, 0] + N, mn[ok, 1] + N]
            i1 = grid[v1[ok, 0] + N, v1[ok, 1] + N]
            i2 = grid[v2[ok, 0] + N, v2[ok, 1] + N]
            good = (i0 >= 0) & (i1 >= 0) & (i2 >= 0)
            # both families are already counterclockwise
            tris.append(np.stack([i0[good], i1[good], i2[good]], axis=1))
        return np.vstack(tris)

    # -- queries ---------------------------------------------------------------

    def site_index(self, m: int, n: int) -> int:
        """Dense index of site (m, n), or -1 if vacant / outside."""
        N = self.N
        if max(abs(m), abs(n), abs(m + n)) > N:
            return -1
        return int(self._grid[m + N, n + N])

    def site_rings(self) -> np.ndarray:
        """Hex-norm of every real site (distance to origin in layers)."""
        return hexnorm(self.mn)

    @property
    def site_to_elements(self):
        """CSR-style adjacency: list of element indices per site."""
        if self._site_tri is None:
            flat = self.tri.ravel()
            counts = np.bincount(flat, minlength=self.S)
            offs = np.zeros(self.S + 1, dtype=np.int64)
            np.cumsum(counts, out=offs[1:])
            order = np.argsort(flat, kind="stable")
            data = (np.arange(flat.size, dtype=np.int64) // 3)[order]
            self._site_tri = (offs, data)
        return self._site_tri

    def elements_of_site(self, i: int) -> np.ndarray:
        offs, data = self.site_to_elements
        return data[offs[i]: offs[i + 1]]

    def interpolant_gradient(self, values: np.ndarray, tri=None) -> np.ndarray:
        """Constant gradients of the P1 interpolant, one 2x2 per triangle.

        values has shape (S, 2); returns (T, 2, 2) with rows indexing the
        value components and columns the space derivatives.
        """
        tri = self.tri if tri is None else tri
        v = np.asarray(values, dtype=float)
        p = self.xy if len(v) == self.S else self.hom_xy
        d1 = v[tri[:, 1]] - v[tri[:, 0]]
        d2 = v[tri[:, 2]] - v[tri[:, 0]]
        e1 = p[tri[:, 1]] - p[tri[:, 0]]
        e2 = p[tri[:, 2]] - p[tri[:, 0]]
        # grad = [d1 d2] [e1 e2]^{-1}, batched closed form
        det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        inv00 = e2[:, 1] / det
        inv01 = -e2[:, 0] / det
        inv10 = -e1[:, 1] / det
        inv11 = e1[:, 0] / det
        g = np.empty((len(tri), 2, 2))
        g[:, :, 0] = d1 * inv00[:, None] + d2 * inv10[:, None]
        g[:, :, 1] = d1 * inv01[:, None] + d2 * inv11[:, None]
        return g

    def triangle_areas(self, tri=None) -> np.ndarray:
        tri = self.tri if tri is None else tri
        p = self.xy
        e1 = p[tri[:, 1]] - p[tri[:, 0]]
        e2 = p[tri[:, 2]] - p[tri[:, 0]]
        return 0.5 * np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    # -- extension operator ----------------------------------------------------

    def _extension_system(self):
        """Factorized quadratic system for the vacancy-site values.

        Minimizing sum_b |rho_b . D_b v|^2 over the values at vacancy
        sites decouples into two 1D problems only through the bond
        direction projector, so the system is assembled in the full
        2k unknowns directly.
        """
        k = self.k
        vac_ids = self.S + np.arange(k)
        M = np.zeros((2 * k, 2 * k))
        # rhs is linear in u: build as matrix applying to hom values of
        # real sites. Keep the bond list for reuse.
        touching = []
        for b, (t, h) in enumerate(self.hom_bonds):
            if t >= self.S or h >= self.S:
                touching.append(b)
        touching = np.asarray(touching, dtype=np.int64)
        rows = []
        for b in touching:
            t, h = self.hom_bonds[b]
            e = DIRECTIONS[self.hom_bond_dir[b]]
            rows.append((t, h, e))
        for t, h, e in rows:
            P = np.outer(e, e)
            if t >= self.S and h >= self.S:
                it, ih = t - self.S, h - self.S
                M[2 * it: 2 * it + 2, 2 * it: 2 * it + 2] += P
                M[2 * ih: 2 * ih + 2, 2 * ih: 2 * ih + 2] += P
                M[2 * it: 2 * it + 2, 2 * ih: 2 * ih + 2] -= P
                M[2 * ih: 2 * ih + 2, 2 * it: 2 * it + 2] -= P
            elif t >= self.S:
                it = t - self.S
                M[2 * it: 2 * it + 2, 2 * it: 2 * it + 2] += P
            else:
                ih = h - self.S
                M[2 * ih: 2 * ih + 2, 2 * ih: 2 * ih + 2] += P
        return M, rows, vac_ids

    def extend(self, u: np.ndarray) -> np.ndarray:
        """Extend site values to vacancy sites by minimizing the bond form.

        Returns values on the homogeneous lattice, shape (S + k, 2); the
        first S rows are u unchanged.
        """
        u = np.asarray(u, dtype=float)
        if u.shape != (self.S, 2):
            raise ValueError(f"expected ({self.S}, 2) values, got {u.shape}")
        if self.k == 0:
            return u.copy()
        if self._extension is None:
            self._extension = self._extension_system()
        M, rows, _ = self._extension
        rhs = np.zeros(2 * self.k)
        for t, h, e in rows:
            if t >= self.S and h >= self.S:
                continue
            P = np.outer(e, e)
            if t >= self.S:
                rhs[2 * (t - self.S): 2 * (t - self.S) + 2] += P @ u[h]
            else:
                rhs[2 * (h - self.S): 2 * (h - self.S) + 2] += P @ u[t]
        z = np.linalg.solve(M, rhs)
        return np.vstack([u, z.reshape(self.k, 2)])

    def phi_bond(self, v: np.ndarray, bonds=None, bond_dir=None) -> float:
        """Bond projection form sum_b |rho_b . D_b v|^2.

        By default over the homogeneous bond set; pass self.bonds /
        self.bond_dir for the defected form.
        """
        v = np.asarray(v, dtype=float)
        if bonds is None:
            bonds, bond_dir = self.hom_bonds, self.hom_bond_dir
        d = v[bonds[:, 1]] - v[bonds[:, 0]]
        e = DIRECTIONS[bond_dir]
        return float(np.sum(np.einsum("bi,bi->b", d, e) ** 2))

    def grad_sq_norm(self, v: np.ndarray, tri=None) -> float:
        """Squared L2 norm of the interpolant gradient over the given
        triangulation (defaults to the defected micro-triangulation)."""
        tri = self.tri if tri is None else tri
        g = self.interpolant_gradient(v, tri=tri)
        return float(DET_A / 2.0 * np.sum(g * g))

    # -- io ----------------------------------------------------------------------

    def dump_csv(self, path, interface_sites=None) -> None:
        """Write (index, m, n, x, y, isInterface, rangeMask) rows."""
        marked = np.zeros(self.S, dtype=int)
        if interface_sites is not None:
            marked[np.asarray(list(interface_sites), dtype=np.int64)] = 1
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "m", "n", "x", "y", "isInterface", "rangeMask"])
            for i in range(self.S):
                w.writerow(
                    [
                        i,
                        int(self.mn[i, 0]),
                        int(self.mn[i, 1]),
                        repr(float(self.xy[i, 0])),
                        repr(float(self.xy[i, 1])),
                        int(marked[i]),
                        int(self.range_mask[i]),
                    ]
                )
