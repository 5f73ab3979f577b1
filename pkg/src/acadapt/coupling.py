"""Atomistic/continuum energy coupling with interface bond reconstruction.

The hybrid energy on a :class:`~acadapt.mesh.CoupledMesh` combines three
ingredients:

* full site energies for the atoms strictly inside the interface ring,
* reconstructed site energies for the interface atoms, where finite
  differences pointing into the continuum are replaced by linear
  combinations ``(C_l . Dy)_rho = sum_s C[l, rho, s] * D_s y(l)`` of
  differences that are available near the interface,
* Cauchy-Born elastic energy ``omega_T * W(grad y|_T)`` on the mesh
  elements, weighted by the element volume not already covered by
  atomistic Voronoi cells.

The reconstruction matrices are the minimum-Frobenius-norm solution of a
linear system with two kinds of rows:

* per-bond consistency ``sum_s C[l, rho, s] * s = rho``, which makes the
  reconstruction exact on affine maps (and hence the interface site
  energy exact under any uniform deformation), and
* spurious-interface-force elimination: under a uniform deformation
  ``y = F x`` the assembled residual force at every node near the
  interface is a fixed linear combination of the six bond-force vectors
  of the stretched lattice, with scalar coefficients that are affine in
  C and independent of F.  Driving the antipodal-difference of those
  coefficients to zero removes the residual force for *all* uniform F
  at once.

Energies are reported relative to the applied far-field state
``y^B = B x``: each site/element term is evaluated at ``y`` and at
``y^B`` and the difference is summed.  This keeps the defect-free
ground state at energy zero regardless of the per-site normalization
of the potential, and leaves first and second variations untouched.

All assembly is plain vectorized numpy with a fixed summation order, so
results are bit-reproducible and independent of any thread setting.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .lattice import DET_A, DIRECTIONS, TriangularLattice, hexnorm
from .mesh import KIND_CONTINUUM, KIND_CORE, KIND_INTERFACE, CoupledMesh
from .potential import EamPotential

__all__ = [
    "CouplingError",
    "ReconstructionCoefficients",
    "build_coefficients",
    "CoupledEnergyModel",
    "patch_deformations",
    "ghost_force_norm",
    "interface_energy_mismatch",
]


class CouplingError(ValueError):
    """Reconstruction or energy assembly cannot proceed.

    Subclasses ValueError so that line searches treat a failed trial
    state (e.g. an inverted element) as a rejected step.
    """


def node_of_site(mesh: CoupledMesh) -> np.ndarray:
    """Mesh node id per micro-lattice site (-1 where a site has no node)."""
    out = np.full(mesh.micro.S, -1, dtype=np.int64)
    nodes = np.where(mesh.site >= 0)[0]
    out[mesh.site[nodes]] = nodes
    return out


# ---------------------------------------------------------------------------
# reconstruction coefficients
# ---------------------------------------------------------------------------

#: candidate extra stencil directions for widening, as offsets from the
#: reconstructed direction rho (mod 6), tried in this order.  A per-atom
#: widening level k unlocks the first k offsets that are not already in
#: the base pattern (atomistic-side differences plus the two rotational
#: neighbours of rho); offset 0 admits the direct difference itself.
_WIDEN_OFFSETS = (2, -2, 0)
_MAX_WIDEN = len(_WIDEN_OFFSETS)


@dataclass
class ReconstructionCoefficients:
    """Per-interface-atom bond reconstruction matrices.

    ``C[i]`` is a dense 6x6 matrix over the lattice directions; rows for
    differences that are available atomistically are identity rows, rows
    for continuum-pointing differences carry the reconstruction weights.
    """

    nodes: np.ndarray          # (ni,) mesh node ids, ascending
    sites: np.ndarray          # (ni,) micro site ids
    nbr_nodes: np.ndarray      # (ni, 6) mesh node id of l + a_j
    active: np.ndarray         # (ni, 6) bool, direction present in stencil
    side: np.ndarray           # (ni, 6) bool, difference available atomistically
    C: np.ndarray              # (ni, 6, 6)
    ghost_constrained: bool    # force-elimination rows were imposed
    widen_levels: np.ndarray   # (ni,) per-atom stencil pattern level, 0 = base
    solve_residual: float      # max abs constraint violation of the solve

    @property
    def widen_level(self) -> int:
        """Largest per-atom widening level in use (0 = base pattern)."""
        return int(self.widen_levels.max()) if len(self.widen_levels) else 0

    @property
    def n_interface(self) -> int:
        return len(self.nodes)

    def consistency_residual(self) -> float:
        """max_l max_rho | rho - sum_s C[l,rho,s] s | over active rows."""
        rec = np.einsum("ars,sj->arj", self.C, DIRECTIONS)
        err = np.linalg.norm(rec - DIRECTIONS[None, :, :], axis=2)
        return float(err[self.active].max()) if self.active.any() else 0.0

    def reconstruct(self, d6: np.ndarray) -> np.ndarray:
        """Apply C to per-atom difference stencils d6 of shape (ni, 6, 2)."""
        return np.einsum("ars,asj->arj", self.C, d6)

    def to_json(self, path) -> None:
        """Dump the coefficients for inspection."""
        atoms = []
        for i in range(self.n_interface):
            rows = {}
            for r in range(6):
                if not self.active[i, r]:
                    continue
                nz = {str(s): float(self.C[i, r, s])
                      for s in range(6) if abs(self.C[i, r, s]) > 1e-14}
                rows[str(r)] = nz
            atoms.append({
                "node": int(self.nodes[i]),
                "site": int(self.sites[i]),
                "widen_level": int(self.widen_levels[i]),
                "reconstructed_dirs": [int(r) for r in range(6)
                                       if self.active[i, r]
                                       and not self.side[i, r]],
                "C": rows,
            })
        payload = {
            "n_interface": self.n_interface,
            "ghost_constrained": bool(self.ghost_constrained),
            "widen_level": int(self.widen_level),
            "n_widened_atoms": int(np.count_nonzero(self.widen_levels)),
            "solve_residual": float(self.solve_residual),
            "consistency_residual": self.consistency_residual(),
            "atoms": atoms,
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=1)


def _interface_geometry(mesh: CoupledMesh):
    """Interface atoms with their stencil nodes and side classification."""
    micro = mesh.micro
    n_of_s = node_of_site(mesh)
    nodes = np.where(mesh.kind == KIND_INTERFACE)[0]
    sites = mesh.site[nodes]
    if np.any(sites < 0):
        raise CouplingError("interface node without a lattice site")
    masks = micro.range_mask[sites]
    active = ((masks[:, None] >> np.arange(6)) & 1).astype(bool)
    nbr_sites = micro.nbr[sites]          # (ni, 6), -1 where absent
    nbr_nodes = np.where(nbr_sites >= 0, n_of_s[nbr_sites], -1)
    if np.any((nbr_nodes < 0) & active):
        raise CouplingError("interface stencil leaves the mesh")
    side = np.zeros_like(active)
    ok = nbr_nodes >= 0
    side[ok] = mesh.kind[nbr_nodes[ok]] <= KIND_INTERFACE
    side &= active
    return nodes, sites, nbr_nodes, active, side


def _variable_list(active, side, levels):
    """Flat (atom, rho, sigma) variable triples for the min-norm solve.

    levels[i] is the per-atom widening level: each row of atom i admits,
    beyond its base pattern, the first levels[i] genuinely new
    directions from _WIDEN_OFFSETS.
    """
    ni = len(active)
    var_atom, var_rho, var_sig = [], [], []
    row_ptr = []                       # (atom, rho) -> slice into variables
    for i in range(ni):
        level = int(levels[i])
        for r in range(6):
            if not active[i, r] or side[i, r]:
                continue
            allowed = set()
            for s in range(6):
                if active[i, s] and side[i, s]:
                    allowed.add(s)
            for off in (1, -1):
                s = (r + off) % 6
                if active[i, s]:
                    allowed.add(s)
            extras = [s for s in ((r + off) % 6 for off in _WIDEN_OFFSETS)
                      if active[i, s] and s not in allowed]
            allowed.update(extras[:level])
            sigmas = sorted(allowed)
            row_ptr.append((i, r, len(var_atom), len(sigmas)))
            for s in sigmas:
                var_atom.append(i)
                var_rho.append(r)
                var_sig.append(s)
    return (np.array(var_atom, dtype=np.int64),
            np.array(var_rho, dtype=np.int64),
            np.array(var_sig, dtype=np.int64),
            row_ptr)


def _static_direction_weights(mesh: CoupledMesh, nodes, nbr_nodes,
                              active, side) -> np.ndarray:
    """Fixed part a0[z, rho] of the uniform-state force coefficients.

    Under y = F x the assembled gradient at node z is
    sum_rho a[z, rho] * m_rho(F) with m_rho the bond-force vector of the
    stretched lattice; this returns the part of ``a`` that does not
    depend on the reconstruction variables: incidence of the core site
    energies, incidence of the identity rows of the interface atoms, and
    the Cauchy-Born contribution through the weighted hat-function
    gradients.
    """
    micro = mesh.micro
    n_of_s = node_of_site(mesh)
    a0 = np.zeros((mesh.n_nodes, 6))

    core_nodes = np.where(mesh.kind == KIND_CORE)[0]
    core_sites = mesh.site[core_nodes]
    core_masks = micro.range_mask[core_sites]
    for j in range(6):
        act = (core_masks >> j) & 1 == 1
        tails = core_nodes[act]
        heads = n_of_s[micro.nbr[core_sites[act], j]]
        if np.any(heads < 0):
            raise CouplingError("core stencil leaves the mesh")
        np.add.at(a0[:, j], heads, 1.0)
        np.add.at(a0[:, j], tails, -1.0)

    for j in range(6):
        ident = side[:, j]
        np.add.at(a0[:, j], nbr_nodes[ident, j], 1.0)
        np.add.at(a0[:, j], nodes[ident], -1.0)

    grads = mesh.shape_gradients()                      # (m, 3, 2)
    w = (mesh.omega[:, None, None] * grads).reshape(-1, 2)
    s_node = np.zeros((mesh.n_nodes, 2))
    np.add.at(s_node, mesh.tri.reshape(-1), w)
    a0 += (s_node @ DIRECTIONS.T) / DET_A
    return a0


def build_coefficients(lattice: TriangularLattice, mesh: CoupledMesh,
                       ghost_constraints: bool = True,
                       tol: float = 1e-11) -> ReconstructionCoefficients:
    """Reconstruction matrices for every interface atom of the mesh.

    Solves one global minimum-norm least-squares problem for all
    reconstruction weights, subject to per-bond consistency and (by
    default) elimination of the spurious forces that a uniform
    deformation would otherwise leave near the interface.  If the base
    stencil pattern admits no solution the pattern is widened one
    rotational neighbour at a time; failure at the widest pattern raises
    :class:`CouplingError` naming the worst atom.
    """
    if lattice is not mesh.micro and lattice.S != mesh.micro.S:
        raise CouplingError("lattice does not match the mesh micro-lattice")
    micro = mesh.micro
    nodes, sites, nbr_nodes, active, side = _interface_geometry(mesh)
    ni = len(nodes)

    if ghost_constraints:
        a0 = _static_direction_weights(mesh, nodes, nbr_nodes, active, side)
        vac = micro.vacancy_mn
        lo = float(hexnorm(vac).max()) + 2.0 if len(vac) else 0.0
        band = np.where((mesh.hexrad >= lo - 1e-9)
                        & (mesh.hexrad <= mesh.Ra + mesh.W + 1.5))[0]
    else:
        a0 = None
        band = np.empty(0, dtype=np.int64)
    node_row = np.full(mesh.n_nodes, -1, dtype=np.int64)
    node_row[band] = np.arange(len(band))

    levels = np.zeros(ni, dtype=np.int64)
    last_err = None
    for _ in range(ni * _MAX_WIDEN + 1):
        var_atom, var_rho, var_sig, row_ptr = _variable_list(
            active, side, levels)
        nv = len(var_atom)
        n_cons = 2 * len(row_ptr)
        n_ghost = 3 * len(band)
        A = np.zeros((n_cons + n_ghost, nv))
        b = np.zeros(n_cons + n_ghost)

        for k, (i, r, start, count) in enumerate(row_ptr):
            cols = np.arange(start, start + count)
            A[2 * k, cols] = DIRECTIONS[var_sig[cols], 0]
            A[2 * k + 1, cols] = DIRECTIONS[var_sig[cols], 1]
            b[2 * k] = DIRECTIONS[r, 0]
            b[2 * k + 1] = DIRECTIONS[r, 1]

        if ghost_constraints and nv:
            sign = np.where(var_rho < 3, 1.0, -1.0)
            d = var_rho % 3
            heads = nbr_nodes[var_atom, var_sig]
            tails = nodes[var_atom]
            for z, s in ((heads, sign), (tails, -sign)):
                rz = node_row[z]
                hit = rz >= 0
                A[n_cons + 3 * rz[hit] + d[hit], np.arange(nv)[hit]] += s[hit]
            rhs = -(a0[band, 0:3] - a0[band, 3:6])
            b[n_cons:] = rhs.reshape(-1)

        x, _, _, _ = np.linalg.lstsq(A, b, rcond=None)
        row_res = np.abs(A @ x - b) if len(b) else np.zeros(1)
        resid = float(row_res.max())

        C = np.zeros((ni, 6, 6))
        rr = np.arange(6)
        for i in range(ni):
            ident = side[i]
            C[i, rr[ident], rr[ident]] = 1.0
        if nv:
            np.add.at(C, (var_atom, var_rho, var_sig), x)

        coeffs = ReconstructionCoefficients(
            nodes=nodes, sites=sites, nbr_nodes=nbr_nodes, active=active,
            side=side, C=C, ghost_constrained=bool(ghost_constraints),
            widen_levels=levels, solve_residual=resid)
        if resid <= tol and coeffs.consistency_residual() <= 1e-12:
            return coeffs

        # widen the stencil pattern of the atoms adjacent to the rows
        # carrying the bulk of the residual (least squares smears an
        # infeasibility over many rows; cut relative to the maximum),
        # one new direction per pass
        def atoms_of_rows(rows):
            sel = np.zeros(ni, dtype=bool)
            for w in rows:
                if w < n_cons:
                    sel[row_ptr[w // 2][0]] = True
                else:
                    z = band[(w - n_cons) // 3]
                    near = np.linalg.norm(mesh.xy[nodes] - mesh.xy[z],
                                          axis=1)
                    close = near <= 1.0 + 1e-9
                    sel[close if close.any()
                        else [int(np.argmin(near))]] = True
            return sel

        bump = atoms_of_rows(np.where(row_res > 0.3 * resid)[0])
        bump &= levels < _MAX_WIDEN
        if not np.any(bump):
            bump = atoms_of_rows(np.where(row_res > tol)[0])
            bump &= levels < _MAX_WIDEN
        worst = int(np.argmax(row_res))
        if worst < n_cons:
            atom = row_ptr[worst // 2][0]
        else:
            z = band[(worst - n_cons) // 3]
            atom = int(np.argmin(
                np.linalg.norm(mesh.xy[nodes] - mesh.xy[z], axis=1)))
        last_err = (f"constraint residual {resid:.2e}; worst near atom "
                    f"node {int(nodes[atom])} at {mesh.xy[nodes[atom]]}")
        if not np.any(bump):
            break
        levels[bump] += 1
    raise CouplingError(f"no admissible reconstruction: {last_err}")


# ---------------------------------------------------------------------------
# coupled energy model
# ---------------------------------------------------------------------------


class CoupledEnergyModel:
    """Hybrid energy, gradient and Hessian on a coupled mesh.

    States are arrays y of shape (n_nodes, 2).  The energy is measured
    relative to the applied far-field state ``y^B = B x``; gradient rows
    of clamped boundary nodes are zeroed.
    """

    def __init__(self, mesh: CoupledMesh, potential: EamPotential,
                 coefficients: ReconstructionCoefficients | None = None,
                 B: np.ndarray | None = None):
        self.mesh = mesh
        self.potential = potential
        if B is None:
            B = potential.ground_stretch() * np.eye(2)
        self.B = np.asarray(B, dtype=float)
        if abs(np.linalg.det(self.B)) < 1e-12:
            raise CouplingError("applied deformation B is singular")
        if coefficients is None:
            coefficients = build_coefficients(mesh.micro, mesh)
        self.coeffs = coefficients

        micro = mesh.micro
        n_of_s = node_of_site(mesh)

        core_nodes = np.where(mesh.kind == KIND_CORE)[0]
        core_sites = mesh.site[core_nodes]
        self.core_groups = []
        masks = micro.range_mask[core_sites]
        for mask in np.unique(masks):
            if mask == 0:
                continue
            dirs = tuple(j for j in range(6) if mask >> j & 1)
            sel = masks == mask
            tails = core_nodes[sel]
            heads = n_of_s[micro.nbr[np.ix_(core_sites[sel], dirs)]]
            if np.any(heads < 0):
                raise CouplingError("core stencil leaves the mesh")
            self.core_groups.append((dirs, tails, heads))

        c = self.coeffs
        if not np.all(c.active):
            raise CouplingError(
                "interface atom with truncated stencil is not supported")
        self.ifc_nodes = c.nodes
        self.ifc_nbr = c.nbr_nodes
        self.ifc_C = c.C

        self.cb_els = np.where(mesh.omega > 0)[0]
        self.cb_tri = mesh.tri[self.cb_els]
        self.cb_w = mesh.omega[self.cb_els]
        self.cb_G = mesh.shape_gradients()[self.cb_els]

        self.free_nodes = ~mesh.boundary_node_mask()
        self.free = np.repeat(self.free_nodes, 2)

        # reference values of every term at y^B (relative-energy offsets)
        self._ref_core = {
            dirs: float(self.potential.value(DIRECTIONS[list(dirs)] @ self.B.T))
            for dirs, _, _ in self.core_groups
        }
        g6 = DIRECTIONS @ self.B.T
        self._ref_ifc = float(self.potential.value(g6))
        self._ref_cb = self.potential.cb_energy(self.B)

    # -- states -----------------------------------------------------------

    def y_far(self) -> np.ndarray:
        """The applied far-field state ``y^B = B x`` at every node."""
        return self.mesh.xy @ self.B.T

    @property
    def lattice(self) -> TriangularLattice:
        return self.mesh.micro

    # -- assembly helpers ---------------------------------------------------

    def _cb_gradients(self, y: np.ndarray) -> np.ndarray:
        F = np.einsum("mpi,mpj->mij", y[self.cb_tri], self.cb_G)
        det = F[:, 0, 0] * F[:, 1, 1] - F[:, 0, 1] * F[:, 1, 0]
        bad = det <= 0
        if np.any(bad):
            e = int(self.cb_els[np.argmin(det)])
            raise CouplingError(
                f"degenerate element {e}: det grad y = {det.min():.3e}")
        return F

    def _interface_stencils(self, y: np.ndarray) -> np.ndarray:
        d6 = y[self.ifc_nbr] - y[self.ifc_nodes][:, None, :]
        return np.einsum("ars,asj->arj", self.ifc_C, d6)

    # -- energy / gradient / hessian ----------------------------------------

    def energy(self, y: np.ndarray) -> float:
        return self.energy_and_gradient(y)[0]

    def energy_and_gradient(self, y: np.ndarray, zero_dirichlet: bool = True):
        """Relative energy and its first variation.

        Rows of clamped boundary nodes are zeroed unless
        zero_dirichlet=False (the raw variation is what enters the
        stress identities; by translation invariance its rows sum to
        zero).
        """
        y = np.asarray(y, dtype=float)
        pot = self.potential
        total = 0.0
        out = np.zeros_like(y)

        for dirs, tails, heads in self.core_groups:
            g = y[heads] - y[tails][:, None, :]
            val, dv = pot.value_and_gradient(g)
            total += float(np.sum(val)) - len(tails) * self._ref_core[dirs]
            np.add.at(out, heads.reshape(-1), dv.reshape(-1, 2))
            out[tails] -= dv.sum(axis=1)

        if len(self.ifc_nodes):
            ghat = self._interface_stencils(y)
            val, dv = pot.value_and_gradient(ghat)
            total += float(np.sum(val)) - len(self.ifc_nodes) * self._ref_ifc
            f = np.einsum("arj,ars->asj", dv, self.ifc_C)
            np.add.at(out, self.ifc_nbr.reshape(-1), f.reshape(-1, 2))
            out[self.ifc_nodes] -= f.sum(axis=1)

        F = self._cb_gradients(y)
        Wv = pot.cb_energy_batch(F)
        total += float(self.cb_w @ (Wv - self._ref_cb))
        P = pot.cb_stress_batch(F)
        fel = np.einsum("m,mij,mpj->mpi", self.cb_w, P, self.cb_G)
        np.add.at(out, self.cb_tri.reshape(-1), fel.reshape(-1, 2))

        if zero_dirichlet:
            out[~self.free_nodes] = 0.0
        return total, out

    def gradient(self, y: np.ndarray, zero_dirichlet: bool = True) -> np.ndarray:
        return self.energy_and_gradient(y, zero_dirichlet)[1]

    def hessian(self, y: np.ndarray) -> sp.csr_matrix:
        """Sparse (2n, 2n) second variation (all rows, no Dirichlet mask)."""
        y = np.asarray(y, dtype=float)
        pot = self.potential
        n = self.mesh.n_nodes
        rows, cols, vals = [], [], []

        def emit(r_idx, c_idx, blocks):
            m = len(r_idx)
            rr = (2 * r_idx[:, None, None]
                  + np.arange(2)[None, :, None]).repeat(2, axis=2)
            cc = (2 * c_idx[:, None, None]
                  + np.arange(2)[None, None, :]).repeat(2, axis=1)
            rows.append(rr.reshape(-1))
            cols.append(cc.reshape(-1))
            vals.append(blocks.reshape(m * 4))

        def emit_stencil(tails, heads, H):
            nd = heads.shape[1]
            emit(tails, tails, H.sum(axis=(1, 2)))
            for p in range(nd):
                emit(heads[:, p], tails, -H[:, p].sum(axis=1))
                emit(tails, heads[:, p], -H[:, :, p].sum(axis=1))
                for q in range(nd):
                    emit(heads[:, p], heads[:, q], H[:, p, q])

        for dirs, tails, heads in self.core_groups:
            g = y[heads] - y[tails][:, None, :]
            emit_stencil(tails, heads, pot.hessian(g))

        if len(self.ifc_nodes):
            ghat = self._interface_stencils(y)
            Hg = pot.hessian(ghat)
            HD = np.einsum("arc,arsij,asd->acdij", self.ifc_C, Hg, self.ifc_C)
            emit_stencil(self.ifc_nodes, self.ifc_nbr, HD)

        F = self._cb_gradients(y)
        g = np.einsum("mij,rj->mri", F, DIRECTIONS)
        Hp = pot.hessian(g)
        M = np.einsum("mrsik,rj,sl->mijkl", Hp, DIRECTIONS, DIRECTIONS) / DET_A
        K = np.einsum("m,mijkl,mpj,mql->mpiqk", self.cb_w, M,
                      self.cb_G, self.cb_G)
        for p in range(3):
            for q in range(3):
                emit(self.cb_tri[:, p], self.cb_tri[:, q], K[:, p, :, q])

        H = sp.coo_matrix(
            (np.concatenate(vals),
             (np.concatenate(rows), np.concatenate(cols))),
            shape=(2 * n, 2 * n))
        return H.tocsr()

    def solve(self, cfg=None, y0: np.ndarray | None = None):
        from .solver import minimize_coupled
        return minimize_coupled(self, cfg=cfg, y0=y0)


# ---------------------------------------------------------------------------
# machine-checkable coupling diagnostics
# ---------------------------------------------------------------------------


def patch_deformations(potential: EamPotential) -> dict[str, np.ndarray]:
    """Uniform test deformations: ground stretch, dilated, sheared."""
    t = potential.ground_stretch()
    F0 = t * np.eye(2)
    shear = np.array([[1.0, 0.03], [0.0, 1.0]])
    return {"F0": F0, "1.03*F0": 1.03 * F0, "shear(0.03)*F0": shear @ F0}


def ghost_force_norm(mesh: CoupledMesh, potential: EamPotential,
                     coefficients: ReconstructionCoefficients,
                     F: np.ndarray) -> float:
    """max-norm of the assembled gradient at the uniform state y = F x."""
    model = CoupledEnergyModel(mesh, potential, coefficients, B=F)
    g = model.gradient(model.y_far())
    return float(np.abs(g[model.free_nodes]).max())


def interface_energy_mismatch(mesh: CoupledMesh, potential: EamPotential,
                              coefficients: ReconstructionCoefficients,
                              F: np.ndarray) -> float:
    """max per-interface-atom |V(C . D y^F) - V(F on the full stencil)|."""
    model = CoupledEnergyModel(mesh, potential, coefficients, B=F)
    ghat = model._interface_stencils(model.y_far())
    exact = float(potential.value(DIRECTIONS @ np.asarray(F, dtype=float).T))
    return float(np.abs(potential.value(ghat) - exact).max())
