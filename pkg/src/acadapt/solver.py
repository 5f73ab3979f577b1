"""Nonlinear minimization for the atomistic and coupled problems.

Newton iterations with Armijo backtracking; if the Hessian factorization
signals indefiniteness the step falls back to a diagonally shifted
(modified) Newton direction, doubling the shift until the direction is
a descent direction. Dirichlet conditions enter through a free-DOF
mask: clamped entries never move and their rows/columns are excluded
from the linear solves.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import atomistic
from .lattice import TriangularLattice
from .potential import EamPotential


@dataclass
class SolveConfig:
    grad_tol: float = 1e-8
    max_iter: int = 200
    armijo_c: float = 1e-4
    min_step: float = 1e-14
    shift0: float = 1e-6


@dataclass
class SolutionState:
    y: np.ndarray
    energy: float
    grad_norm: float
    iterations: int
    converged: bool
    strongly_stable: bool | None = None
    history: list = field(default_factory=list)

    def write_log(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "energy", "gradNorm", "step"])
            for row in self.history:
                w.writerow(row)


def _solve_spd(H, rhs, shift0):
    """Solve H d = rhs, shifting the diagonal if H is not positive
    definite. Returns (d, used_shift)."""
    n = H.shape[0]
    shift = 0.0
    for _ in range(60):
        try:
            if shift > 0:
                fac = spla.splu((H + shift * sp.eye(n)).tocsc())
            else:
                fac = spla.splu(H.tocsc())
            d = fac.solve(rhs)
            if np.all(np.isfinite(d)) and float(d @ rhs) > 0:
                return d, shift
        except RuntimeError:
            pass
        shift = shift0 if shift == 0.0 else 2.0 * shift
    # last resort: steepest descent
    return rhs.copy(), shift


def newton_minimize(fun_grad, hess, x0: np.ndarray, free: np.ndarray,
                    cfg: SolveConfig | None = None) -> SolutionState:
    """Minimize over x[free]; fun_grad(x) -> (E, dE), hess(x) -> sparse.

    free is a boolean mask over the flattened DOF vector.
    """
    cfg = cfg or SolveConfig()
    x = np.array(x0, dtype=float)
    n_free = int(np.sum(free))
    history = []
    E, g = fun_grad(x)
    for it in range(cfg.max_iter + 1):
        gf = g[free]
        gnorm = float(np.max(np.abs(gf))) if n_free else 0.0
        history.append([it, E, gnorm, 0.0])
        if gnorm <= cfg.grad_tol:
            return SolutionState(x, E, gnorm, it, True, history=history)
        if it == cfg.max_iter:
            break
        H = hess(x)
        Hff = H[free][:, free]
        d, _ = _solve_spd(Hff.tocsr(), -gf, cfg.shift0)
        # Armijo backtracking along the (descent) direction
        slope = float(gf @ d)
        if slope >= 0:
            d = -gf
            slope = float(gf @ d)
        t = 1.0
        accepted = False
        while t >= cfg.min_step:
            xt = x.copy()
            xt[free] += t * d
            try:
                Et, gt = fun_grad(xt)
            except (ValueError, FloatingPointError):
                t *= 0.5
                continue
            if Et <= E + cfg.armijo_c * t * slope:
                x, E, g = xt, Et, gt
                history[-1][3] = t
                accepted = True
                break
            if t == 1.0 and np.isfinite(Et):
                # terminal phase: near the minimum the energy decrease
                # drops below the roundoff floor and the sufficient-
                # decrease test turns into noise; the full Newton step
                # is still sound if it contracts the gradient strongly
                gn_t = float(np.max(np.abs(gt[free]))) if n_free else 0.0
                if gn_t <= 0.5 * gnorm:
                    x, E, g = xt, Et, gt
                    history[-1][3] = t
                    accepted = True
                    break
            t *= 0.5
        if not accepted:
            return SolutionState(x, E, gnorm, it, False, history=history)
    gnorm = float(np.max(np.abs(g[free]))) if n_free else 0.0
    return SolutionState(x, E, gnorm, cfg.max_iter, gnorm <= cfg.grad_tol,
                         history=history)


def minimize_coupled(model, cfg: SolveConfig | None = None,
                     y0: np.ndarray | None = None) -> SolutionState:
    """Minimize a coupled energy model over its free nodes.

    Starts from the applied far-field state unless y0 is given.  On
    convergence the Hessian at the solution is factorized to decide the
    strongly_stable flag (smallest eigenvalue of the free-DOF block
    strictly positive); a singular factorization counts as not strongly
    stable.
    """
    y0 = model.y_far() if y0 is None else np.asarray(y0, dtype=float)

    def fg(x):
        E, G = model.energy_and_gradient(x.reshape(-1, 2))
        return E, G.reshape(-1)

    def hs(x):
        return model.hessian(x.reshape(-1, 2))

    st = newton_minimize(fg, hs, y0.reshape(-1), model.free, cfg)
    st.y = st.y.reshape(-1, 2)
    if st.converged:
        f = model.free
        Hff = model.hessian(st.y)[f][:, f].tocsc()
        try:
            vals = spla.eigsh(Hff, k=1, sigma=0.0, which="LM",
                              return_eigenvectors=False)
            st.strongly_stable = bool(float(np.min(vals)) > 0.0)
        except (RuntimeError, ValueError, ArithmeticError):
            st.strongly_stable = False
    return st


class AtomisticProblem:
    """Clamped atomistic minimization on a defected lattice.

    The outermost hexagon layer is held at the applied affine state
    y = B x; all other sites are free.
    """

    def __init__(self, lattice: TriangularLattice, potential: EamPotential,
                 B: np.ndarray, clamp_layers: int = 1):
        self.lattice = lattice
        self.potential = potential
        self.B = np.asarray(B, dtype=float)
        rings = lattice.site_rings()
        self.free_sites = rings <= lattice.N - clamp_layers
        self.free = np.repeat(self.free_sites, 2)

    def applied_state(self) -> np.ndarray:
        return self.lattice.xy @ self.B.T

    def energy(self, y):
        return atomistic.energy(self.lattice, self.potential, y)

    def gradient(self, y):
        return atomistic.gradient(self.lattice, self.potential, y)

    def hessian(self, y):
        return atomistic.hessian(self.lattice, self.potential, y)

    def solve(self, cfg: SolveConfig | None = None,
              y0: np.ndarray | None = None) -> SolutionState:
        y0 = self.applied_state() if y0 is None else np.asarray(y0, dtype=float)

        def fg(x):
            E, G = atomistic.energy_and_gradient(
                self.lattice, self.potential, x.reshape(-1, 2))
            return E, G.reshape(-1)

        def hs(x):
            return atomistic.hessian(self.lattice, self.potential,
                                     x.reshape(-1, 2))

        st = newton_minimize(fg, hs, y0.reshape(-1), self.free, cfg)
        st.y = st.y.reshape(-1, 2)
        return st

    def min_eigenvalue(self, y: np.ndarray, gram: sp.spmatrix | None = None,
                       k: int = 1) -> float:
        """Smallest eigenvalue of the Hessian at y relative to the
        gradient-seminorm Gram matrix, over the free DOFs."""
        H = self.hessian(y)
        G = atomistic.p1_gradient_gram(self.lattice) if gram is None else gram
        f = self.free
        Hff = H[f][:, f].tocsc()
        Gff = G[f][:, f].tocsc()
        vals = spla.eigsh(Hff, k=k, M=Gff, sigma=0.0, which="LM",
                          return_eigenvectors=False)
        return float(np.min(vals))
